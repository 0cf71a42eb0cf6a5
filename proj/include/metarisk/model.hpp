#pragma once

#include <span>
#include <string>
#include <vector>

#include "metarisk/autodiff.hpp"

namespace metarisk {

class ModelError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// A relu MLP: affine layers with relu between them and raw logits out.
/// layer_widths runs input dimension ... class count; two entries make it a
/// plain linear (logistic-regression) classifier.
struct MlpSpec {
  std::vector<std::size_t> layer_widths;
  std::uint64_t init_seed = 0;

  std::size_t input_dim() const { return layer_widths.front(); }
  std::size_t num_classes() const { return layer_widths.back(); }
  std::size_t num_layers() const { return layer_widths.size() - 1; }
  std::size_t num_params() const;
  void validate() const;
};

/// Parameter names, one weight and one bias per layer: w0, b0, w1, b1, ...
std::vector<std::string> param_names(const MlpSpec& spec);

/// Seeded uniform(-s, s) weights with s = sqrt(6 / (fan_in + fan_out));
/// biases start at zero.
std::vector<Tensor> init_params(const MlpSpec& spec);

/// Bind plain parameter tensors onto a tape as leaves.
std::vector<ad::Value> bind_params(ad::Tape& tape, std::span<const Tensor> params,
                                   bool requires_grad = true);

/// Forward pass to logits (batch x classes), fully recorded.
ad::Value mlp_forward(ad::Tape& tape, const MlpSpec& spec,
                      std::span<const ad::Value> params, const Tensor& X);

/// Value-only forward pass (no tape), bit-identical to the recorded one.
Tensor mlp_forward_value(const MlpSpec& spec, std::span<const Tensor> params,
                         const Tensor& X);

/// Per-sample cross entropy: logsumexp(logits_i) - logits_i[label_i], with
/// the max subtracted for stability and no reduction across the batch.
ad::Value cross_entropy_per_sample(const ad::Value& logits, std::span<const int> labels);
std::vector<double> cross_entropy_per_sample(const Tensor& logits,
                                             std::span<const int> labels);

/// Fraction of argmax matches; argmax ties break to the lowest class index.
double accuracy(const Tensor& logits, std::span<const int> labels);

/// Checkpoint: text header listing named shapes, then the little-endian f64
/// stream. Loading verifies the manifest against the expected spec.
void save_params(const std::string& path, const MlpSpec& spec,
                 std::span<const Tensor> params);
std::vector<Tensor> load_params(const std::string& path, const MlpSpec& spec);

}  // namespace metarisk
