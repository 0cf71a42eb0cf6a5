#pragma once

#include <span>
#include <string>
#include <vector>

#include "metarisk/autodiff.hpp"

namespace metarisk {

class RiskHeadError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// The learnable mini-batch risk head: a convex combination, via softmax of
/// the logits, over the descending-sorted losses of one batch. The head is
/// bound to a single batch size; applying it to another length is an error.
struct PhiParams {
  std::vector<double> logits;

  std::size_t batch_size() const { return logits.size(); }
};

/// Zero logits, i.e. uniform weights: the head starts out as the batch mean.
PhiParams init_phi(std::size_t b);

/// Post-softmax weights; weights[0] multiplies the largest loss.
std::vector<double> phi_weights(const PhiParams& phi);

/// -sum w ln w, in [0, ln b]. Zero-weight entries contribute nothing.
double weight_entropy(std::span<const double> weights);

struct WeightSnapshot {
  long step = 0;
  std::vector<double> weights;
  double entropy = 0.0;
};

WeightSnapshot snapshot(const PhiParams& phi, long step);

/// CSV rows `step,w_0,...,w_{b-1},entropy`; w_0 multiplies the largest loss.
std::string snapshots_csv(std::span<const WeightSnapshot> snaps);

/// The head bound onto a tape: the phi leaf plus its softmax weights.
/// Keeping the leaf exposed is what lets the outer step differentiate
/// through every inner-step application at once.
struct BoundHead {
  ad::Value phi;
  ad::Value weights;
};

/// `detached` severs the weights from phi (the alternate reading of the
/// inner-step gradient-dropping note; see TrainerConfig::detach_phi_inner).
BoundHead bind_head(ad::Tape& tape, const PhiParams& phi, bool requires_grad = true,
                    bool detached = false);

/// sum_i weights_i * sorted_desc(losses)_i. Differentiable in both the
/// losses and (via the bound weights) phi.
ad::Value apply_head(const BoundHead& head, const ad::Value& losses);

/// Convenience one-shot application with a fresh binding.
ad::Value apply_head(ad::Tape& tape, const PhiParams& phi, const ad::Value& losses);

/// Value-only application to a plain loss vector.
double apply_head(const PhiParams& phi, std::span<const double> losses);

}  // namespace metarisk
