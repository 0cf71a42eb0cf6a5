#include "metarisk/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "metarisk/rng.hpp"

namespace metarisk {

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

void MlpSpec::validate() const {
  if (layer_widths.size() < 2)
    throw ModelError("mlp spec needs at least input and output widths");
  for (std::size_t w : layer_widths)
    if (w == 0) throw ModelError("mlp spec widths must be positive");
}

std::size_t MlpSpec::num_params() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < layer_widths.size(); ++l)
    n += layer_widths[l] * layer_widths[l + 1] + layer_widths[l + 1];
  return n;
}

std::vector<std::string> param_names(const MlpSpec& spec) {
  std::vector<std::string> names;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    names.push_back("w" + std::to_string(l));
    names.push_back("b" + std::to_string(l));
  }
  return names;
}

std::vector<Tensor> init_params(const MlpSpec& spec) {
  spec.validate();
  Rng rng(mix_seed(spec.init_seed, "mlp-init"));
  std::vector<Tensor> params;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    std::size_t fan_in = spec.layer_widths[l], fan_out = spec.layer_widths[l + 1];
    double s = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor w({fan_in, fan_out});
    for (std::size_t i = 0; i < w.numel(); ++i) w[i] = rng.uniform(-s, s);
    params.push_back(std::move(w));
    params.push_back(Tensor({1, fan_out}));
  }
  return params;
}

std::vector<ad::Value> bind_params(ad::Tape& tape, std::span<const Tensor> params,
                                   bool requires_grad) {
  std::vector<ad::Value> out;
  out.reserve(params.size());
  for (const Tensor& p : params) out.push_back(tape.leaf(p, requires_grad));
  return out;
}

ad::Value mlp_forward(ad::Tape& tape, const MlpSpec& spec,
                      std::span<const ad::Value> params, const Tensor& X) {
  spec.validate();
  if (params.size() != 2 * spec.num_layers())
    throw ModelError("mlp_forward: expected " + std::to_string(2 * spec.num_layers()) +
                     " parameter tensors, got " + std::to_string(params.size()));
  if (X.rank() != 2 || X.cols() != spec.input_dim())
    throw ModelError("mlp_forward: input " + X.shape_str() + " does not match d=" +
                     std::to_string(spec.input_dim()));
  ad::Value h = tape.constant(X);
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    h = ad::add(ad::matmul(h, params[2 * l]), params[2 * l + 1]);
    if (l + 1 < spec.num_layers()) h = ad::relu(h);
  }
  return h;
}

Tensor mlp_forward_value(const MlpSpec& spec, std::span<const Tensor> params,
                         const Tensor& X) {
  ad::Tape scratch(ad::Mode::first_order);
  auto bound = bind_params(scratch, params, false);
  return mlp_forward(scratch, spec, bound, X).value();
}

ad::Value cross_entropy_per_sample(const ad::Value& logits, std::span<const int> labels) {
  const Tensor& Z = logits.value();
  if (Z.rank() != 2) throw ModelError("cross_entropy: logits must be rank-2");
  std::size_t b = Z.rows(), C = Z.cols();
  if (labels.size() != b)
    throw ModelError("cross_entropy: " + std::to_string(labels.size()) +
                     " labels for a batch of " + std::to_string(b));
  ad::Tape& tape = *logits.node()->tape;

  // Row max is a constant shift: the value of logsumexp is unchanged by it
  // for any fixed shift, so holding it constant is exact to all orders.
  Tensor rowmax({b, 1});
  Tensor onehot({b, C});
  for (std::size_t i = 0; i < b; ++i) {
    int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= C)
      throw ModelError("cross_entropy: label " + std::to_string(y) + " out of range [0," +
                       std::to_string(C) + ")");
    double m = Z.at(i, 0);
    for (std::size_t j = 1; j < C; ++j) m = std::max(m, Z.at(i, j));
    rowmax[i] = m;
    onehot.at(i, static_cast<std::size_t>(y)) = 1.0;
  }

  ad::Value m = tape.constant(std::move(rowmax));
  ad::Value lse = ad::add(ad::log(ad::sum_axis(ad::exp(ad::sub(logits, m)), 1)), m);
  ad::Value picked = ad::sum_axis(ad::mul(logits, tape.constant(std::move(onehot))), 1);
  return ad::reshape(ad::sub(lse, picked), {b});
}

std::vector<double> cross_entropy_per_sample(const Tensor& Z,
                                             std::span<const int> labels) {
  if (Z.rank() != 2) throw ModelError("cross_entropy: logits must be rank-2");
  std::size_t b = Z.rows(), C = Z.cols();
  if (labels.size() != b)
    throw ModelError("cross_entropy: " + std::to_string(labels.size()) +
                     " labels for a batch of " + std::to_string(b));
  std::vector<double> losses(b);
  for (std::size_t i = 0; i < b; ++i) {
    int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= C)
      throw ModelError("cross_entropy: label " + std::to_string(y) + " out of range [0," +
                       std::to_string(C) + ")");
    double m = Z.at(i, 0);
    for (std::size_t j = 1; j < C; ++j) m = std::max(m, Z.at(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < C; ++j) s += std::exp(Z.at(i, j) - m);
    losses[i] = std::log(s) + m - Z.at(i, static_cast<std::size_t>(y));
  }
  return losses;
}

double accuracy(const Tensor& Z, std::span<const int> labels) {
  if (Z.rank() != 2 || labels.size() != Z.rows())
    throw ModelError("accuracy: logits/labels mismatch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < Z.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < Z.cols(); ++j)
      if (Z.at(i, j) > Z.at(i, best)) best = j;
    if (static_cast<std::size_t>(labels[i]) == best) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(Z.rows());
}

void save_params(const std::string& path, const MlpSpec& spec,
                 std::span<const Tensor> params) {
  auto names = param_names(spec);
  if (params.size() != names.size())
    throw ModelError("save_params: parameter count does not match the spec");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ModelError("save_params: cannot open " + path);
  f << "metarisk-params 1\n" << names.size() << "\n";
  for (std::size_t i = 0; i < names.size(); ++i) {
    f << names[i];
    for (std::size_t d : params[i].shape()) f << " " << d;
    f << "\n";
  }
  for (const Tensor& p : params)
    f.write(reinterpret_cast<const char*>(p.data().data()),
            static_cast<std::streamsize>(p.numel() * sizeof(double)));
  if (!f) throw ModelError("save_params: write failed for " + path);
}

std::vector<Tensor> load_params(const std::string& path, const MlpSpec& spec) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ModelError("load_params: cannot open " + path);
  std::string magic;
  int version = 0;
  std::size_t count = 0;
  f >> magic >> version >> count;
  if (magic != "metarisk-params" || version != 1)
    throw ModelError("load_params: " + path + " is not a parameter checkpoint");

  auto names = param_names(spec);
  if (count != names.size())
    throw ModelError("load_params: checkpoint holds " + std::to_string(count) +
                     " tensors, spec expects " + std::to_string(names.size()));

  std::vector<std::vector<std::size_t>> shapes;
  for (std::size_t i = 0; i < count; ++i) {
    std::string name;
    f >> name;
    if (name != names[i])
      throw ModelError("load_params: tensor '" + name + "' where '" + names[i] +
                       "' was expected");
    std::size_t want_rank = 2;  // both weights and biases are stored rank-2
    std::vector<std::size_t> shape(want_rank);
    for (auto& d : shape) f >> d;
    std::size_t l = i / 2;
    std::vector<std::size_t> expect =
        i % 2 == 0 ? std::vector<std::size_t>{spec.layer_widths[l], spec.layer_widths[l + 1]}
                   : std::vector<std::size_t>{1, spec.layer_widths[l + 1]};
    if (shape != expect)
      throw ModelError("load_params: shape mismatch for '" + name + "': file has " +
                       shape_str(shape) + ", spec expects " + shape_str(expect));
    shapes.push_back(std::move(shape));
  }
  f.ignore(1);  // newline before the binary block

  std::vector<Tensor> params;
  for (const auto& shape : shapes) {
    Tensor t(shape);
    f.read(reinterpret_cast<char*>(t.data().data()),
           static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!f) throw ModelError("load_params: truncated data block in " + path);
    params.push_back(std::move(t));
  }
  return params;
}

}  // namespace metarisk
