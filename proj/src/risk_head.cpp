#include "metarisk/risk_head.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace metarisk {

PhiParams init_phi(std::size_t b) {
  if (b < 1) throw RiskHeadError("init_phi: batch size must be >= 1");
  PhiParams phi;
  phi.logits.assign(b, 0.0);
  return phi;
}

std::vector<double> phi_weights(const PhiParams& phi) {
  std::size_t b = phi.logits.size();
  if (b == 0) throw RiskHeadError("phi_weights: empty head");
  double mx = *std::max_element(phi.logits.begin(), phi.logits.end());
  std::vector<double> w(b);
  double s = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    w[i] = std::exp(phi.logits[i] - mx);
    s += w[i];
  }
  for (double& x : w) x /= s;
  return w;
}

double weight_entropy(std::span<const double> weights) {
  double h = 0.0;
  for (double w : weights)
    if (w > 0.0) h -= w * std::log(w);
  return h;
}

WeightSnapshot snapshot(const PhiParams& phi, long step) {
  WeightSnapshot s;
  s.step = step;
  s.weights = phi_weights(phi);
  s.entropy = weight_entropy(s.weights);
  return s;
}

std::string snapshots_csv(std::span<const WeightSnapshot> snaps) {
  std::string out = "step";
  if (!snaps.empty())
    for (std::size_t i = 0; i < snaps.front().weights.size(); ++i)
      out += ",w_" + std::to_string(i);
  out += ",entropy\n";
  char buf[32];
  for (const auto& s : snaps) {
    out += std::to_string(s.step);
    for (double w : s.weights) {
      std::snprintf(buf, sizeof buf, ",%.17g", w);
      out += buf;
    }
    std::snprintf(buf, sizeof buf, ",%.17g", s.entropy);
    out += buf;
    out += "\n";
  }
  return out;
}

BoundHead bind_head(ad::Tape& tape, const PhiParams& phi, bool requires_grad,
                    bool detached) {
  if (phi.logits.empty()) throw RiskHeadError("bind_head: empty head");
  BoundHead h;
  h.phi = tape.leaf(Tensor::vec(phi.logits), requires_grad);
  h.weights = ad::softmax(detached ? ad::detach(h.phi) : h.phi);
  return h;
}

ad::Value apply_head(const BoundHead& head, const ad::Value& losses) {
  std::size_t b = head.weights.numel();
  if (losses.value().rank() != 1 || losses.numel() != b)
    throw RiskHeadError("apply_head: head is bound to batch size " + std::to_string(b) +
                        ", got losses of shape " + losses.value().shape_str());
  auto [sorted, perm] = ad::sort_desc(losses);
  return ad::dot(head.weights, sorted);
}

ad::Value apply_head(ad::Tape& tape, const PhiParams& phi, const ad::Value& losses) {
  return apply_head(bind_head(tape, phi, /*requires_grad=*/false), losses);
}

double apply_head(const PhiParams& phi, std::span<const double> losses) {
  if (losses.size() != phi.logits.size())
    throw RiskHeadError("apply_head: head is bound to batch size " +
                        std::to_string(phi.logits.size()) + ", got " +
                        std::to_string(losses.size()) + " losses");
  std::vector<double> sorted(losses.begin(), losses.end());
  std::stable_sort(sorted.begin(), sorted.end(), std::greater<double>());
  auto w = phi_weights(phi);
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * sorted[i];
  return s;
}

}  // namespace metarisk
