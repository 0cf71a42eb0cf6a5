#pragma once

#include <functional>
#include <span>
#include <string>

#include "metarisk/autodiff.hpp"

namespace metarisk {

class RiskError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

enum class RiskKind {
  expected_value,
  cvar,          // mean of the ceil(alpha*n) largest losses
  icvar,         // mean of the ceil(alpha*n) smallest losses
  human_aligned, // E[loss * w(empirical CDF of loss)]
  mean_variance, // mean + c * population variance
  trimmed,       // mean after dropping the ceil(alpha*n) largest and smallest
};

/// A dataset-level risk functional with its parameters. Spec strings:
/// `ev`, `cvar:0.1`, `icvar:0.1`, `trimmed:0.1`, `meanvar:1.0`, `human:2.0`.
struct RiskFunctional {
  RiskKind kind = RiskKind::expected_value;
  double alpha = 0.1;  // cvar / icvar / trimmed, in (0,1); trimmed needs < 0.5
  double c = 1.0;      // mean_variance, >= 0
  double gamma = 2.0;  // parameter of the default distortion family
  std::function<double(double)> w;  // optional custom distortion for human_aligned

  static RiskFunctional parse(const std::string& spec);
  std::string str() const;

  /// Distortion weight: the custom handle if set, otherwise
  /// p^g / (p^g + (1-p)^g)^(1/g), a convex distortion emphasising the tail.
  double distortion(double p) const;

  /// Throws RiskError when a parameter is out of range.
  void validate_params() const;
  /// Additionally checks that the functional is defined for n losses.
  void validate(std::size_t n) const;
};

/// Number of tail samples selected by alpha: ceil(alpha*n), computed so that
/// exact multiples are not pushed up by floating-point noise.
std::size_t tail_count(double alpha, std::size_t n);

// Plain estimators over a finite loss vector. Quantile-based kinds follow
// the order-statistic convention above; summation order is pinned
// (descending value for cvar/trimmed, ascending for icvar) so results are
// reproducible bit for bit.
double expected_value(std::span<const double> losses);
double var_alpha(std::span<const double> losses, double alpha);
double cvar(std::span<const double> losses, double alpha);
double icvar(std::span<const double> losses, double alpha);
double trimmed(std::span<const double> losses, double alpha);
double mean_variance(std::span<const double> losses, double c);
double human_aligned(std::span<const double> losses,
                     const std::function<double(double)>& w);

double eval_risk(const RiskFunctional& rho, std::span<const double> losses);

/// Differentiable estimator over a recorded loss vector; mirrors the plain
/// estimator values. Quantile-based kinds weight each selected sample 1/k
/// with the selecting permutation held constant (sort-subgradient).
ad::Value eval_risk(const RiskFunctional& rho, const ad::Value& losses);

}  // namespace metarisk
