#include "metarisk/risk_oracle.hpp"

#include <cmath>

namespace metarisk {

namespace {

// Position of element i in a stable descending ordering, found by counting.
std::size_t rank_desc(std::span<const double> v, std::size_t i) {
  std::size_t r = 0;
  for (std::size_t j = 0; j < v.size(); ++j) {
    if (v[j] > v[i]) ++r;
    else if (v[j] == v[i] && j < i) ++r;
  }
  return r;
}

std::size_t rank_asc(std::span<const double> v, std::size_t i) {
  std::size_t r = 0;
  for (std::size_t j = 0; j < v.size(); ++j) {
    if (v[j] < v[i]) ++r;
    else if (v[j] == v[i] && j < i) ++r;
  }
  return r;
}

std::size_t ceil_alpha_n(double alpha, std::size_t n) {
  auto k = static_cast<std::size_t>(std::ceil(alpha * static_cast<double>(n) - 1e-9));
  return k < 1 ? 1 : k;
}

// Mean over the elements whose rank satisfies `keep`, added in rank order.
template <typename Rank, typename Keep>
double rank_mean(std::span<const double> v, Rank rank, Keep keep) {
  std::size_t n = v.size();
  double s = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (!keep(r)) continue;
    for (std::size_t i = 0; i < n; ++i) {
      if (rank(v, i) == r) {
        s += v[i];
        ++count;
        break;
      }
    }
  }
  return s / static_cast<double>(count);
}

}  // namespace

double brute_force_risk(const RiskFunctional& rho, std::span<const double> losses) {
  std::size_t n = losses.size();
  if (n == 0 || n > 16)
    throw RiskError("brute_force_risk: needs 1 <= n <= 16, got " + std::to_string(n));

  switch (rho.kind) {
    case RiskKind::expected_value: {
      double s = 0.0;
      for (double v : losses) s += v;
      return s / static_cast<double>(n);
    }
    case RiskKind::cvar: {
      std::size_t k = ceil_alpha_n(rho.alpha, n);
      return rank_mean(losses, rank_desc, [&](std::size_t r) { return r < k; });
    }
    case RiskKind::icvar: {
      std::size_t k = ceil_alpha_n(rho.alpha, n);
      return rank_mean(losses, rank_asc, [&](std::size_t r) { return r < k; });
    }
    case RiskKind::trimmed: {
      std::size_t k = ceil_alpha_n(rho.alpha, n);
      if (n <= 2 * k) throw RiskError("brute_force_risk: trimming leaves nothing");
      return rank_mean(losses, rank_desc,
                       [&](std::size_t r) { return r >= k && r < n - k; });
    }
    case RiskKind::mean_variance: {
      double m = 0.0, m2 = 0.0;
      for (double v : losses) {
        m += v;
        m2 += v * v;
      }
      m /= static_cast<double>(n);
      m2 /= static_cast<double>(n);
      return m + rho.c * (m2 - m * m);
    }
    case RiskKind::human_aligned: {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t leq = 0;
        for (std::size_t j = 0; j < n; ++j)
          if (losses[j] <= losses[i]) ++leq;
        s += losses[i] * rho.distortion(static_cast<double>(leq) / static_cast<double>(n));
      }
      return s / static_cast<double>(n);
    }
  }
  throw RiskError("brute_force_risk: unknown kind");
}

}  // namespace metarisk
