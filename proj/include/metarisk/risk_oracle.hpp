#pragma once

#include <span>

#include "metarisk/risk.hpp"

namespace metarisk {

/// Brute-force evaluation of a risk functional on a small loss vector
/// (n <= 16), written from the definitions without touching the estimator
/// code paths: tail membership is decided by pairwise rank counting instead
/// of sorting, and mean-variance goes through E[x^2] - E[x]^2. Selected
/// elements are summed in the same canonical order as the estimators
/// (descending for cvar/trimmed, ascending for icvar), so order-statistic
/// kinds must agree bit for bit.
double brute_force_risk(const RiskFunctional& rho, std::span<const double> losses);

}  // namespace metarisk
