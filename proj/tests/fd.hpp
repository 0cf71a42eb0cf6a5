#pragma once

// Central finite-difference helpers used as independent oracles against the
// analytic gradients. These never touch the backward pass they check.

#include <cmath>
#include <functional>

namespace testutil {

inline double central_diff(const std::function<double(double)>& f, double x,
                           double h = 1e-5) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

/// |a - b| <= tol * max(|a|, |b|, floor)
inline bool close_rel(double a, double b, double tol, double floor = 1e-9) {
  double scale = std::max({std::fabs(a), std::fabs(b), floor});
  return std::fabs(a - b) <= tol * scale;
}

}  // namespace testutil
