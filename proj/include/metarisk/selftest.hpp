#pragma once

#include <ostream>

namespace metarisk {

/// Fast oracle and invariant self-checks: risk estimators against the
/// brute-force oracle, analytic gradients against finite differences, the
/// meta-gradient against the unrolled pipeline, head convexity bounds, and a
/// determinism micro-run. Prints one pass/fail line per check and returns
/// the number of failures.
int run_selftest(std::ostream& out);

}  // namespace metarisk
