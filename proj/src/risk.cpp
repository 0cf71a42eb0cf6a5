#include "metarisk/risk.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace metarisk {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw RiskError(msg);
}

/// Indices of `losses` ordered by descending value, ties by lower index.
std::vector<std::uint32_t> desc_order(std::span<const double> losses) {
  std::vector<std::uint32_t> idx(losses.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::uint32_t a, std::uint32_t b) { return losses[a] > losses[b]; });
  return idx;
}

std::vector<std::uint32_t> asc_order(std::span<const double> losses) {
  std::vector<std::uint32_t> idx(losses.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::uint32_t a, std::uint32_t b) { return losses[a] < losses[b]; });
  return idx;
}

double mean_of(std::span<const double> losses, std::span<const std::uint32_t> idx) {
  double s = 0.0;
  for (std::uint32_t i : idx) s += losses[i];
  return s / static_cast<double>(idx.size());
}

/// Empirical CDF value per sample: rank/n with ties sharing the max rank.
std::vector<double> empirical_cdf(std::span<const double> losses) {
  std::size_t n = losses.size();
  std::vector<double> cdf(n);
  auto idx = asc_order(losses);
  // walk groups of equal values; every member gets the group's last rank
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && losses[idx[j + 1]] == losses[idx[i]]) ++j;
    double p = static_cast<double>(j + 1) / static_cast<double>(n);
    for (std::size_t k = i; k <= j; ++k) cdf[idx[k]] = p;
    i = j + 1;
  }
  return cdf;
}

std::span<const double> values_of(const ad::Value& v) {
  return {v.value().data().data(), v.value().numel()};
}

}  // namespace

std::size_t tail_count(double alpha, std::size_t n) {
  double x = alpha * static_cast<double>(n);
  auto k = static_cast<std::size_t>(std::ceil(x - 1e-9));
  return std::max<std::size_t>(k, 1);
}

RiskFunctional RiskFunctional::parse(const std::string& spec) {
  auto colon = spec.find(':');
  std::string name = spec.substr(0, colon);
  double param = 0.0;
  bool has_param = colon != std::string::npos;
  if (has_param) {
    try {
      std::size_t used = 0;
      param = std::stod(spec.substr(colon + 1), &used);
      if (used != spec.size() - colon - 1) throw std::invalid_argument("");
    } catch (const std::exception&) {
      throw RiskError("risk spec '" + spec + "': bad parameter");
    }
  }

  RiskFunctional r;
  if (name == "ev") {
    require(!has_param, "risk spec 'ev' takes no parameter");
    r.kind = RiskKind::expected_value;
  } else if (name == "cvar" || name == "icvar" || name == "trimmed") {
    require(has_param, "risk spec '" + spec + "': missing alpha");
    r.kind = name == "cvar" ? RiskKind::cvar
                            : (name == "icvar" ? RiskKind::icvar : RiskKind::trimmed);
    r.alpha = param;
  } else if (name == "meanvar") {
    require(has_param, "risk spec '" + spec + "': missing c");
    r.kind = RiskKind::mean_variance;
    r.c = param;
  } else if (name == "human") {
    r.kind = RiskKind::human_aligned;
    if (has_param) r.gamma = param;
  } else {
    throw RiskError("unknown risk spec '" + spec + "'");
  }
  r.validate_params();
  return r;
}

std::string RiskFunctional::str() const {
  char buf[64];
  switch (kind) {
    case RiskKind::expected_value: return "ev";
    case RiskKind::cvar: std::snprintf(buf, sizeof buf, "cvar:%g", alpha); return buf;
    case RiskKind::icvar: std::snprintf(buf, sizeof buf, "icvar:%g", alpha); return buf;
    case RiskKind::trimmed: std::snprintf(buf, sizeof buf, "trimmed:%g", alpha); return buf;
    case RiskKind::mean_variance: std::snprintf(buf, sizeof buf, "meanvar:%g", c); return buf;
    case RiskKind::human_aligned: std::snprintf(buf, sizeof buf, "human:%g", gamma); return buf;
  }
  return "?";
}

double RiskFunctional::distortion(double p) const {
  if (w) return w(p);
  if (p <= 0.0) return 0.0;
  if (p >= 1.0) return 1.0;
  double a = std::pow(p, gamma);
  double b = std::pow(1.0 - p, gamma);
  return a / std::pow(a + b, 1.0 / gamma);
}

void RiskFunctional::validate_params() const {
  switch (kind) {
    case RiskKind::cvar:
    case RiskKind::icvar:
      require(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0,1)");
      break;
    case RiskKind::trimmed:
      require(alpha > 0.0 && alpha < 0.5, "trimmed alpha must lie in (0,0.5)");
      break;
    case RiskKind::mean_variance:
      require(c >= 0.0, "mean-variance c must be nonnegative");
      break;
    case RiskKind::expected_value:
    case RiskKind::human_aligned:
      break;
  }
}

void RiskFunctional::validate(std::size_t n) const {
  require(n >= 1, "risk estimators need at least one loss");
  validate_params();
  if (kind == RiskKind::trimmed) {
    std::size_t k = tail_count(alpha, n);
    require(n > 2 * k, "trimming leaves nothing: n=" + std::to_string(n) +
                           ", k=" + std::to_string(k));
  }
}

double expected_value(std::span<const double> losses) {
  require(!losses.empty(), "expected_value: empty loss vector");
  double s = 0.0;
  for (double v : losses) s += v;
  return s / static_cast<double>(losses.size());
}

double var_alpha(std::span<const double> losses, double alpha) {
  require(!losses.empty(), "var_alpha: empty loss vector");
  require(alpha > 0.0 && alpha < 1.0, "var_alpha: alpha must lie in (0,1)");
  std::size_t k = tail_count(alpha, losses.size());
  auto idx = asc_order(losses);
  return losses[idx[k - 1]];
}

double cvar(std::span<const double> losses, double alpha) {
  RiskFunctional r;
  r.kind = RiskKind::cvar;
  r.alpha = alpha;
  r.validate(losses.size());
  std::size_t k = tail_count(alpha, losses.size());
  auto idx = desc_order(losses);
  return mean_of(losses, std::span(idx).first(k));
}

double icvar(std::span<const double> losses, double alpha) {
  RiskFunctional r;
  r.kind = RiskKind::icvar;
  r.alpha = alpha;
  r.validate(losses.size());
  std::size_t k = tail_count(alpha, losses.size());
  auto idx = asc_order(losses);
  return mean_of(losses, std::span(idx).first(k));
}

double trimmed(std::span<const double> losses, double alpha) {
  RiskFunctional r;
  r.kind = RiskKind::trimmed;
  r.alpha = alpha;
  r.validate(losses.size());
  std::size_t k = tail_count(alpha, losses.size());
  auto idx = desc_order(losses);
  return mean_of(losses, std::span(idx).subspan(k, losses.size() - 2 * k));
}

double mean_variance(std::span<const double> losses, double c) {
  require(!losses.empty(), "mean_variance: empty loss vector");
  require(c >= 0.0, "mean_variance: c must be nonnegative");
  double m = expected_value(losses);
  double v = 0.0;
  for (double x : losses) v += (x - m) * (x - m);
  v /= static_cast<double>(losses.size());
  return m + c * v;
}

double human_aligned(std::span<const double> losses,
                     const std::function<double(double)>& w) {
  require(!losses.empty(), "human_aligned: empty loss vector");
  auto cdf = empirical_cdf(losses);
  double s = 0.0;
  for (std::size_t i = 0; i < losses.size(); ++i) s += losses[i] * w(cdf[i]);
  return s / static_cast<double>(losses.size());
}

double eval_risk(const RiskFunctional& rho, std::span<const double> losses) {
  rho.validate(losses.size());
  switch (rho.kind) {
    case RiskKind::expected_value: return expected_value(losses);
    case RiskKind::cvar: return cvar(losses, rho.alpha);
    case RiskKind::icvar: return icvar(losses, rho.alpha);
    case RiskKind::trimmed: return trimmed(losses, rho.alpha);
    case RiskKind::mean_variance: return mean_variance(losses, rho.c);
    case RiskKind::human_aligned:
      return human_aligned(losses, [&](double p) { return rho.distortion(p); });
  }
  throw RiskError("eval_risk: unknown kind");
}

ad::Value eval_risk(const RiskFunctional& rho, const ad::Value& losses) {
  auto vals = values_of(losses);
  rho.validate(vals.size());
  ad::Tape& tape = *losses.node()->tape;
  std::size_t n = vals.size();

  switch (rho.kind) {
    case RiskKind::expected_value:
      return ad::mean(losses);
    case RiskKind::cvar: {
      std::size_t k = tail_count(rho.alpha, n);
      auto idx = desc_order(vals);
      idx.resize(k);
      return ad::mean(ad::gather(losses, std::move(idx)));
    }
    case RiskKind::icvar: {
      std::size_t k = tail_count(rho.alpha, n);
      auto idx = asc_order(vals);
      idx.resize(k);
      return ad::mean(ad::gather(losses, std::move(idx)));
    }
    case RiskKind::trimmed: {
      std::size_t k = tail_count(rho.alpha, n);
      auto idx = desc_order(vals);
      std::vector<std::uint32_t> mid(idx.begin() + k, idx.end() - k);
      return ad::mean(ad::gather(losses, std::move(mid)));
    }
    case RiskKind::mean_variance: {
      ad::Value m = ad::mean(losses);
      ad::Value var = ad::mean(ad::square(ad::sub(losses, m)));
      return ad::add(m, ad::smul(var, rho.c));
    }
    case RiskKind::human_aligned: {
      // The empirical CDF is held constant under differentiation.
      auto cdf = empirical_cdf(vals);
      Tensor wt({n});
      for (std::size_t i = 0; i < n; ++i) wt[i] = rho.distortion(cdf[i]);
      return ad::mean(ad::mul(losses, tape.constant(std::move(wt))));
    }
  }
  throw RiskError("eval_risk: unknown kind");
}

}  // namespace metarisk
