#include "metarisk/selftest.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "metarisk/experiment.hpp"
#include "metarisk/risk_oracle.hpp"
#include "metarisk/trainer.hpp"

namespace metarisk {

namespace {

double fd(const std::function<double(double)>& f, double x, double h = 1e-5) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

bool close_rel(double a, double b, double tol, double floor = 1e-9) {
  return std::fabs(a - b) <= tol * std::max({std::fabs(a), std::fabs(b), floor});
}

bool check_risk_oracle() {
  Rng rng(17);
  std::vector<RiskFunctional> zoo;
  for (double a : {0.1, 0.25, 0.5}) {
    RiskFunctional r;
    r.kind = RiskKind::cvar;
    r.alpha = a;
    zoo.push_back(r);
    r.kind = RiskKind::icvar;
    zoo.push_back(r);
    if (a < 0.5) {
      r.kind = RiskKind::trimmed;
      zoo.push_back(r);
    }
  }
  zoo.push_back(RiskFunctional{});
  RiskFunctional h;
  h.kind = RiskKind::human_aligned;
  zoo.push_back(h);
  RiskFunctional mv;
  mv.kind = RiskKind::mean_variance;
  mv.c = 0.5;
  zoo.push_back(mv);

  for (int trial = 0; trial < 300; ++trial) {
    std::size_t n = 1 + rng.uniform_int(12);
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(0.0, 10.0);
    for (const auto& rho : zoo) {
      if (rho.kind == RiskKind::trimmed && n <= 2 * tail_count(rho.alpha, n)) continue;
      double est = eval_risk(rho, v);
      double ora = brute_force_risk(rho, v);
      bool exact = rho.kind != RiskKind::mean_variance && rho.kind != RiskKind::human_aligned;
      if (exact ? est != ora : !close_rel(est, ora, 1e-12)) return false;
    }
  }
  return true;
}

bool check_gradients() {
  Rng rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> xs(6);
    for (double& x : xs) x = rng.uniform(0.3, 2.0);
    ad::Tape tape;
    ad::Value x = tape.leaf(Tensor::vec(xs), true);
    ad::Value y = ad::sum(ad::mul(ad::softmax(x), ad::exp(ad::smul(ad::square(x), 0.3))));
    auto g = ad::backward(y, {x});
    for (std::size_t i = 0; i < xs.size(); ++i) {
      double numeric = fd(
          [&](double v) {
            ad::Tape t;
            auto z = xs;
            z[i] = v;
            ad::Value xv = t.leaf(Tensor::vec(z), true);
            return ad::sum(ad::mul(ad::softmax(xv), ad::exp(ad::smul(ad::square(xv), 0.3))))
                .item();
          },
          xs[i]);
      if (!close_rel(g[0].value()[i], numeric, 1e-5)) return false;
    }
  }
  return true;
}

bool check_meta_gradient() {
  MlpSpec spec{{2, 2}, 31};
  auto theta = init_params(spec);
  auto data = gen_blobs(19, 60, 2, 2, 0.8);
  auto loss_fn = mlp_ce_loss(spec);
  RiskFunctional rho;

  PhiParams phi{{0.2, -0.3, 0.1, 0.25}};
  std::vector<Batch> batches{take(data, std::vector<std::size_t>{0, 1, 2, 3}),
                             take(data, std::vector<std::size_t>{4, 5, 6, 7})};
  std::vector<double> betas{0.08, 0.08};
  Batch val = take(data, std::vector<std::size_t>{20, 21, 22, 23, 24});

  ad::Tape tape;
  auto adapted = inner_adapt(tape, loss_fn, theta, phi, batches, betas);
  Tensor g = outer_phi_grad(loss_fn, adapted, val, rho);

  for (std::size_t i = 0; i < 4; ++i) {
    double numeric = fd(
        [&](double v) {
          PhiParams p = phi;
          p.logits[i] = v;
          ad::Tape t;
          auto a = inner_adapt(t, loss_fn, theta, p, batches, betas);
          return eval_risk(rho, loss_fn(t, a.theta_prime, val)).item();
        },
        phi.logits[i]);
    if (!close_rel(g[i], numeric, 1e-4)) return false;
  }
  return true;
}

bool check_head_bounds() {
  Rng rng(29);
  for (int trial = 0; trial < 2000; ++trial) {
    std::size_t b = 2 + rng.uniform_int(9);
    PhiParams phi;
    std::vector<double> losses;
    for (std::size_t i = 0; i < b; ++i) {
      phi.logits.push_back(rng.uniform(-8, 8));
      losses.push_back(rng.uniform(-3, 6));
    }
    double v = apply_head(phi, losses);
    if (v < *std::min_element(losses.begin(), losses.end()) - 1e-12) return false;
    if (v > *std::max_element(losses.begin(), losses.end()) + 1e-12) return false;
    auto w = phi_weights(phi);
    double sum = 0.0;
    for (double x : w) sum += x;
    if (std::fabs(sum - 1.0) > 1e-12) return false;
    auto shuffled = losses;
    rng.shuffle(shuffled);
    if (apply_head(phi, shuffled) != v) return false;
  }
  return true;
}

bool check_determinism() {
  auto data = gen_blobs(41, 200, 3, 4, 0.7);
  auto splits = split_90_5_5(data, LabeledDataset{Tensor({0, 4}), {}, 3, {}, {}}, 1);
  MlpSpec spec{{4, 6, 3}, 0};
  TrainerConfig cfg;
  cfg.total_steps = 20;
  cfg.batch_size_b = 10;
  cfg.inner_steps = 2;
  cfg.meta_val_batch = 8;
  cfg.seed = 13;
  cfg.early_stop_enabled = false;

  auto a = train_learned(spec, cfg, RiskFunctional{}, splits.train, splits.val);
  auto b = train_learned(spec, cfg, RiskFunctional{}, splits.train, splits.val);
  if (a.records.size() != b.records.size()) return false;
  for (std::size_t i = 0; i < a.records.size(); ++i)
    if (a.records[i].train_risk != b.records[i].train_risk ||
        a.records[i].val_risk != b.records[i].val_risk)
      return false;
  for (std::size_t p = 0; p < a.params.size(); ++p)
    for (std::size_t i = 0; i < a.params[p].numel(); ++i)
      if (a.params[p][i] != b.params[p][i]) return false;
  return true;
}

}  // namespace

int run_selftest(std::ostream& out) {
  struct Check {
    const char* name;
    bool (*fn)();
  };
  const Check checks[] = {
      {"risk estimators match the brute-force oracle", check_risk_oracle},
      {"analytic gradients match finite differences", check_gradients},
      {"meta-gradient matches the unrolled finite differences", check_meta_gradient},
      {"risk head stays within batch loss bounds", check_head_bounds},
      {"training runs are deterministic per seed", check_determinism},
  };
  int failures = 0;
  for (const auto& c : checks) {
    bool ok = c.fn();
    out << (ok ? "[PASS] " : "[FAIL] ") << c.name << "\n";
    failures += !ok;
  }
  return failures;
}

}  // namespace metarisk
