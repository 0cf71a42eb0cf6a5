#include "metarisk/experiment.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"

using namespace metarisk;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// results.csv with the wall-clock column stripped from every line
std::string strip_wall(const std::string& csv) {
  std::string out;
  std::stringstream ss(csv);
  std::string line;
  while (std::getline(ss, line)) {
    auto cut = line.rfind(',');
    out += line.substr(0, cut);
    out += "\n";
  }
  return out;
}

ExperimentConfig tiny_config(const std::string& out) {
  ExperimentConfig cfg;
  cfg.kind = ExperimentKind::risk_compare;
  cfg.rho_spec = "ev";
  cfg.method = Method::learned;
  cfg.data.blobs_n = 200;
  cfg.data.blobs_test_n = 60;
  cfg.data.blobs_classes = 3;
  cfg.data.blobs_dim = 4;
  cfg.data.blobs_spread = 0.8;
  cfg.hidden = {6};
  cfg.trainer.total_steps = 30;
  cfg.trainer.batch_size_b = 10;
  cfg.trainer.inner_steps = 2;
  cfg.trainer.meta_val_batch = 8;
  cfg.trainer.early_stop_enabled = false;
  cfg.seeds = {1, 2};
  cfg.out_dir = out;
  return cfg;
}

}  // namespace

TEST_CASE("kv config files") {
  const char* text =
      "# comment\n"
      "[experiment]\n"
      "kind = label_noise\n"
      "rho = ev\n"
      "method = learned\n"
      "seeds = 1,2,3\n"
      "noise_fraction = 0.4\n"
      "out = runs/x\n"
      "[trainer]\n"
      "total_steps = 100  # trailing comment\n"
      "batch_size = 10\n";
  std::ofstream("kv_test.cfg") << text;
  auto kv = read_kv_file("kv_test.cfg");
  auto cfg = config_from_kv(kv);
  CHECK(cfg.kind == ExperimentKind::label_noise);
  CHECK(cfg.method == Method::learned);
  CHECK(cfg.seeds == std::vector<std::uint64_t>{1, 2, 3});
  CHECK(cfg.noise_fraction == 0.4);
  CHECK(cfg.trainer.total_steps == 100);
  CHECK(cfg.trainer.batch_size_b == 10);
  std::remove("kv_test.cfg");
}

TEST_CASE("config validation enumerates every violation") {
  KvPairs kv{{"experiment.kind", "nonsense"},
             {"experiment.noise_fraction", "1.7"},
             {"experiment.seeds", ""},
             {"bogus.key", "1"}};
  try {
    config_from_kv(kv);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    CHECK(msg.find("experiment.kind") != std::string::npos);
    CHECK(msg.find("noise_fraction") != std::string::npos);
    CHECK(msg.find("seeds") != std::string::npos);
    CHECK(msg.find("bogus.key") != std::string::npos);
  }

  // oracle outside label_noise
  ExperimentConfig cfg = tiny_config("x");
  cfg.method = Method::oracle;
  auto violations = cfg.validate();
  CHECK(!violations.empty());
}

TEST_CASE("grid expansion") {
  KvPairs kv{{"experiment.method", "ev,learned"},
             {"experiment.rho", "cvar:0.1"},
             {"experiment.seeds", "1,2"},
             {"trainer.total_steps", "50"}};
  auto matrix = expand_grid(kv);
  REQUIRE(matrix.size() == 2);  // only method fans out; seeds are a list
  CHECK(matrix[0][0].second == "ev");
  CHECK(matrix[1][0].second == "learned");
  for (const auto& kvs : matrix)
    for (const auto& [k, v] : kvs)
      if (k == "experiment.seeds") CHECK(v == "1,2");

  KvPairs two{{"experiment.method", "ev,learned"}, {"experiment.noise_fraction", "0,0.4"}};
  CHECK(expand_grid(two).size() == 4);
}

TEST_CASE("evaluate_all: ordering, reductions, determinism") {
  auto [pool, test] = gen_blobs_pair(3, 200, 80, 3, 4, 0.8);
  MlpSpec spec{{4, 6, 3}, 99};
  auto params = init_params(spec);

  auto r = evaluate_all(spec, params, test, RiskFunctional::parse("ev"));
  CHECK(r.icvar <= r.ev);
  CHECK(r.ev <= r.cvar);
  CHECK(r.risk_rho == r.ev);

  auto mv0 = evaluate_all(spec, params, test, RiskFunctional::parse("meanvar:0"));
  CHECK(mv0.risk_rho == mv0.ev);

  auto again = evaluate_all(spec, params, test, RiskFunctional::parse("ev"));
  CHECK(again.risk_rho == r.risk_rho);
  CHECK(again.cvar == r.cvar);
  CHECK(again.accuracy == r.accuracy);
}

TEST_CASE("compare_report") {
  auto row = [](const std::string& m, std::uint64_t seed, double risk, double acc) {
    ResultRow r;
    r.method = m;
    r.rho = "ev";
    r.seed = seed;
    r.steps = 10;
    r.report.risk_rho = risk;
    r.report.accuracy = acc;
    r.report.ev = risk;
    r.report.cvar = risk;
    r.report.icvar = risk;
    r.report.human = risk;
    r.report.meanvar = risk;
    r.report.trimmed = risk;
    return r;
  };

  SUBCASE("a single method is marked best; identical values have stddev 0") {
    std::vector<ResultRow> rows{row("ev", 1, 0.5, 0.9), row("ev", 2, 0.5, 0.9)};
    auto [csv, txt] = compare_report(rows);
    CHECK(csv.find("ev,risk_rho,0.5,0,1") != std::string::npos);
    CHECK(txt.find("*") != std::string::npos);
  }

  SUBCASE("ties within 1e-12 are both marked") {
    std::vector<ResultRow> rows{row("a", 1, 0.5, 0.9), row("b", 1, 0.5 + 1e-14, 0.9)};
    auto [csv, txt] = compare_report(rows);
    CHECK(csv.find("a,risk_rho,0.5,0,1") != std::string::npos);
    CHECK(csv.find("b,risk_rho,") != std::string::npos);
    // both best flags set for risk_rho
    std::size_t flags = 0, pos = 0;
    while ((pos = csv.find("risk_rho", pos)) != std::string::npos) {
      auto eol = csv.find('\n', pos);
      flags += csv.substr(pos, eol - pos).back() == '1';
      pos = eol;
    }
    CHECK(flags == 2);
  }

  SUBCASE("empty input is an error") {
    std::vector<ResultRow> none;
    CHECK_THROWS_AS(compare_report(none), ConfigError);
  }
}

TEST_CASE("results csv round-trip") {
  ResultRow ok;
  ok.method = "learned";
  ok.rho = "cvar:0.1";
  ok.seed = 3;
  ok.steps = 400;
  ok.report = {0.5, 0.9, 0.4, 1.2, 0.01, 0.6, 0.7, 0.3};
  ok.wall_seconds = 1.25;
  ResultRow bad;
  bad.method = "ev";
  bad.rho = "cvar:0.1";
  bad.seed = 4;
  bad.ok = false;

  auto text = results_csv(std::vector<ResultRow>{ok, bad});
  auto rows = parse_results_csv(text);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].method == "learned");
  CHECK(rows[0].report.cvar == 1.2);
  CHECK(rows[0].steps == 400);
  CHECK_FALSE(rows[1].ok);
}

TEST_CASE("run_experiment: artifacts, snapshots, determinism") {
  const std::string out1 = "exp_test_run1", out2 = "exp_test_run2";
  auto cfg1 = tiny_config(out1);
  auto res1 = run_experiment(cfg1);
  write_reports(out1, res1.rows);
  REQUIRE_FALSE(res1.any_failed());

  CHECK(fs::exists(fs::path(out1) / "results.csv"));
  CHECK(fs::exists(fs::path(out1) / "summary.csv"));
  CHECK(fs::exists(fs::path(out1) / "summary.txt"));
  CHECK(fs::exists(fs::path(out1) / "train_learned_1.csv"));
  CHECK(fs::exists(fs::path(out1) / "train_learned_2.csv"));

  // at least 7 snapshots whose weights sum to one
  for (int seed : {1, 2}) {
    auto phi = slurp(fs::path(out1) / ("phi_" + std::to_string(seed) + ".csv"));
    std::stringstream ss(phi);
    std::string line;
    std::getline(ss, line);  // header
    int rows = 0;
    while (std::getline(ss, line)) {
      ++rows;
      std::stringstream ls(line);
      std::string cell;
      std::getline(ls, cell, ',');  // step
      double sum = 0.0;
      std::vector<double> cells;
      while (std::getline(ls, cell, ',')) cells.push_back(std::stod(cell));
      for (std::size_t i = 0; i + 1 < cells.size(); ++i) sum += cells[i];  // last is entropy
      CHECK(std::fabs(sum - 1.0) <= 1e-9);
    }
    CHECK(rows >= 7);
  }

  // byte-identical artifacts on a re-run (wall-clock column aside)
  auto cfg2 = tiny_config(out2);
  auto res2 = run_experiment(cfg2);
  write_reports(out2, res2.rows);
  CHECK(strip_wall(slurp(fs::path(out1) / "results.csv")) ==
        strip_wall(slurp(fs::path(out2) / "results.csv")));
  CHECK(slurp(fs::path(out1) / "phi_1.csv") == slurp(fs::path(out2) / "phi_1.csv"));
  CHECK(slurp(fs::path(out1) / "phi_2.csv") == slurp(fs::path(out2) / "phi_2.csv"));
  CHECK(slurp(fs::path(out1) / "summary.csv") == slurp(fs::path(out2) / "summary.csv"));

  fs::remove_all(out1);
  fs::remove_all(out2);
}

TEST_CASE("run_experiment: frozen-uniform learned equals the ev baseline") {
  auto base = tiny_config("exp_test_eq_ev");
  base.method = Method::ev;
  auto ev = run_experiment(base);

  auto frozen = tiny_config("exp_test_eq_frozen");
  frozen.method = Method::learned;
  frozen.trainer.freeze_phi = true;
  auto lrn = run_experiment(frozen);

  REQUIRE_FALSE(ev.any_failed());
  REQUIRE_FALSE(lrn.any_failed());
  double mean_ev = 0, mean_frozen = 0;
  for (std::size_t i = 0; i < ev.rows.size(); ++i) {
    mean_ev += ev.rows[i].report.risk_rho;
    mean_frozen += lrn.rows[i].report.risk_rho;
  }
  mean_ev /= static_cast<double>(ev.rows.size());
  mean_frozen /= static_cast<double>(lrn.rows.size());
  CHECK(std::fabs(mean_ev - mean_frozen) <= 1e-9 * std::max(1.0, std::fabs(mean_ev)));

  fs::remove_all("exp_test_eq_ev");
  fs::remove_all("exp_test_eq_frozen");
}

TEST_CASE("run_experiment: oracle picks icvar at the measured clean fraction") {
  auto cfg = tiny_config("exp_test_oracle");
  cfg.kind = ExperimentKind::label_noise;
  cfg.method = Method::oracle;
  cfg.noise_fraction = 0.4;
  cfg.seeds = {1};
  auto res = run_experiment(cfg);
  REQUIRE_FALSE(res.any_failed());
  CHECK(res.rows[0].steps > 0);
  CHECK(fs::exists(fs::path("exp_test_oracle") / "train_oracle_1.csv"));
  fs::remove_all("exp_test_oracle");
}
