// Command-line front end: runs experiment configs, regenerates reports, and
// executes the oracle/invariant self-test suite.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "metarisk/experiment.hpp"
#include "metarisk/selftest.hpp"

namespace fs = std::filesystem;
using namespace metarisk;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitBadConfig = 2;
constexpr int kExitPartialFailure = 3;

std::vector<std::uint64_t> parse_seed_list(const std::string& list) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(list);
  std::string cell;
  while (std::getline(ss, cell, ',')) seeds.push_back(std::stoull(cell));
  return seeds;
}

int cmd_run(const std::string& config_path, bool grid, const std::string& out_override,
            const std::string& seeds_override) {
  std::vector<ExperimentConfig> configs;
  try {
    KvPairs kv = read_kv_file(config_path);
    std::vector<KvPairs> matrix = grid ? expand_grid(kv) : std::vector<KvPairs>{kv};
    for (const auto& entry : matrix) {
      ExperimentConfig cfg = config_from_kv(entry);
      if (!out_override.empty()) cfg.out_dir = out_override;
      if (!seeds_override.empty()) cfg.seeds = parse_seed_list(seeds_override);
      auto violations = cfg.validate();
      if (!violations.empty()) {
        std::string msg = "invalid config:";
        for (const auto& v : violations) msg += "\n  - " + v;
        throw ConfigError(msg);
      }
      configs.push_back(std::move(cfg));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBadConfig;
  }

  std::vector<ResultRow> all_rows;
  bool any_failed = false;
  for (const auto& cfg : configs) {
    std::cout << "running " << method_name(cfg.method) << " (rho=" << cfg.rho_spec
              << ", " << cfg.seeds.size() << " seeds) -> " << cfg.out_dir << "\n";
    RunResult result = run_experiment(cfg);
    for (const auto& err : result.errors) std::cerr << "  failed: " << err << "\n";
    any_failed |= result.any_failed();
    all_rows.insert(all_rows.end(), result.rows.begin(), result.rows.end());
  }

  write_reports(configs.front().out_dir, all_rows);
  std::cout << "wrote " << (fs::path(configs.front().out_dir) / "results.csv").string()
            << "\n";
  return any_failed ? kExitPartialFailure : kExitOk;
}

int cmd_report(const std::string& dir) {
  try {
    std::ifstream f(fs::path(dir) / "results.csv", std::ios::binary);
    if (!f) throw ConfigError("no results.csv under " + dir);
    std::stringstream ss;
    ss << f.rdbuf();
    auto rows = parse_results_csv(ss.str());
    write_reports(dir, rows);
    std::ifstream txt(fs::path(dir) / "summary.txt");
    std::cout << txt.rdbuf();
    return kExitOk;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBadConfig;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"meta-learned mini-batch risk functionals: experiment runner"};
  app.require_subcommand(1);

  std::string config_path, out_override, seeds_override, report_dir;
  bool grid = false;

  auto* run = app.add_subcommand("run", "run an experiment config");
  run->add_option("config", config_path, "key=value config file")->required();
  run->add_flag("--grid", grid, "expand comma-separated values into a run matrix");
  run->add_option("--out", out_override, "override the output directory");
  run->add_option("--seeds", seeds_override, "override the seed list, e.g. 1,2,3");

  auto* report = app.add_subcommand("report", "regenerate summaries for a run directory");
  report->add_option("dir", report_dir, "directory holding results.csv")->required();

  auto* check = app.add_subcommand("check", "run the oracle/invariant self-test suite");

  CLI11_PARSE(app, argc, argv);

  if (run->parsed()) return cmd_run(config_path, grid, out_override, seeds_override);
  if (report->parsed()) return cmd_report(report_dir);
  if (check->parsed()) return run_selftest(std::cout) == 0 ? kExitOk : 1;
  return kExitOk;
}
