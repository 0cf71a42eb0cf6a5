#include "metarisk/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "metarisk/idx.hpp"

namespace metarisk {

namespace fs = std::filesystem;

const char* method_name(Method m) {
  switch (m) {
    case Method::ev: return "ev";
    case Method::batch_rho: return "batch_rho";
    case Method::batch_rho_warm: return "batch_rho_warm";
    case Method::learned: return "learned";
    case Method::oracle: return "oracle";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  for (Method m : {Method::ev, Method::batch_rho, Method::batch_rho_warm, Method::learned,
                   Method::oracle})
    if (name == method_name(m)) return m;
  throw ConfigError("unknown method '" + name + "'");
}

// ---- key=value files ----

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  return out;
}

bool parse_bool(const std::string& v, const std::string& key,
                std::vector<std::string>& errors) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  errors.push_back(key + ": expected true/false, got '" + v + "'");
  return false;
}

}  // namespace

KvPairs read_kv_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path);
  KvPairs kv;
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[' && line.back() == ']') {
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError(path + ":" + std::to_string(lineno) + ": empty key");
    kv.emplace_back(section.empty() ? key : section + "." + key, value);
  }
  return kv;
}

std::vector<KvPairs> expand_grid(const KvPairs& kv) {
  std::vector<KvPairs> matrix{{}};
  for (const auto& [key, value] : kv) {
    bool inherent_list = key == "experiment.seeds" || key == "model.hidden";
    auto parts = inherent_list ? std::vector<std::string>{value} : split_list(value);
    if (parts.empty()) parts.push_back("");
    std::vector<KvPairs> grown;
    grown.reserve(matrix.size() * parts.size());
    for (const auto& base : matrix)
      for (const auto& part : parts) {
        KvPairs next = base;
        next.emplace_back(key, part);
        grown.push_back(std::move(next));
      }
    matrix = std::move(grown);
  }
  return matrix;
}

ExperimentConfig config_from_kv(const KvPairs& kv) {
  ExperimentConfig cfg;
  std::vector<std::string> errors;

  auto num = [&](const std::string& key, const std::string& v, auto& slot) {
    try {
      std::size_t used = 0;
      double parsed = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      slot = static_cast<std::remove_reference_t<decltype(slot)>>(parsed);
    } catch (const std::exception&) {
      errors.push_back(key + ": expected a number, got '" + v + "'");
    }
  };

  for (const auto& [key, value] : kv) {
    if (key == "experiment.kind") {
      if (value == "risk_compare") cfg.kind = ExperimentKind::risk_compare;
      else if (value == "label_noise") cfg.kind = ExperimentKind::label_noise;
      else errors.push_back("experiment.kind: unknown kind '" + value + "'");
    } else if (key == "experiment.rho") {
      cfg.rho_spec = value;
    } else if (key == "experiment.method") {
      try {
        cfg.method = parse_method(value);
      } catch (const ConfigError& e) {
        errors.push_back(std::string("experiment.method: ") + e.what());
      }
    } else if (key == "experiment.seeds") {
      cfg.seeds.clear();
      for (const auto& s : split_list(value)) {
        std::uint64_t seed = 0;
        num("experiment.seeds", s, seed);
        cfg.seeds.push_back(seed);
      }
    } else if (key == "experiment.noise_fraction") {
      num(key, value, cfg.noise_fraction);
    } else if (key == "experiment.clean_val") {
      cfg.clean_val = parse_bool(value, key, errors);
    } else if (key == "experiment.out") {
      cfg.out_dir = value;
    } else if (key == "data.source") {
      if (value == "blobs") cfg.data.source = DataSpec::Source::blobs;
      else if (value == "idx") cfg.data.source = DataSpec::Source::idx;
      else errors.push_back("data.source: unknown source '" + value + "'");
    } else if (key == "data.blobs_seed") {
      num(key, value, cfg.data.blobs_seed);
    } else if (key == "data.blobs_n") {
      num(key, value, cfg.data.blobs_n);
    } else if (key == "data.blobs_test_n") {
      num(key, value, cfg.data.blobs_test_n);
    } else if (key == "data.blobs_classes") {
      num(key, value, cfg.data.blobs_classes);
    } else if (key == "data.blobs_dim") {
      num(key, value, cfg.data.blobs_dim);
    } else if (key == "data.blobs_spread") {
      num(key, value, cfg.data.blobs_spread);
    } else if (key == "data.idx_images") {
      cfg.data.idx_images = value;
    } else if (key == "data.idx_labels") {
      cfg.data.idx_labels = value;
    } else if (key == "data.idx_test_images") {
      cfg.data.idx_test_images = value;
    } else if (key == "data.idx_test_labels") {
      cfg.data.idx_test_labels = value;
    } else if (key == "model.hidden") {
      cfg.hidden.clear();
      if (!value.empty())
        for (const auto& s : split_list(value)) {
          std::size_t w = 0;
          num("model.hidden", s, w);
          cfg.hidden.push_back(w);
        }
    } else if (key == "trainer.total_steps") {
      num(key, value, cfg.trainer.total_steps);
    } else if (key == "trainer.batch_size") {
      num(key, value, cfg.trainer.batch_size_b);
    } else if (key == "trainer.inner_steps") {
      num(key, value, cfg.trainer.inner_steps);
    } else if (key == "trainer.meta_val_batch") {
      num(key, value, cfg.trainer.meta_val_batch);
    } else if (key == "trainer.start_lr") {
      num(key, value, cfg.trainer.schedule.start_lr);
    } else if (key == "trainer.max_lr") {
      num(key, value, cfg.trainer.schedule.max_lr);
    } else if (key == "trainer.final_lr") {
      num(key, value, cfg.trainer.schedule.final_lr);
    } else if (key == "trainer.warm_fraction") {
      num(key, value, cfg.trainer.schedule.warm_fraction);
    } else if (key == "trainer.momentum") {
      num(key, value, cfg.trainer.momentum);
    } else if (key == "trainer.weight_decay") {
      num(key, value, cfg.trainer.weight_decay);
    } else if (key == "trainer.outer_lr") {
      num(key, value, cfg.trainer.outer_adam.lr);
    } else if (key == "trainer.inner_lr") {
      if (value == "schedule") {
        cfg.trainer.inner_lr_from_schedule = true;
      } else {
        cfg.trainer.inner_lr_from_schedule = false;
        num(key, value, cfg.trainer.inner_lr_beta);
      }
    } else if (key == "trainer.warm_start_steps") {
      num(key, value, cfg.trainer.warm_start_steps);
    } else if (key == "trainer.patience_epochs") {
      num(key, value, cfg.trainer.early_stop_patience_epochs);
    } else if (key == "trainer.early_stop") {
      cfg.trainer.early_stop_enabled = parse_bool(value, key, errors);
    } else if (key == "trainer.fresh_inner_batches") {
      cfg.trainer.fresh_inner_batches = parse_bool(value, key, errors);
    } else if (key == "trainer.detach_phi_inner") {
      cfg.trainer.detach_phi_inner = parse_bool(value, key, errors);
    } else if (key == "trainer.freeze_phi") {
      cfg.trainer.freeze_phi = parse_bool(value, key, errors);
    } else {
      errors.push_back("unknown config key '" + key + "'");
    }
  }

  auto violations = cfg.validate();
  errors.insert(errors.end(), violations.begin(), violations.end());
  if (!errors.empty()) {
    std::string joined = "invalid config:";
    for (const auto& e : errors) joined += "\n  - " + e;
    throw ConfigError(joined);
  }
  return cfg;
}

std::vector<std::string> ExperimentConfig::validate() const {
  std::vector<std::string> errors;
  if (seeds.empty()) errors.push_back("experiment.seeds: at least one seed is required");
  try {
    RiskFunctional::parse(rho_spec);
  } catch (const RiskError& e) {
    errors.push_back(std::string("experiment.rho: ") + e.what());
  }
  if (noise_fraction < 0.0 || noise_fraction > 1.0)
    errors.push_back("experiment.noise_fraction: must lie in [0,1]");
  if (kind == ExperimentKind::risk_compare) {
    if (noise_fraction != 0.0)
      errors.push_back("experiment.noise_fraction: risk_compare runs on clean data");
    if (clean_val)
      errors.push_back("experiment.clean_val: only meaningful for label_noise");
    if (method == Method::oracle)
      errors.push_back("experiment.method: oracle is only valid for label_noise");
  }
  if (method == Method::oracle && noise_fraction == 0.0)
    errors.push_back("experiment.method: the oracle needs a noise fraction > 0");
  if (out_dir.empty()) errors.push_back("experiment.out: output directory is required");

  if (data.source == DataSpec::Source::blobs) {
    if (data.blobs_classes < 2 || data.blobs_dim < 1 || !(data.blobs_spread > 0.0) ||
        data.blobs_n < static_cast<std::size_t>(data.blobs_classes) ||
        data.blobs_test_n < static_cast<std::size_t>(data.blobs_classes))
      errors.push_back("data: blobs need n >= C >= 2, d >= 1, spread > 0");
    if (data.blobs_n / 20 * 18 < trainer.batch_size_b)
      errors.push_back("data.blobs_n: train split smaller than one batch");
  } else {
    if (data.idx_images.empty() || data.idx_labels.empty() ||
        data.idx_test_images.empty() || data.idx_test_labels.empty())
      errors.push_back("data: idx source needs all four file paths");
  }

  try {
    trainer.validate();
  } catch (const TrainingError& e) {
    errors.push_back(std::string("trainer: ") + e.what());
  }
  return errors;
}

// ---- evaluation ----

RiskReport evaluate_all(const MlpSpec& spec, std::span<const Tensor> params,
                        const LabeledDataset& test, const RiskFunctional& rho) {
  Tensor logits = mlp_forward_value(spec, params, test.features);
  std::vector<double> losses = cross_entropy_per_sample(logits, test.labels);

  double alpha = (rho.kind == RiskKind::cvar || rho.kind == RiskKind::icvar) ? rho.alpha : 0.1;
  double talpha = rho.kind == RiskKind::trimmed ? rho.alpha : 0.1;
  RiskFunctional human;
  human.kind = RiskKind::human_aligned;
  if (rho.kind == RiskKind::human_aligned) human = rho;

  RiskReport r;
  r.accuracy = accuracy(logits, test.labels);
  r.risk_rho = eval_risk(rho, losses);
  r.ev = expected_value(losses);
  r.cvar = cvar(losses, alpha);
  r.icvar = icvar(losses, alpha);
  r.human = eval_risk(human, losses);
  r.meanvar = mean_variance(losses, rho.kind == RiskKind::mean_variance ? rho.c : 1.0);
  r.trimmed = trimmed(losses, talpha);
  return r;
}

// ---- result rows and reports ----

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

constexpr const char* kResultsHeader =
    "method,rho,seed,status,steps,risk_rho,accuracy,risk_ev,risk_cvar,risk_icvar,"
    "risk_human,risk_meanvar,risk_trimmed,wall_seconds";

struct Metric {
  const char* name;
  bool maximize;
  double RiskReport::*field;
};

constexpr Metric kMetrics[] = {
    {"risk_rho", false, &RiskReport::risk_rho},
    {"accuracy", true, &RiskReport::accuracy},
    {"risk_ev", false, &RiskReport::ev},
    {"risk_cvar", false, &RiskReport::cvar},
    {"risk_icvar", false, &RiskReport::icvar},
    {"risk_human", false, &RiskReport::human},
    {"risk_meanvar", false, &RiskReport::meanvar},
    {"risk_trimmed", false, &RiskReport::trimmed},
};

}  // namespace

std::string results_csv(std::span<const ResultRow> rows) {
  std::string out = std::string(kResultsHeader) + "\n";
  for (const auto& r : rows) {
    out += r.method + "," + r.rho + "," + std::to_string(r.seed) + ",";
    if (r.ok) {
      out += "ok," + std::to_string(r.steps);
      for (const auto& m : kMetrics) out += "," + fmt(r.report.*(m.field));
    } else {
      out += "failed," + std::to_string(r.steps) + ",,,,,,,,";
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, ",%.3f", r.wall_seconds);
    out += buf;
    out += "\n";
  }
  return out;
}

std::vector<ResultRow> parse_results_csv(const std::string& text) {
  std::vector<ResultRow> rows;
  std::stringstream ss(text);
  std::string line;
  if (!std::getline(ss, line) || line != kResultsHeader)
    throw ConfigError("results.csv: unexpected header");
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    f.resize(14);
    ResultRow r;
    r.method = f[0];
    r.rho = f[1];
    r.seed = std::stoull(f[2]);
    r.ok = f[3] == "ok";
    r.steps = std::stol(f[4]);
    if (r.ok) {
      double* slots[] = {&r.report.risk_rho, &r.report.accuracy, &r.report.ev,
                         &r.report.cvar,     &r.report.icvar,    &r.report.human,
                         &r.report.meanvar,  &r.report.trimmed};
      for (int i = 0; i < 8; ++i) *slots[i] = std::stod(f[5 + static_cast<std::size_t>(i)]);
    }
    if (!f[13].empty()) r.wall_seconds = std::stod(f[13]);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::pair<std::string, std::string> compare_report(std::span<const ResultRow> rows) {
  std::vector<std::string> methods;
  for (const auto& r : rows)
    if (r.ok && std::find(methods.begin(), methods.end(), r.method) == methods.end())
      methods.push_back(r.method);
  if (methods.empty()) throw ConfigError("compare_report: no successful rows");

  struct Stat {
    double mean = 0.0, stddev = 0.0;
  };
  std::map<std::string, std::map<std::string, Stat>> stats;  // metric -> method
  for (const auto& m : kMetrics) {
    for (const auto& method : methods) {
      std::vector<double> vals;
      for (const auto& r : rows)
        if (r.ok && r.method == method) vals.push_back(r.report.*(m.field));
      Stat s;
      for (double v : vals) s.mean += v;
      s.mean /= static_cast<double>(vals.size());
      if (vals.size() > 1) {
        double acc = 0.0;
        for (double v : vals) acc += (v - s.mean) * (v - s.mean);
        s.stddev = std::sqrt(acc / static_cast<double>(vals.size() - 1));
      }
      stats[m.name][method] = s;
    }
  }

  auto best_of = [&](const Metric& m) {
    double best = m.maximize ? -1e300 : 1e300;
    for (const auto& method : methods) {
      double v = stats[m.name][method].mean;
      if (m.maximize ? v > best : v < best) best = v;
    }
    return best;
  };

  std::string csv = "method,metric,mean,stddev,best\n";
  for (const auto& method : methods)
    for (const auto& m : kMetrics) {
      const Stat& s = stats[m.name][method];
      bool best = std::fabs(s.mean - best_of(m)) <= 1e-12;
      csv += method + "," + m.name + "," + fmt(s.mean) + "," + fmt(s.stddev) + "," +
             (best ? "1" : "0") + "\n";
    }

  // aligned text table, metrics down, methods across; '*' marks the best
  std::string txt;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-14s", "metric");
  txt += buf;
  for (const auto& method : methods) {
    std::snprintf(buf, sizeof buf, " %-22s", method.c_str());
    txt += buf;
  }
  txt += "\n";
  for (const auto& m : kMetrics) {
    std::snprintf(buf, sizeof buf, "%-14s", m.name);
    txt += buf;
    for (const auto& method : methods) {
      const Stat& s = stats[m.name][method];
      bool best = std::fabs(s.mean - best_of(m)) <= 1e-12;
      char cell[48];
      std::snprintf(cell, sizeof cell, "%.6g (%.3g)%s", s.mean, s.stddev,
                    best ? " *" : "");
      std::snprintf(buf, sizeof buf, " %-22s", cell);
      txt += buf;
    }
    txt += "\n";
  }
  return {csv, txt};
}

// ---- run driver ----

std::vector<long> snapshot_marks(long total_steps) {
  // duplicates stay so that every run emits all seven snapshots
  std::vector<long> marks{0};
  for (double pct : {0.01, 0.05, 0.10, 0.25, 0.50, 1.0})
    marks.push_back(std::lround(pct * static_cast<double>(total_steps)));
  std::sort(marks.begin(), marks.end());
  return marks;
}

bool RunResult::any_failed() const {
  for (const auto& r : rows)
    if (!r.ok) return true;
  return false;
}

namespace {

std::pair<LabeledDataset, LabeledDataset> build_data(const DataSpec& data) {
  if (data.source == DataSpec::Source::blobs)
    return gen_blobs_pair(data.blobs_seed, data.blobs_n, data.blobs_test_n,
                          data.blobs_classes, data.blobs_dim, data.blobs_spread);
  return {load_idx(data.idx_images, data.idx_labels),
          load_idx(data.idx_test_images, data.idx_test_labels)};
}

void write_file(const fs::path& path, const std::string& contents) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write " + path.string());
  f << contents;
}

ResultRow run_one_seed(const ExperimentConfig& cfg, const LabeledDataset& pool,
                       const LabeledDataset& test, std::uint64_t seed) {
  ResultRow row;
  row.method = method_name(cfg.method);
  row.rho = cfg.rho_spec;
  row.seed = seed;
  auto t0 = std::chrono::steady_clock::now();

  try {
    RiskFunctional rho = RiskFunctional::parse(cfg.rho_spec);

    SplitSet splits;
    if (cfg.kind == ExperimentKind::label_noise && cfg.noise_fraction > 0.0 &&
        !cfg.clean_val) {
      // noise precedes splitting: the validation split is as dirty as train
      auto noisy = inject_label_noise(pool, cfg.noise_fraction, mix_seed(seed, "noise"));
      splits = split_90_5_5(noisy, test, mix_seed(seed, "split"));
    } else if (cfg.kind == ExperimentKind::label_noise && cfg.noise_fraction > 0.0) {
      // clean validation: only the train partition is corrupted
      splits = split_90_5_5(pool, test, mix_seed(seed, "split"));
      splits.train = inject_label_noise(splits.train, cfg.noise_fraction,
                                        mix_seed(seed, "noise"));
    } else {
      splits = split_90_5_5(pool, test, mix_seed(seed, "split"));
    }

    MlpSpec spec;
    spec.layer_widths.push_back(pool.dim());
    for (std::size_t w : cfg.hidden) spec.layer_widths.push_back(w);
    spec.layer_widths.push_back(static_cast<std::size_t>(pool.num_classes));

    TrainerConfig tc = cfg.trainer;
    tc.seed = seed;

    TrainOutcome out;
    switch (cfg.method) {
      case Method::ev:
        out = train_fixed_rho(spec, tc, RiskFunctional{}, splits.train, splits.val);
        break;
      case Method::batch_rho:
        out = train_fixed_rho(spec, tc, rho, splits.train, splits.val);
        break;
      case Method::batch_rho_warm: {
        TrainerConfig warm = tc;
        if (warm.warm_start_steps == 0) warm.warm_start_steps = tc.total_steps / 2;
        out = warm_start_then(spec, warm, Objective::fixed(rho), splits.train, splits.val);
        break;
      }
      case Method::learned:
        out = train_learned(spec, tc, rho, splits.train, splits.val,
                            snapshot_marks(tc.total_steps));
        break;
      case Method::oracle: {
        // warm-started ICVaR at the measured clean fraction of the train split
        double clean = 1.0 - static_cast<double>(splits.train.flipped_count()) /
                                 static_cast<double>(splits.train.size());
        RiskFunctional icvar_rho;
        icvar_rho.kind = RiskKind::icvar;
        icvar_rho.alpha = std::min(clean, 1.0 - 1e-9);
        TrainerConfig warm = tc;
        if (warm.warm_start_steps == 0) warm.warm_start_steps = tc.total_steps / 2;
        out = warm_start_then(spec, warm, Objective::fixed(icvar_rho), splits.train,
                              splits.val);
        break;
      }
    }

    row.steps = out.steps_run;
    row.report = evaluate_all(spec, out.params, test, rho);

    fs::path dir(cfg.out_dir);
    write_file(dir / ("train_" + row.method + "_" + std::to_string(seed) + ".csv"),
               records_csv(out.records));
    if (cfg.method == Method::learned)
      write_file(dir / ("phi_" + std::to_string(seed) + ".csv"),
                 snapshots_csv(out.snapshots));
  } catch (const std::exception& e) {
    row.ok = false;
    row.error = e.what();
  }

  row.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return row;
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& config) {
  auto violations = config.validate();
  if (!violations.empty()) {
    std::string joined = "invalid config:";
    for (const auto& v : violations) joined += "\n  - " + v;
    throw ConfigError(joined);
  }
  fs::create_directories(config.out_dir);

  auto [pool, test] = build_data(config.data);

  RunResult result;
  result.rows.resize(config.seeds.size());
  unsigned hw = std::thread::hardware_concurrency();
  std::size_t workers = std::min<std::size_t>(config.seeds.size(), hw ? hw : 2);

  std::atomic<std::size_t> cursor{0};
  auto work = [&] {
    for (std::size_t i = cursor.fetch_add(1); i < config.seeds.size();
         i = cursor.fetch_add(1))
      result.rows[i] = run_one_seed(config, pool, test, config.seeds[i]);
  };
  std::vector<std::thread> threads;
  for (std::size_t w = 1; w < workers; ++w) threads.emplace_back(work);
  work();
  for (auto& t : threads) t.join();

  for (const auto& r : result.rows)
    if (!r.ok)
      result.errors.push_back(r.method + " seed " + std::to_string(r.seed) + ": " +
                              r.error);
  return result;
}

void write_reports(const std::string& out_dir, std::span<const ResultRow> rows) {
  std::vector<ResultRow> sorted(rows.begin(), rows.end());
  std::sort(sorted.begin(), sorted.end(), [](const ResultRow& a, const ResultRow& b) {
    if (a.method != b.method) return a.method < b.method;
    if (a.rho != b.rho) return a.rho < b.rho;
    return a.seed < b.seed;
  });
  fs::path dir(out_dir);
  fs::create_directories(dir);
  write_file(dir / "results.csv", results_csv(sorted));
  bool any_ok = false;
  for (const auto& r : sorted) any_ok |= r.ok;
  if (any_ok) {
    auto [csv, txt] = compare_report(sorted);
    write_file(dir / "summary.csv", csv);
    write_file(dir / "summary.txt", txt);
  }
}

}  // namespace metarisk
