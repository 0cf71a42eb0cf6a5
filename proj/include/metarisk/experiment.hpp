#pragma once

#include <map>
#include <string>
#include <vector>

#include "metarisk/trainer.hpp"

namespace metarisk {

class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

enum class ExperimentKind { risk_compare, label_noise };
enum class Method { ev, batch_rho, batch_rho_warm, learned, oracle };

const char* method_name(Method m);
Method parse_method(const std::string& name);

struct DataSpec {
  enum class Source { blobs, idx };
  Source source = Source::blobs;

  // blobs (desk-scale defaults)
  std::uint64_t blobs_seed = 7;
  std::size_t blobs_n = 5000;
  std::size_t blobs_test_n = 1000;
  int blobs_classes = 10;
  int blobs_dim = 20;
  double blobs_spread = 1.2;

  // idx
  std::string idx_images, idx_labels, idx_test_images, idx_test_labels;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::risk_compare;
  std::string rho_spec = "ev";
  Method method = Method::ev;
  DataSpec data;
  std::vector<std::size_t> hidden{64, 64};  // widths between input and classes
  double noise_fraction = 0.0;
  bool clean_val = false;
  TrainerConfig trainer;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::string out_dir = "runs/out";

  /// Every violated field, empty when the config is valid.
  std::vector<std::string> validate() const;
};

// ---- flat key=value config files with [section] headers ----

using KvPairs = std::vector<std::pair<std::string, std::string>>;  // section.key -> value

KvPairs read_kv_file(const std::string& path);

/// Splits comma lists in grid-able keys into a run matrix (inherent lists,
/// experiment.seeds and model.hidden, are left alone).
std::vector<KvPairs> expand_grid(const KvPairs& kv);

/// Builds a config, throwing ConfigError that enumerates every bad field.
ExperimentConfig config_from_kv(const KvPairs& kv);

// ---- evaluation and reporting ----

struct RiskReport {
  double risk_rho = 0.0;  // risk under the experiment's rho
  double accuracy = 0.0;
  double ev = 0.0, cvar = 0.0, icvar = 0.0, human = 0.0, meanvar = 0.0, trimmed = 0.0;
};

/// Per-sample test losses computed once; every risk functional of the zoo is
/// then evaluated on that single loss vector, plus accuracy.
RiskReport evaluate_all(const MlpSpec& spec, std::span<const Tensor> params,
                        const LabeledDataset& test, const RiskFunctional& rho);

struct ResultRow {
  std::string method;
  std::string rho;
  std::uint64_t seed = 0;
  bool ok = true;
  long steps = 0;
  RiskReport report;
  double wall_seconds = 0.0;
  std::string error;  // failure note, not serialized into the csv
};

std::string results_csv(std::span<const ResultRow> rows);
std::vector<ResultRow> parse_results_csv(const std::string& text);

/// Per-method mean/stddev for every metric plus a best-method marker
/// (lowest risk, highest accuracy; ties within 1e-12 share the mark).
/// Returns {summary.csv contents, summary.txt rendering}.
std::pair<std::string, std::string> compare_report(std::span<const ResultRow> rows);

// ---- the run driver ----

struct RunResult {
  std::vector<ResultRow> rows;
  std::vector<std::string> errors;
  bool any_failed() const;
};

/// Executes one config: for each seed builds the data, trains the requested
/// method, and evaluates the whole risk zoo on the untouched test set.
/// Writes train_<method>_<seed>.csv and (learned) phi_<seed>.csv into
/// out_dir; seeds run concurrently. Row order is deterministic.
RunResult run_experiment(const ExperimentConfig& config);

/// Writes results.csv, summary.csv and summary.txt for accumulated rows.
void write_reports(const std::string& out_dir, std::span<const ResultRow> rows);

/// Snapshot marks {0, 1%, 5%, 10%, 25%, 50%, 100%} of total steps.
std::vector<long> snapshot_marks(long total_steps);

}  // namespace metarisk
