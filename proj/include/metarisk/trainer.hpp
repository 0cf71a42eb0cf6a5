#pragma once

#include <functional>
#include <optional>
#include <span>

#include "metarisk/data.hpp"
#include "metarisk/model.hpp"
#include "metarisk/risk.hpp"
#include "metarisk/risk_head.hpp"

namespace metarisk {

class TrainingError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// ---- schedules and optimizers ----

struct OneCycleParams {
  double start_lr = 0.005;
  double max_lr = 0.1;
  double final_lr = 5e-6;
  double warm_fraction = 0.3;
};

/// Linear ramp start->max over the first warm_fraction of steps, then cosine
/// anneal max->final; continuous at the junction. step must lie in [0, total].
double one_cycle_lr(long step, const OneCycleParams& sched, long total_steps);

struct AdamParams {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m, v;
  long t = 0;
};

void adam_update(PhiParams& phi, const Tensor& grad, AdamState& state,
                 const AdamParams& params);

// ---- configuration ----

struct TrainerConfig {
  long total_steps = 4000;
  std::size_t batch_size_b = 32;
  int inner_steps = 5;
  std::size_t meta_val_batch = 256;

  OneCycleParams schedule;
  double momentum = 0.9;
  double weight_decay = 5e-4;

  AdamParams outer_adam;            // eta = outer_adam.lr
  double inner_lr_beta = 0.0;       // used when inner_lr_from_schedule is off
  bool inner_lr_from_schedule = true;

  long warm_start_steps = 0;
  int early_stop_patience_epochs = 5;
  bool early_stop_enabled = true;

  bool fresh_inner_batches = true;  // draw a new train batch per inner step
  bool detach_phi_inner = false;    // sever the phi path inside inner steps
  bool freeze_phi = false;          // keep phi at init; skips the meta phase

  std::uint64_t seed = 0;

  void validate() const;
};

// ---- Algorithm-1 building blocks ----

/// Builds the per-sample loss vector of a batch under the given parameters.
using LossVectorFn =
    std::function<ad::Value(ad::Tape&, std::span<const ad::Value>, const Batch&)>;

/// Forward-through-cross-entropy loss builder for an MLP.
LossVectorFn mlp_ce_loss(const MlpSpec& spec);

struct InnerAdaptResult {
  std::vector<ad::Value> theta_prime;
  BoundHead head;  // the phi binding every inner step went through
};

/// Differentiable inner adaptation: k SGD steps of the head-weighted batch
/// risk, starting from theta. The returned theta' stays connected to phi, so
/// the outer step can differentiate through the whole unroll. Gradients are
/// taken with respect to theta' only; nothing accumulates on phi here.
InnerAdaptResult inner_adapt(ad::Tape& tape, const LossVectorFn& loss_fn,
                             std::span<const Tensor> theta, const PhiParams& phi,
                             std::span<const Batch> batches,
                             std::span<const double> betas,
                             bool detach_phi_inner = false);

/// Gradient of rho(losses of the adapted model on the validation batch) with
/// respect to phi, flowing only through theta'. With expect_path set, a
/// severed graph is a hard error rather than a zero gradient.
Tensor outer_phi_grad(const LossVectorFn& loss_fn, const InnerAdaptResult& adapted,
                      const Batch& val_batch, const RiskFunctional& rho,
                      bool expect_path = true);

/// outer_phi_grad followed by one Adam update of phi. Returns the gradient.
Tensor outer_step(PhiParams& phi, const LossVectorFn& loss_fn,
                  const InnerAdaptResult& adapted, const Batch& val_batch,
                  const RiskFunctional& rho, AdamState& state, const AdamParams& params,
                  bool expect_path = true);

// ---- records and early stopping ----

struct TrainRecord {
  long step = 0;
  double train_risk = 0.0;
  double val_risk = 0.0;
  double lr = 0.0;
  double phi_entropy = 0.0;
  bool has_phi = false;
};

/// CSV stream `step,train_risk,val_risk,lr,phi_entropy`; the last column is
/// empty for runs without a learned head.
std::string records_csv(std::span<const TrainRecord> records);

/// True when the metric series over epoch boundaries has gone `patience`
/// consecutive boundaries without a new best.
bool early_stop(std::span<const double> epoch_metrics, int patience);

// ---- the trainer ----

enum class ObjectiveKind { fixed_rho, learned };

struct Objective {
  ObjectiveKind kind = ObjectiveKind::fixed_rho;
  RiskFunctional rho;  // the batch risk (fixed) or the meta-level risk (learned)

  static Objective fixed(RiskFunctional r) { return {ObjectiveKind::fixed_rho, std::move(r)}; }
  static Objective learned(RiskFunctional r) { return {ObjectiveKind::learned, std::move(r)}; }
};

/// One training run: plain rho-batch SGD or the full Algorithm-1 loop,
/// depending on the objective. Strictly sequential; owns its tape and rng
/// streams, so distinct runs can execute on distinct threads.
///
/// Per step the learned mode consumes, in order: the inner train batches,
/// one meta-validation batch, then the real-update train batch. The test
/// split never enters here; the trainer only ever sees train and val.
class Trainer {
public:
  Trainer(MlpSpec spec, TrainerConfig config, Objective objective,
          const LabeledDataset& train, const LabeledDataset& val,
          std::vector<Tensor> initial_params = {});

  /// One full while-loop body of the training loop (meta phase when
  /// learning, then the real theta update); appends a TrainRecord.
  void step();

  /// Runs until total_steps or early stop. Snapshot marks (for the learned
  /// head) are taken at the given completed-step counts; marks past an early
  /// stop collapse onto the final step.
  void run(std::span<const long> snapshot_marks = {});

  long steps_run() const { return step_; }
  long steps_per_epoch() const { return steps_per_epoch_; }
  const std::vector<Tensor>& params() const { return params_; }
  const PhiParams& phi() const { return phi_; }
  const std::vector<TrainRecord>& records() const { return records_; }
  const std::vector<WeightSnapshot>& snapshots() const { return snapshots_; }
  const MlpSpec& spec() const { return spec_; }

private:
  double current_lr() const;
  double real_update(const Batch& batch, double lr);
  double validation_risk() const;

  MlpSpec spec_;
  TrainerConfig config_;
  Objective objective_;
  const LabeledDataset& train_;
  const LabeledDataset& val_;

  ad::Tape tape_;
  LossVectorFn loss_fn_;
  std::vector<Tensor> params_;
  std::vector<Tensor> velocity_;
  PhiParams phi_;
  AdamState adam_;
  BatchSampler train_sampler_;
  BatchSampler val_sampler_;

  long step_ = 0;
  long steps_per_epoch_ = 0;
  std::vector<TrainRecord> records_;
  std::vector<WeightSnapshot> snapshots_;
};

struct TrainOutcome {
  std::vector<Tensor> params;
  PhiParams phi;
  std::vector<TrainRecord> records;
  std::vector<WeightSnapshot> snapshots;
  long steps_run = 0;
};

/// Standard mini-batch SGD on rho applied per batch.
TrainOutcome train_fixed_rho(const MlpSpec& spec, const TrainerConfig& config,
                             const RiskFunctional& rho, const LabeledDataset& train,
                             const LabeledDataset& val);

/// Full Algorithm-1 run with the learned head and meta-level rho.
TrainOutcome train_learned(const MlpSpec& spec, const TrainerConfig& config,
                           const RiskFunctional& rho, const LabeledDataset& train,
                           const LabeledDataset& val,
                           std::span<const long> snapshot_marks = {});

/// Expected-value phase over warm_start_steps with its own full one-cycle
/// schedule, then the target objective over the remaining steps with a fresh
/// schedule. Records continue the global step numbering.
TrainOutcome warm_start_then(const MlpSpec& spec, const TrainerConfig& config,
                             const Objective& target, const LabeledDataset& train,
                             const LabeledDataset& val,
                             std::span<const long> snapshot_marks = {});

}  // namespace metarisk
