#include "metarisk/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace metarisk {

double one_cycle_lr(long step, const OneCycleParams& sched, long total_steps) {
  if (step < 0 || step > total_steps)
    throw TrainingError("one_cycle_lr: step " + std::to_string(step) +
                        " outside [0," + std::to_string(total_steps) + "]");
  long warm = std::lround(sched.warm_fraction * static_cast<double>(total_steps));
  if (step < warm) {
    double t = static_cast<double>(step) / static_cast<double>(warm);
    return sched.start_lr + (sched.max_lr - sched.start_lr) * t;
  }
  if (total_steps == warm) return sched.max_lr;
  double t = static_cast<double>(step - warm) / static_cast<double>(total_steps - warm);
  return sched.final_lr +
         (sched.max_lr - sched.final_lr) * 0.5 * (1.0 + std::cos(M_PI * t));
}

void adam_update(PhiParams& phi, const Tensor& grad, AdamState& state,
                 const AdamParams& p) {
  std::size_t n = phi.logits.size();
  if (grad.numel() != n)
    throw TrainingError("adam_update: gradient length does not match phi");
  if (state.m.empty()) {
    state.m.assign(n, 0.0);
    state.v.assign(n, 0.0);
  }
  state.t += 1;
  double bc1 = 1.0 - std::pow(p.beta1, static_cast<double>(state.t));
  double bc2 = 1.0 - std::pow(p.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < n; ++i) {
    double g = grad[i];
    state.m[i] = p.beta1 * state.m[i] + (1.0 - p.beta1) * g;
    state.v[i] = p.beta2 * state.v[i] + (1.0 - p.beta2) * g * g;
    double mhat = state.m[i] / bc1;
    double vhat = state.v[i] / bc2;
    phi.logits[i] -= p.lr * mhat / (std::sqrt(vhat) + p.eps);
  }
}

void TrainerConfig::validate() const {
  if (total_steps < 1) throw TrainingError("config: total_steps must be positive");
  if (batch_size_b < 1) throw TrainingError("config: batch size must be positive");
  if (inner_steps < 1) throw TrainingError("config: inner_steps must be positive");
  if (meta_val_batch < 1) throw TrainingError("config: meta_val_batch must be positive");
  if (warm_start_steps < 0 || warm_start_steps > total_steps)
    throw TrainingError("config: warm_start_steps must lie in [0, total_steps]");
  if (early_stop_patience_epochs < 1)
    throw TrainingError("config: early-stop patience must be positive");
  if (!(schedule.start_lr > 0) || !(schedule.max_lr > 0) || !(schedule.final_lr > 0))
    throw TrainingError("config: schedule rates must be positive");
  if (schedule.warm_fraction < 0 || schedule.warm_fraction > 1)
    throw TrainingError("config: warm_fraction must lie in [0,1]");
  if (!(outer_adam.lr > 0)) throw TrainingError("config: outer learning rate must be positive");
  if (!inner_lr_from_schedule && !(inner_lr_beta > 0))
    throw TrainingError("config: inner_lr_beta must be positive when not tied to the schedule");
  if (momentum < 0 || momentum >= 1) throw TrainingError("config: momentum must lie in [0,1)");
  if (weight_decay < 0) throw TrainingError("config: weight decay must be nonnegative");
}

LossVectorFn mlp_ce_loss(const MlpSpec& spec) {
  return [spec](ad::Tape& tape, std::span<const ad::Value> theta, const Batch& batch) {
    return cross_entropy_per_sample(mlp_forward(tape, spec, theta, batch.X), batch.y);
  };
}

namespace {

void check_finite_losses(const Tensor& losses, long step, const char* where) {
  if (losses.all_finite()) return;
  double lo = losses[0], hi = losses[0], s = 0.0;
  for (std::size_t i = 0; i < losses.numel(); ++i) {
    lo = std::min(lo, losses[i]);
    hi = std::max(hi, losses[i]);
    s += losses[i];
  }
  char buf[160];
  std::snprintf(buf, sizeof buf,
                "%s: non-finite batch loss at step %ld (min=%g max=%g mean=%g)", where,
                step, lo, hi, s / static_cast<double>(losses.numel()));
  throw TrainingError(buf);
}

}  // namespace

InnerAdaptResult inner_adapt(ad::Tape& tape, const LossVectorFn& loss_fn,
                             std::span<const Tensor> theta, const PhiParams& phi,
                             std::span<const Batch> batches,
                             std::span<const double> betas, bool detach_phi_inner) {
  if (batches.empty() || batches.size() != betas.size())
    throw TrainingError("inner_adapt: need k >= 1 batches with matching step sizes");

  InnerAdaptResult res;
  res.head = bind_head(tape, phi, /*requires_grad=*/true, detach_phi_inner);
  res.theta_prime = bind_params(tape, theta, /*requires_grad=*/true);

  for (std::size_t k = 0; k < batches.size(); ++k) {
    ad::Value losses = loss_fn(tape, res.theta_prime, batches[k]);
    check_finite_losses(losses.value(), static_cast<long>(k), "inner_adapt");
    ad::Value risk = apply_head(res.head, losses);
    auto grads = ad::backward(risk, res.theta_prime, /*create_graph=*/true);
    for (std::size_t p = 0; p < res.theta_prime.size(); ++p)
      res.theta_prime[p] = ad::sub(res.theta_prime[p], ad::smul(grads[p], betas[k]));
  }
  return res;
}

Tensor outer_phi_grad(const LossVectorFn& loss_fn, const InnerAdaptResult& adapted,
                      const Batch& val_batch, const RiskFunctional& rho,
                      bool expect_path) {
  ad::Tape& tape = *adapted.head.phi.node()->tape;
  ad::Value losses = loss_fn(tape, adapted.theta_prime, val_batch);
  check_finite_losses(losses.value(), -1, "outer_step");
  ad::Value risk = eval_risk(rho, losses);
  if (expect_path && !ad::has_grad_path(risk, adapted.head.phi))
    throw TrainingError(
        "outer_step: no gradient path from the validation risk back to phi; "
        "the inner-step graph was severed");
  return ad::backward(risk, {adapted.head.phi})[0].value();
}

Tensor outer_step(PhiParams& phi, const LossVectorFn& loss_fn,
                  const InnerAdaptResult& adapted, const Batch& val_batch,
                  const RiskFunctional& rho, AdamState& state, const AdamParams& params,
                  bool expect_path) {
  Tensor g = outer_phi_grad(loss_fn, adapted, val_batch, rho, expect_path);
  adam_update(phi, g, state, params);
  return g;
}

std::string records_csv(std::span<const TrainRecord> records) {
  std::string out = "step,train_risk,val_risk,lr,phi_entropy\n";
  char buf[128];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%ld,%.17g,%.17g,%.17g,", r.step, r.train_risk,
                  r.val_risk, r.lr);
    out += buf;
    if (r.has_phi) {
      std::snprintf(buf, sizeof buf, "%.17g", r.phi_entropy);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

bool early_stop(std::span<const double> epoch_metrics, int patience) {
  if (epoch_metrics.empty()) throw TrainingError("early_stop: no epoch metrics yet");
  double best = epoch_metrics[0];
  int since_best = 0;
  for (std::size_t i = 1; i < epoch_metrics.size(); ++i) {
    if (epoch_metrics[i] < best) {
      best = epoch_metrics[i];
      since_best = 0;
    } else {
      ++since_best;
    }
  }
  return since_best >= patience;
}

Trainer::Trainer(MlpSpec spec, TrainerConfig config, Objective objective,
                 const LabeledDataset& train, const LabeledDataset& val,
                 std::vector<Tensor> initial_params)
    : spec_(std::move(spec)),
      config_(std::move(config)),
      objective_(std::move(objective)),
      train_(train),
      val_(val),
      loss_fn_(mlp_ce_loss(spec_)),
      phi_(init_phi(config_.batch_size_b)),
      train_sampler_(train, config_.batch_size_b, mix_seed(config_.seed, "train-batches")),
      val_sampler_(val, config_.meta_val_batch, mix_seed(config_.seed, "val-batches"),
                   /*with_replacement=*/val.size() < config_.meta_val_batch) {
  config_.validate();
  spec_.validate();
  objective_.rho.validate_params();
  if (train_.dim() != spec_.input_dim() || train_.num_classes > static_cast<int>(spec_.num_classes()))
    throw TrainingError("trainer: dataset does not match the model spec");
  steps_per_epoch_ = static_cast<long>(train_.size() / config_.batch_size_b);
  if (steps_per_epoch_ < 1)
    throw TrainingError("trainer: batch size exceeds the training split");

  if (initial_params.empty()) {
    MlpSpec seeded = spec_;
    seeded.init_seed = mix_seed(config_.seed, "init");
    params_ = init_params(seeded);
  } else {
    if (initial_params.size() != 2 * spec_.num_layers())
      throw TrainingError("trainer: initial parameter count does not match the spec");
    params_ = std::move(initial_params);
  }
  for (const Tensor& p : params_) velocity_.push_back(Tensor(p.shape()));
}

double Trainer::current_lr() const {
  return one_cycle_lr(step_, config_.schedule, config_.total_steps);
}

double Trainer::real_update(const Batch& batch, double lr) {
  auto leaves = bind_params(tape_, params_, /*requires_grad=*/true);
  ad::Value losses = loss_fn_(tape_, leaves, batch);
  check_finite_losses(losses.value(), step_, "train_step");
  ad::Value risk = objective_.kind == ObjectiveKind::learned
                       ? apply_head(tape_, phi_, losses)
                       : eval_risk(objective_.rho, losses);
  double risk_value = risk.item();
  auto grads = ad::backward(risk, leaves);
  for (std::size_t p = 0; p < params_.size(); ++p) {
    const Tensor& g = grads[p].value();
    for (std::size_t i = 0; i < params_[p].numel(); ++i) {
      double step_dir = g[i] + config_.weight_decay * params_[p][i];
      velocity_[p][i] = config_.momentum * velocity_[p][i] + step_dir;
      params_[p][i] -= lr * velocity_[p][i];
    }
  }
  return risk_value;
}

double Trainer::validation_risk() const {
  Tensor logits = mlp_forward_value(spec_, params_, val_.features);
  auto losses = cross_entropy_per_sample(logits, val_.labels);
  return eval_risk(objective_.rho, losses);
}

void Trainer::step() {
  double lr = current_lr();

  if (objective_.kind == ObjectiveKind::learned && !config_.freeze_phi) {
    std::vector<Batch> batches;
    if (config_.fresh_inner_batches) {
      for (int k = 0; k < config_.inner_steps; ++k) batches.push_back(train_sampler_.next());
    } else {
      batches.assign(static_cast<std::size_t>(config_.inner_steps), train_sampler_.next());
    }
    double beta = config_.inner_lr_from_schedule ? lr : config_.inner_lr_beta;
    std::vector<double> betas(batches.size(), beta);
    {
      auto adapted = inner_adapt(tape_, loss_fn_, params_, phi_, batches, betas,
                                 config_.detach_phi_inner);
      Batch val_batch = val_sampler_.next();
      outer_step(phi_, loss_fn_, adapted, val_batch, objective_.rho, adam_,
                 config_.outer_adam, /*expect_path=*/!config_.detach_phi_inner);
    }
    // model parameters are reset simply by never having been touched:
    // the inner loop adapted tape copies, and the tape is cleared here
    tape_.truncate(0);
  }

  Batch batch = train_sampler_.next();
  double train_risk = real_update(batch, lr);
  tape_.truncate(0);

  TrainRecord rec;
  rec.step = step_;
  rec.train_risk = train_risk;
  rec.val_risk = validation_risk();
  rec.lr = lr;
  if (objective_.kind == ObjectiveKind::learned) {
    rec.has_phi = true;
    rec.phi_entropy = weight_entropy(phi_weights(phi_));
  }
  records_.push_back(rec);
  ++step_;
}

void Trainer::run(std::span<const long> snapshot_marks) {
  std::size_t mi = 0;
  auto take_due = [&] {
    while (mi < snapshot_marks.size() && snapshot_marks[mi] <= step_) {
      snapshots_.push_back(snapshot(phi_, step_));
      ++mi;
    }
  };
  take_due();  // a mark at 0 records the initial weights

  std::vector<double> epoch_metrics;
  while (step_ < config_.total_steps) {
    step();
    take_due();
    if (step_ % steps_per_epoch_ == 0) {
      epoch_metrics.push_back(records_.back().val_risk);
      if (config_.early_stop_enabled &&
          early_stop(epoch_metrics, config_.early_stop_patience_epochs))
        break;
    }
  }
  // marks past an early stop collapse onto the final step
  while (mi < snapshot_marks.size()) {
    snapshots_.push_back(snapshot(phi_, step_));
    ++mi;
  }
}

namespace {

TrainOutcome outcome_of(Trainer& t) {
  return {t.params(), t.phi(), t.records(), t.snapshots(), t.steps_run()};
}

}  // namespace

TrainOutcome train_fixed_rho(const MlpSpec& spec, const TrainerConfig& config,
                             const RiskFunctional& rho, const LabeledDataset& train,
                             const LabeledDataset& val) {
  Trainer t(spec, config, Objective::fixed(rho), train, val);
  t.run();
  return outcome_of(t);
}

TrainOutcome train_learned(const MlpSpec& spec, const TrainerConfig& config,
                           const RiskFunctional& rho, const LabeledDataset& train,
                           const LabeledDataset& val,
                           std::span<const long> snapshot_marks) {
  Trainer t(spec, config, Objective::learned(rho), train, val);
  t.run(snapshot_marks);
  return outcome_of(t);
}

TrainOutcome warm_start_then(const MlpSpec& spec, const TrainerConfig& config,
                             const Objective& target, const LabeledDataset& train,
                             const LabeledDataset& val,
                             std::span<const long> snapshot_marks) {
  config.validate();
  if (config.warm_start_steps == 0) {
    Trainer t(spec, config, target, train, val);
    t.run(snapshot_marks);
    return outcome_of(t);
  }

  TrainerConfig phase1 = config;
  phase1.total_steps = config.warm_start_steps;
  phase1.warm_start_steps = 0;
  Trainer t1(spec, phase1, Objective::fixed(RiskFunctional{}), train, val);
  t1.run();
  if (config.warm_start_steps >= config.total_steps) return outcome_of(t1);

  TrainerConfig phase2 = config;
  phase2.total_steps = config.total_steps - config.warm_start_steps;
  phase2.warm_start_steps = 0;
  phase2.seed = mix_seed(config.seed, "warm-phase2");
  long offset = t1.steps_run();
  std::vector<long> marks2;
  for (long m : snapshot_marks) marks2.push_back(std::max<long>(0, m - offset));
  Trainer t2(spec, phase2, target, train, val, t1.params());
  t2.run(marks2);

  TrainOutcome out = outcome_of(t2);
  out.steps_run += offset;
  for (auto& r : out.records) r.step += offset;
  for (auto& s : out.snapshots) s.step += offset;
  std::vector<TrainRecord> stitched = t1.records();
  stitched.insert(stitched.end(), out.records.begin(), out.records.end());
  out.records = std::move(stitched);
  return out;
}

}  // namespace metarisk
