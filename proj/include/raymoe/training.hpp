#pragma once

// Mini-batch Adam training through the unrolled relaxation, evaluation, and
// early stopping. train() and evaluate() are generic over a learner type that
// provides, via ADL:
//
//   std::span<double> M::parameters()
//   std::size_t       M::total_parameter_count() const
//   double       sample_loss_and_gradient(const M&, x, label, ad::Tape&, std::span<double> grad)
//   SampleRecord evaluate_sample(const M&, x, label)
//
// Model (gated network) and MlpBaseline both satisfy it.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "raymoe/autodiff.hpp"
#include "raymoe/baseline.hpp"
#include "raymoe/data.hpp"
#include "raymoe/errors.hpp"
#include "raymoe/network.hpp"
#include "raymoe/parallel.hpp"
#include "raymoe/rng.hpp"
#include "raymoe/sample.hpp"

namespace raymoe {

// Learner interface for the gated network ------------------------------------

inline double sample_loss(const Model& m, std::span<const double> x, std::size_t label) {
  return kernels::cross_entropy(relax(m, x).logits, label);
}

inline double sample_loss_and_gradient(const Model& m, std::span<const double> x, std::size_t label,
                                       ad::Tape& tape, std::span<double> grad) {
  tape.clear();
  auto rec = record_relax_on_tape(m, x, tape, grad);
  ad::Var loss = tape.cross_entropy(rec.logits, label);
  tape.backward(loss);
  return tape.scalar_value(loss);
}

inline SampleRecord evaluate_sample(const Model& m, std::span<const double> x, std::size_t label) {
  const auto res = relax(m, x);
  SampleRecord r;
  r.label = label;
  r.prediction = kernels::argmax(res.logits);
  r.correct = r.prediction == label;
  r.loss = kernels::cross_entropy(res.logits, label);
  r.used_params = res.trace.used_parameter_count;
  r.active_block_pct = 100.0 * res.trace.active_block_fraction;
  r.steps = res.trace.steps_taken;
  r.final_theta = res.trace.final_theta();
  r.terminated_by = to_string(res.trace.terminated_by);
  return r;
}

// Configuration ----------------------------------------------------------------

struct TrainConfig {
  double learning_rate = 0.001;
  std::size_t epochs = 500;
  std::size_t patience = 10;
  std::size_t batch_size = 128;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  bool shuffle = true;
  /// Worker threads for per-sample gradients and evaluation. Any value gives
  /// the same results; reductions run in sample-index order.
  std::size_t threads = 1;
  /// When false, wall_ms is logged as 0 so logs are byte-reproducible.
  bool log_wall_time = true;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;

  void validate() const {
    std::vector<std::string> errs;
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) errs.emplace_back("learning_rate must be >= 0");
    if (epochs < 1) errs.emplace_back("epochs must be >= 1");
    if (patience < 1) errs.emplace_back("patience must be >= 1");
    if (patience > epochs) errs.emplace_back("patience must be <= epochs");
    if (batch_size < 1) errs.emplace_back("batch_size must be >= 1");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) errs.emplace_back("adam_beta1 must lie in [0, 1)");
    if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) errs.emplace_back("adam_beta2 must lie in [0, 1)");
    if (!(adam_eps > 0.0)) errs.emplace_back("adam_eps must be > 0");
    if (threads < 1) errs.emplace_back("threads must be >= 1");
    if (!errs.empty()) {
      std::string msg = "invalid train config:";
      for (const auto& e : errs) msg += "\n  " + e;
      throw ConfigError(msg);
    }
  }
};

// Adam ---------------------------------------------------------------------------

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t step = 0;
};

/// One bias-corrected Adam update.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& st,
                      const TrainConfig& cfg) {
  if (grads.size() != params.size()) throw ConfigError("adam_step: gradient/parameter size mismatch");
  if (st.m.empty() && st.v.empty()) {
    st.m.assign(params.size(), 0.0);
    st.v.assign(params.size(), 0.0);
  }
  if (st.m.size() != params.size() || st.v.size() != params.size()) {
    throw ConfigError("adam_step: moment buffers do not match the parameters");
  }
  st.step += 1;
  const double b1 = cfg.adam_beta1;
  const double b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    st.m[i] = b1 * st.m[i] + (1.0 - b1) * g;
    st.v[i] = b2 * st.v[i] + (1.0 - b2) * g * g;
    const double mhat = st.m[i] / c1;
    const double vhat = st.v[i] / c2;
    params[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps);
  }
}

// Evaluation -----------------------------------------------------------------------

struct ThetaStats {
  double mean_final_theta = 0.0;
  double mean_steps = 0.0;
  double output_threshold_fraction = 0.0;

  friend bool operator==(const ThetaStats&, const ThetaStats&) = default;
};

struct EvalResult {
  double accuracy = 0.0;
  double mean_loss = 0.0;
  double mean_used_params = 0.0;
  double mean_active_fraction = 0.0;
  std::size_t total_params = 0;
  ThetaStats theta;
  std::vector<SampleRecord> records;
};

/// Deterministic tape-free pass over `indices` of `ds`.
template <class M>
EvalResult evaluate(const M& model, const Dataset& ds, std::span<const std::size_t> indices, std::size_t threads = 1) {
  EvalResult res;
  res.total_params = model.total_parameter_count();
  res.records.resize(indices.size());
  parallel_for(indices.size(), threads, [&](std::size_t k) {
    const std::size_t i = indices[k];
    res.records[k] = evaluate_sample(model, ds.row(i), ds.labels[i]);
    res.records[k].index = k;
  });
  if (indices.empty()) return res;
  double correct = 0, loss = 0, used = 0, active = 0, theta = 0, steps = 0, by_threshold = 0;
  for (const auto& r : res.records) {
    correct += r.correct ? 1.0 : 0.0;
    loss += r.loss;
    used += static_cast<double>(r.used_params);
    active += r.active_block_pct / 100.0;
    theta += r.final_theta;
    steps += static_cast<double>(r.steps);
    by_threshold += r.terminated_by == "output_threshold" ? 1.0 : 0.0;
  }
  const auto n = static_cast<double>(indices.size());
  res.accuracy = correct / n;
  res.mean_loss = loss / n;
  res.mean_used_params = used / n;
  res.mean_active_fraction = active / n;
  res.theta = {theta / n, steps / n, by_threshold / n};
  return res;
}

// Early stopping ------------------------------------------------------------------

/// Tracks the best epoch by validation accuracy (ties: lower loss).
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

  /// Returns true if `epoch` (1-based) is a new best.
  bool observe(std::size_t epoch, double accuracy, double loss) {
    const bool better = best_epoch_ == 0 || accuracy > best_accuracy_ ||
                        (accuracy == best_accuracy_ && loss < best_loss_);
    if (better) {
      best_epoch_ = epoch;
      best_accuracy_ = accuracy;
      best_loss_ = loss;
    }
    last_epoch_ = epoch;
    return better;
  }

  bool should_stop() const noexcept { return best_epoch_ != 0 && last_epoch_ - best_epoch_ >= patience_; }
  std::size_t best_epoch() const noexcept { return best_epoch_; }
  double best_accuracy() const noexcept { return best_accuracy_; }

 private:
  std::size_t patience_;
  std::size_t best_epoch_ = 0;
  std::size_t last_epoch_ = 0;
  double best_accuracy_ = -1.0;
  double best_loss_ = std::numeric_limits<double>::infinity();
};

// Training --------------------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_accuracy = 0.0;
  double val_loss = 0.0;
  double val_mean_used_params = 0.0;
  ThetaStats theta_stats;
  std::int64_t wall_ms = 0;
};

struct TrainingLog {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  bool stopped_early = false;
};

inline nlohmann::ordered_json to_json(const EpochRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["train_loss"] = r.train_loss;
  j["val_accuracy"] = r.val_accuracy;
  j["val_loss"] = r.val_loss;
  j["val_mean_used_params"] = r.val_mean_used_params;
  j["theta_stats"] = {{"mean_final_theta", r.theta_stats.mean_final_theta},
                      {"mean_steps", r.theta_stats.mean_steps},
                      {"output_threshold_fraction", r.theta_stats.output_threshold_fraction}};
  j["wall_ms"] = r.wall_ms;
  return j;
}

/// One JSON object per line, one line per epoch.
inline std::string to_json_lines(const TrainingLog& log) {
  std::string out;
  for (const auto& r : log.epochs) out += to_json(r).dump() + "\n";
  return out;
}

using EpochCallback = std::function<void(const EpochRecord&, std::span<const double> params)>;

namespace detail {

template <class M>
double batch_gradient(const M& model, const Dataset& ds, std::span<const std::size_t> batch, std::size_t threads,
                      std::vector<double>& accum, std::size_t epoch, std::size_t batch_no, std::size_t adam_step_no) {
  const std::size_t n_params = accum.size();
  std::fill(accum.begin(), accum.end(), 0.0);
  std::vector<double> losses(batch.size());
  auto check = [&](std::size_t k) {
    if (!std::isfinite(losses[k])) {
      throw NumericalError("non-finite loss in epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_no) +
                           " (Adam step " + std::to_string(adam_step_no) + "), sample " + std::to_string(batch[k]));
    }
  };
  if (threads <= 1) {
    ad::Tape tape;
    std::vector<double> grad(n_params);
    for (std::size_t k = 0; k < batch.size(); ++k) {
      std::fill(grad.begin(), grad.end(), 0.0);
      const std::size_t i = batch[k];
      losses[k] = sample_loss_and_gradient(model, ds.row(i), ds.labels[i], tape, grad);
      check(k);
      for (std::size_t p = 0; p < n_params; ++p) accum[p] += grad[p];
    }
  } else {
    std::vector<std::vector<double>> grads(batch.size());
    parallel_for(batch.size(), threads, [&](std::size_t k) {
      ad::Tape tape;
      grads[k].assign(n_params, 0.0);
      const std::size_t i = batch[k];
      losses[k] = sample_loss_and_gradient(model, ds.row(i), ds.labels[i], tape, grads[k]);
    });
    for (std::size_t k = 0; k < batch.size(); ++k) {
      check(k);
      for (std::size_t p = 0; p < n_params; ++p) accum[p] += grads[k][p];
    }
  }
  const auto inv = 1.0 / static_cast<double>(batch.size());
  for (double& g : accum) g *= inv;
  double total = 0.0;
  for (double l : losses) total += l;
  return total;
}

}  // namespace detail

/// Trains on ds.splits.train with early stopping on ds.splits.val; leaves the
/// best-validation parameters in `model`.
template <class M>
TrainingLog train(M& model, const Dataset& ds, const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (ds.splits.train.empty()) throw DataError("train: empty training split");
  if (ds.splits.val.empty()) throw DataError("train: empty validation split");

  TrainingLog log;
  AdamState adam;
  EarlyStopping stopper(cfg.patience);
  auto params = model.parameters();
  std::vector<double> best(params.begin(), params.end());
  std::vector<double> grad(params.size());
  std::vector<std::size_t> order = ds.splits.train;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    if (cfg.shuffle) {
      order = ds.splits.train;
      Rng rng(derive_seed(cfg.seed, epoch));
      rng.shuffle(order);
    }
    double loss_sum = 0.0;
    std::size_t batch_no = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_no) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::span<const std::size_t> batch(order.data() + start, end - start);
      loss_sum += detail::batch_gradient(model, ds, batch, cfg.threads, grad, epoch, batch_no, adam.step + 1);
      adam_step(params, grad, adam, cfg);
    }

    const auto val = evaluate(model, ds, ds.splits.val, cfg.threads);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.val_accuracy = val.accuracy;
    rec.val_loss = val.mean_loss;
    rec.val_mean_used_params = val.mean_used_params;
    rec.theta_stats = val.theta;
    if (cfg.log_wall_time) {
      rec.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
    }
    if (stopper.observe(epoch, val.accuracy, val.mean_loss)) best.assign(params.begin(), params.end());
    log.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec, params);
    if (stopper.should_stop()) {
      log.stopped_early = epoch < cfg.epochs;
      break;
    }
  }
  log.best_epoch = stopper.best_epoch();
  std::copy(best.begin(), best.end(), params.begin());
  return log;
}

}  // namespace raymoe
