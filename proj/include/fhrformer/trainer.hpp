#pragma once

// Self-supervised training loop: fresh random patch mask per sample, loss on
// the masked patches, Adam with L2-coupled weight decay, plateau learning-rate
// decay, early stopping on validation loss, best-weights retention.

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "fhrformer/checkpoint.hpp"
#include "fhrformer/errors.hpp"
#include "fhrformer/model.hpp"
#include "fhrformer/objective.hpp"
#include "fhrformer/random.hpp"
#include "fhrformer/signalio.hpp"

namespace fhrformer::train {

using model::ModelConfig;
using model::ModelWeights;
using signal::FHRSeries;

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  double learning_rate = 1e-4;
  double weight_decay = 0.01;
  std::size_t batch_size = 16;
  std::size_t max_epochs = 100;
  std::size_t early_stop_patience = 20;
  std::size_t scheduler_patience = 5;
  double scheduler_factor = 0.1;
  AdamConfig adam;
  objective::LossConfig loss;
  std::uint64_t seed = 0;
  std::uint64_t validation_seed = 0x5eed;
  /// Skip parameter updates (diagnostic: exercises loop semantics with constant weights).
  bool freeze_weights = false;
  /// When set, the best weights are written here (atomically) on every improvement.
  std::optional<std::filesystem::path> checkpoint_path;

  void validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
    if (weight_decay < 0.0) throw std::invalid_argument("weight decay must be >= 0");
    if (batch_size == 0 || max_epochs == 0) throw std::invalid_argument("batch size and epochs must be positive");
    if (early_stop_patience == 0 || scheduler_patience == 0) throw std::invalid_argument("patience must be >= 1");
    if (!(scheduler_factor > 0.0 && scheduler_factor < 1.0)) throw std::invalid_argument("decay factor in (0,1)");
    loss.validate();
  }
};

// ---------------------------------------------------------------------------
// Optimizer

struct AdamState {
  std::vector<std::vector<double>> first, second;
  std::uint64_t step = 0;
};

/// One Adam update over every parameter, using the gradients currently held
/// by the parameter tensors. Weight decay is added to the gradient
/// (g + wd * theta) before the moment updates. Throws NumericError naming the
/// first parameter block holding a non-finite gradient; nothing is updated in
/// that case.
inline void adam_step(std::vector<model::NamedParameter>& params, AdamState& state, double lr, double weight_decay,
                      const AdamConfig& cfg = {}) {
  for (const auto& p : params)
    for (double g : p.tensor.grad())
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter block '" + p.name + "'");
  if (state.first.size() != params.size()) {
    state.first.assign(params.size(), {});
    state.second.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.first[i].assign(params[i].tensor.size(), 0.0);
      state.second[i].assign(params[i].tensor.size(), 0.0);
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i].tensor.mutable_values();
    const auto grad = params[i].tensor.grad();
    auto& m = state.first[i];
    auto& v = state.second[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double g = grad[j] + weight_decay * theta[j];
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
      theta[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Schedules

/// Multiplies the learning rate by `factor` once `patience` consecutive
/// epochs pass without a strict improvement of the monitored loss, then
/// starts counting again.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor, std::size_t patience) : lr_(lr), factor_(factor), patience_(patience) {}

  double step(double loss) {
    if (loss < best_) {
      best_ = loss;
      bad_epochs_ = 0;
    } else if (++bad_epochs_ >= patience_) {
      lr_ *= factor_;
      bad_epochs_ = 0;
    }
    return lr_;
  }
  double lr() const { return lr_; }

 private:
  double lr_;
  double factor_;
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs_ = 0;
};

/// Best-loss tracker with a patience counter: the counter resets on strict
/// improvement and increments otherwise; stop once it reaches `patience`.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

  /// Returns true when `loss` is a new best.
  bool update(double loss) {
    if (loss < best_) {
      best_ = loss;
      counter_ = 0;
      return true;
    }
    ++counter_;
    return false;
  }
  bool should_stop() const { return counter_ >= patience_; }
  double best() const { return best_; }
  std::size_t counter() const { return counter_; }

 private:
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t counter_ = 0;
};

// ---------------------------------------------------------------------------
// Loop

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

struct FitResult {
  ModelWeights best_weights;
  std::vector<EpochLog> log;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  bool stopped_early = false;
};

namespace detail {

inline void check_series(const std::vector<FHRSeries>& set, const ModelConfig& cfg, const char* name) {
  if (set.empty()) throw DataError(std::string(name) + " split is empty");
  for (const auto& s : set) {
    if (s.size() != cfg.length) {
      throw DataError(std::string(name) + " series '" + s.episode_id + "' has length " + std::to_string(s.size()) +
                      ", model expects " + std::to_string(cfg.length));
    }
  }
}

// NaN reaching an op that rejects it (softmax) is a diverged run, not bad input.
template <class F>
auto as_numeric(std::size_t epoch, F&& f) {
  try {
    return f();
  } catch (const std::domain_error& e) {
    throw NumericError("non-finite activations at epoch " + std::to_string(epoch) + " (" + e.what() + ")");
  }
}

}  // namespace detail

/// Loss of one series under `mask`. Differentiable through the weights.
inline objective::LossBreakdown series_loss(const FHRSeries& s, const model::MaskSpec& mask, const ModelWeights& w,
                                            const objective::LossConfig& loss_cfg,
                                            const model::ForwardOptions& opt) {
  const auto fwd = model::forward(s.values, mask, w, opt);
  return objective::compute_loss(fwd.predicted_masked, model::masked_targets(s.values, mask, w.config.patch_size),
                                 loss_cfg);
}

/// Deterministic validation mask for series `index`.
inline model::MaskSpec validation_mask(std::size_t n_patches, double mask_ratio, std::uint64_t seed,
                                       std::size_t index) {
  Rng rng(derive_seed(seed, index));
  return model::sample_mask(n_patches, mask_ratio, rng);
}

/// Mean eval-mode loss over `set` with masks fixed by `seed`.
inline double validation_loss(const std::vector<FHRSeries>& set, const ModelWeights& w,
                              const objective::LossConfig& loss_cfg, std::uint64_t seed) {
  double total = 0.0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto mask = validation_mask(set[i].size() / w.config.patch_size, w.config.mask_ratio, seed, i);
    total += series_loss(set[i], mask, w, loss_cfg, {model::Mode::eval, 0}).total_value;
  }
  return total / static_cast<double>(set.size());
}

using EpochCallback = std::function<void(const EpochLog&)>;

/// Trains from `initial` (or a fresh initialization seeded by cfg.seed).
/// Throws DataError for empty or overlapping splits and NumericError on a
/// non-finite loss; in the latter case the last best checkpoint (if a path is
/// configured) is left untouched on disk.
inline FitResult fit(const std::vector<FHRSeries>& train_set, const std::vector<FHRSeries>& val_set,
                     const ModelConfig& model_cfg, const TrainConfig& cfg,
                     std::optional<ModelWeights> initial = std::nullopt, const EpochCallback& on_epoch = {}) {
  model_cfg.validate();
  cfg.validate();
  detail::check_series(train_set, model_cfg, "train");
  detail::check_series(val_set, model_cfg, "validation");
  std::set<std::string> train_ids;
  for (const auto& s : train_set) train_ids.insert(s.episode_id);
  for (const auto& s : val_set)
    if (!s.episode_id.empty() && train_ids.count(s.episode_id)) {
      throw DataError("episode '" + s.episode_id + "' appears in both train and validation splits");
    }

  ModelWeights w = initial ? std::move(*initial) : ModelWeights::initialize(model_cfg, derive_seed(cfg.seed, 1));
  auto params = w.parameters();
  AdamState adam;
  PlateauScheduler scheduler(cfg.learning_rate, cfg.scheduler_factor, cfg.scheduler_patience);
  EarlyStopping stopper(cfg.early_stop_patience);
  Rng rng(derive_seed(cfg.seed, 2));
  const std::size_t n_patches = model_cfg.n_patches();

  FitResult result;
  result.best_weights = w.clone();
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double inv_batch = 1.0 / static_cast<double>(end - start);
      w.zero_grad();
      for (std::size_t b = start; b < end; ++b) {
        const auto& s = train_set[order[b]];
        const auto mask = model::sample_mask(n_patches, model_cfg.mask_ratio, rng);
        const auto loss = detail::as_numeric(epoch, [&] {
          return series_loss(s, mask, w, cfg.loss, {model::Mode::train, rng.next()});
        });
        if (!std::isfinite(loss.total_value)) {
          throw NumericError("non-finite training loss at epoch " + std::to_string(epoch));
        }
        diff::backward(loss.total, inv_batch);
        epoch_loss += loss.total_value;
      }
      if (!cfg.freeze_weights) adam_step(params, adam, scheduler.lr(), cfg.weight_decay, cfg.adam);
    }
    epoch_loss /= static_cast<double>(order.size());

    const double val =
        detail::as_numeric(epoch, [&] { return validation_loss(val_set, w, cfg.loss, cfg.validation_seed); });
    if (!std::isfinite(val)) throw NumericError("non-finite validation loss at epoch " + std::to_string(epoch));
    EpochLog entry{epoch, epoch_loss, val, scheduler.lr(), 0.0};
    if (stopper.update(val)) {
      ModelWeights::copy_values_from(w, result.best_weights);
      result.best_val_loss = val;
      result.best_epoch = epoch;
      if (cfg.checkpoint_path) model::save_checkpoint(*cfg.checkpoint_path, result.best_weights);
    }
    scheduler.step(val);
    entry.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
    if (stopper.should_stop()) {
      result.stopped_early = true;
      break;
    }
  }
  return result;
}

/// CSV: epoch,train_loss,val_loss,lr,seconds
inline void write_training_log(std::ostream& out, const std::vector<EpochLog>& log) {
  out << "epoch,train_loss,val_loss,lr,seconds\n";
  out.precision(17);
  for (const auto& e : log) out << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.lr << ',' << e.seconds << '\n';
}

}  // namespace fhrformer::train
