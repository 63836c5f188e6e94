#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "fmbff/data.hpp"
#include "fmbff/metrics.hpp"
#include "fmbff/model.hpp"

namespace fmbff {

enum class AugmentMode {
  none,
  random,  // one of the 36 variants per sample per epoch
  full,    // every variant of every sample each epoch
};

struct TrainConfig {
  double lr0 = 1e-3;
  int max_epochs = 100;
  int plateau_patience = 7;
  double plateau_factor = 0.75;
  int early_stop_patience = 10;
  int batch_size = 8;
  double w_bce = 1.0, w_dice = 1.0;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  AugmentMode augment = AugmentMode::random;
  std::int64_t max_steps = 0;  // 0: no cap
  std::uint64_t seed = 0;

  // Throws ConfigError naming the offending key.
  void validate() const;
};

// w_bce * BCE(clamp(pred)) + w_dice * (1 - mean per-image soft Dice), eps 1.
// pred, gt: N x 1 x H x W; gt carries no gradient.
template <typename T>
Tensor<T> segmentation_loss(const Tensor<T>& pred, const Tensor<T>& gt, double w_bce = 1.0, double w_dice = 1.0);

template <typename T>
struct AdamState {
  std::int64_t step = 0;
  // Indexed like ParamStore::entries(); empty for buffers.
  std::vector<std::vector<T>> m, v;
};

// One bias-corrected Adam update of every trainable entry, then clears the
// gradients. Throws UsageError if a trainable entry has no gradient.
template <typename T>
void adam_step(ParamStore<T>& params, AdamState<T>& state, double lr, double beta1 = 0.9, double beta2 = 0.999,
               double eps = 1e-8);

// Learning-rate plateau reduction and early stopping on a higher-is-better
// metric. The two counters run independently.
struct PlateauSchedule {
  double lr0 = 1e-3, factor = 0.75;
  int plateau_patience = 7, stop_patience = 10;

  double lr = 1e-3;
  double best = -std::numeric_limits<double>::infinity();
  int plateau_count = 0;  // stale epochs since the last improvement or reduction
  int stale_count = 0;    // stale epochs since the last improvement
  int reductions = 0;

  static PlateauSchedule from(const TrainConfig& cfg);

  // Returns true when `metric` improves strictly on the best so far.
  bool update(double metric);
  bool should_stop() const { return stale_count >= stop_patience; }
};

struct TrainState {
  int epoch = 0;  // completed epochs
  std::int64_t steps = 0;
  PlateauSchedule schedule;
  AdamState<float> adam;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0;
  double lr = 0;  // rate used during this epoch
  Summary val;
  bool improved = false;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  double best_val_dice = 0;
  bool stopped_early = false;
  TrainState state;
};

// Eval-mode per-image metrics over `samples`.
MetricsReport evaluate(const Model<float>& model, const std::vector<Sample>& samples, int batch_size = 8);

// Probability maps for `samples`, N x 1 x H x W, eval mode.
Tensor<float> predict_samples(const Model<float>& model, const std::vector<Sample>& samples, int batch_size = 8);

using EpochCallback = std::function<void(const EpochRecord&)>;

// Runs the epoch loop. On return the model holds the parameters (and
// batch-norm statistics) of the best validation epoch.
TrainResult train(Model<float>& model, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                  const TrainConfig& cfg, const EpochCallback& on_epoch = {});

std::string history_csv(const std::vector<EpochRecord>& history);

}  // namespace fmbff
