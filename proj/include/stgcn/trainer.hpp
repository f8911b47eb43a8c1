#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "stgcn/datagen.hpp"
#include "stgcn/model.hpp"

namespace stgcn {

struct TrainConfig {
  std::size_t batch_size = 100;
  int epochs = 30;
  int steps_per_epoch = 48;
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  int folds = 5;
  double accept_threshold = 0.95;  // test accuracy a trained model must reach
  std::size_t threads = 1;         // workers per minibatch

  void validate() const;
};

struct AdamState {
  std::int64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  static AdamState zeros_like(const ModelParams& params);
  friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// One Adam update from the gradients stored in `params`. Throws
/// NonFiniteValue naming the parameter if an update would be non-finite.
void adam_step(ModelParams& params, AdamState& state, const TrainConfig& cfg);

/// Positive class is "unstable".
struct Confusion {
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;

  std::size_t total() const { return tp + tn + fp + fn; }
  double accuracy() const;
  friend bool operator==(const Confusion&, const Confusion&) = default;
};

struct EpochMetrics {
  int epoch = 0;
  double loss = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;  // NaN when there is no test set
  double seconds = 0.0;
};

struct Metrics {
  std::vector<EpochMetrics> history;
  Confusion confusion;
};

/// Everything needed to resume training or run inference.
struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  ModelConfig model;
  ModelParams params;
  NormStats norm;
  std::optional<AdamState> adam;
  std::uint64_t seed = 0;
  int epochs_done = 0;
};

struct TrainResult {
  Checkpoint final_model;
  Checkpoint best_model;
  double best_test_acc = 0.0;
  bool accepted = false;  // best test accuracy >= accept_threshold
  Metrics metrics;
};

/// Per-epoch observer (epoch metrics just recorded).
using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Minibatch Adam training. `test` may be null. With `resume`, training
/// continues from the checkpoint's parameters, Adam state and epoch count.
TrainResult train(const LabeledDataset& train_set, const LabeledDataset* test_set, const ModelConfig& model_cfg,
                  const TrainConfig& train_cfg, const Checkpoint* resume = nullptr,
                  const EpochCallback& on_epoch = {});

/// Inference-mode metrics (loss is the mean cross-entropy).
Metrics evaluate(const Checkpoint& checkpoint, const LabeledDataset& dataset);
/// Per-case predictions, inference mode.
std::vector<AssessmentResult> predict(const Checkpoint& checkpoint, const LabeledDataset& dataset);

/// Seeded partition into k folds of sizes differing by at most one.
std::vector<std::vector<std::size_t>> kfold_partition(std::size_t count, int k, std::uint64_t seed);

struct FoldReport {
  std::vector<std::size_t> test_indices;
  TrainResult result;
  double train_acc = 0.0;  // final model, inference mode
  double test_acc = 0.0;
};

struct CrossValReport {
  std::vector<FoldReport> folds;
  double mean_train_acc = 0.0;
  double mean_test_acc = 0.0;
  double mean_final_loss = 0.0;
};

/// Folds run concurrently on up to `workers` threads; results do not depend on
/// the worker count.
CrossValReport kfold(const LabeledDataset& dataset, const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                     std::size_t workers = 1);

/// Worker count from STGCN_THREADS, else hardware concurrency.
std::size_t default_workers();

}  // namespace stgcn
