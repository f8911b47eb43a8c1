#include "stgcn/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <iostream>
#include <limits>
#include <map>
#include <mutex>
#include <thread>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "stgcn/errors.hpp"
#include "stgcn/rng.hpp"

namespace stgcn {

namespace {

// Activations are large and short-lived; returning them to the OS after every
// step costs more in page faults than the math itself.
void keep_freed_memory() {
#if defined(__GLIBC__)
  static std::once_flag once;
  std::call_once(once, [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
  });
#endif
}

constexpr std::uint64_t kInitTag = 1;
constexpr std::uint64_t kShuffleTag = 2;
constexpr std::uint64_t kDropoutTag = 3;
constexpr std::uint64_t kFoldTag = 4;

// Minibatches are split into this many shards, each with its own dropout
// stream and gradient buffer, so results do not depend on the thread count.
constexpr std::size_t kShards = 4;
constexpr std::size_t kEvalBatch = 100;

void check_dims(const LabeledDataset& ds, const ModelConfig& cfg, const char* what) {
  if (ds.topology.size() != cfg.buses) {
    throw DimensionMismatch(std::string(what) + " topology has " + std::to_string(ds.topology.size()) +
                            " buses, model expects " + std::to_string(cfg.buses));
  }
  for (const auto& s : ds.samples) {
    s.validate();
    if (s.steps() != cfg.window || s.buses() != cfg.buses) {
      throw DimensionMismatch(std::string(what) + " sample is " + std::to_string(s.steps()) + "x" +
                              std::to_string(s.buses()) + ", model expects " + std::to_string(cfg.window) + "x" +
                              std::to_string(cfg.buses));
    }
  }
}

/// Stateless sampler: the sample at global position p is perm_c[p mod M] for
/// cycle c = p / M, each cycle a fresh seeded shuffle.
class CyclingSampler {
 public:
  CyclingSampler(std::size_t count, std::uint64_t seed) : count_(count), seed_(seed) {}

  std::size_t at(std::uint64_t position) {
    const std::uint64_t cycle = position / count_;
    auto it = perms_.find(cycle);
    if (it == perms_.end()) {
      std::vector<std::size_t> perm(count_);
      for (std::size_t i = 0; i < count_; ++i) perm[i] = i;
      auto rng = Rng::derive(seed_, {kShuffleTag, cycle});
      rng.shuffle(perm);
      if (perms_.size() > 4) perms_.erase(perms_.begin());
      it = perms_.emplace(cycle, std::move(perm)).first;
    }
    return it->second[position % count_];
  }

 private:
  std::size_t count_;
  std::uint64_t seed_;
  std::map<std::uint64_t, std::vector<std::size_t>> perms_;
};

template <typename Fn>
void run_parallel(std::size_t jobs, std::size_t workers, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, jobs));
  if (workers == 1) {
    for (std::size_t j = 0; j < jobs; ++j) fn(j);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t j = next++; j < jobs; j = next++) {
        try {
          fn(j);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

struct EvalOutcome {
  Confusion confusion;
  double loss = 0.0;
  std::vector<AssessmentResult> cases;
};

EvalOutcome run_inference(const Stgcn& net, const ModelParams& params, const NormStats& norm,
                          const LabeledDataset& ds, bool keep_cases) {
  EvalOutcome out;
  const auto bound = bind_constant(params);
  Rng unused(0);
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < ds.samples.size(); start += kEvalBatch) {
    const std::size_t end = std::min(ds.samples.size(), start + kEvalBatch);
    std::vector<const SvsSample*> ptrs;
    for (std::size_t i = start; i < end; ++i) ptrs.push_back(&ds.samples[i]);
    const auto batch = make_batch(ptrs, norm);
    const auto fw = net.forward(batch, bound, false, unused);
    loss_sum += Stgcn::loss(fw, batch).value()[0] * static_cast<double>(end - start);
    for (std::size_t b = 0; b < end - start; ++b) {
      auto r = fw.assessment(b);
      const bool truth_unstable = ptrs[b]->label == Label::Unstable;
      const bool pred_unstable = r.predicted == Label::Unstable;
      if (truth_unstable && pred_unstable) ++out.confusion.tp;
      if (!truth_unstable && !pred_unstable) ++out.confusion.tn;
      if (!truth_unstable && pred_unstable) ++out.confusion.fp;
      if (truth_unstable && !pred_unstable) ++out.confusion.fn;
      if (keep_cases) out.cases.push_back(std::move(r));
    }
  }
  out.loss = ds.samples.empty() ? 0.0 : loss_sum / static_cast<double>(ds.samples.size());
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size < 1) throw InvalidConfig("batch size must be >= 1");
  if (epochs < 0) throw InvalidConfig("epochs must be >= 0");
  if (steps_per_epoch < 1) throw InvalidConfig("steps per epoch must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw InvalidConfig("learning rate must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw InvalidConfig("Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw InvalidConfig("Adam epsilon must be positive");
  if (folds < 2) throw InvalidConfig("folds must be >= 2");
}

AdamState AdamState::zeros_like(const ModelParams& params) {
  AdamState s;
  for (const auto& p : params.all()) {
    s.m.emplace_back(p.value.shape());
    s.v.emplace_back(p.value.shape());
  }
  return s;
}

void adam_step(ModelParams& params, AdamState& state, const TrainConfig& cfg) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeMismatch("Adam state does not match the parameter set");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params.all()[k];
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      const double updated = p.value[i] - cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.adam_eps);
      if (!std::isfinite(updated)) throw NonFiniteValue(p.name);
      p.value[i] = updated;
    }
  }
}

double Confusion::accuracy() const {
  const auto n = total();
  return n == 0 ? 0.0 : static_cast<double>(tp + tn) / static_cast<double>(n);
}

TrainResult train(const LabeledDataset& train_set, const LabeledDataset* test_set, const ModelConfig& model_cfg,
                  const TrainConfig& cfg, const Checkpoint* resume, const EpochCallback& on_epoch) {
  keep_freed_memory();
  model_cfg.validate();
  cfg.validate();
  if (train_set.samples.empty()) throw EmptyDataset("training set is empty");
  check_dims(train_set, model_cfg, "training");
  if (test_set) check_dims(*test_set, model_cfg, "test");
  const std::size_t unstable = train_set.unstable_count();
  if (unstable == 0 || unstable == train_set.size()) {
    throw SingleClassDataset("training set contains only " +
                             std::string(unstable == 0 ? "stable" : "unstable") + " cases");
  }
  const double minority =
      static_cast<double>(std::min(unstable, train_set.size() - unstable)) / static_cast<double>(train_set.size());
  if (minority < 0.2) {
    std::cerr << "warning: minority class is " << minority * 100.0 << "% of the training set\n";
  }

  const Stgcn net(model_cfg, train_set.topology);
  Checkpoint ckpt;
  if (resume) {
    if (!(resume->model == model_cfg)) throw DimensionMismatch("resume checkpoint has a different model config");
    ckpt = *resume;
    if (!ckpt.adam) ckpt.adam = AdamState::zeros_like(ckpt.params);
  } else {
    ckpt.model = model_cfg;
    ckpt.params = ModelParams::initialize(model_cfg, Rng::derive(cfg.seed, {kInitTag}).next());
    ckpt.norm = NormStats::fit(train_set.samples);
    ckpt.adam = AdamState::zeros_like(ckpt.params);
    ckpt.seed = cfg.seed;
  }

  TrainResult result;
  result.best_test_acc = -1.0;
  CyclingSampler sampler(train_set.size(), cfg.seed);
  auto& params = ckpt.params;
  const std::size_t nparams = params.size();
  std::vector<std::vector<Tensor>> shard_grads(kShards);

  for (int epoch = ckpt.epochs_done; epoch < cfg.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    double loss_sum = 0.0;
    for (int s = 0; s < cfg.steps_per_epoch; ++s) {
      const std::uint64_t step = static_cast<std::uint64_t>(epoch) * static_cast<std::uint64_t>(cfg.steps_per_epoch) +
                                 static_cast<std::uint64_t>(s);
      std::vector<const SvsSample*> batch_samples;
      batch_samples.reserve(cfg.batch_size);
      for (std::size_t b = 0; b < cfg.batch_size; ++b) {
        batch_samples.push_back(&train_set.samples[sampler.at(step * cfg.batch_size + b)]);
      }

      const std::size_t shards = std::min(kShards, cfg.batch_size);
      std::vector<double> shard_loss(shards, 0.0);
      run_parallel(shards, cfg.threads, [&](std::size_t sh) {
        const std::size_t lo = cfg.batch_size * sh / shards;
        const std::size_t hi = cfg.batch_size * (sh + 1) / shards;
        auto& grads = shard_grads[sh];
        grads.clear();
        for (const auto& p : params.all()) grads.emplace_back(p.value.shape());
        const auto batch = make_batch({batch_samples.begin() + static_cast<long>(lo), batch_samples.begin() + static_cast<long>(hi)},
                                      ckpt.norm);
        auto rng = Rng::derive(cfg.seed, {kDropoutTag, step, sh});
        const auto fw = net.forward(batch, stgcn::bind(std::as_const(params), grads), true, rng);
        const auto loss = Stgcn::loss(fw, batch);
        const double weight = static_cast<double>(hi - lo) / static_cast<double>(cfg.batch_size);
        loss.backward(Tensor({1}, weight));
        shard_loss[sh] = loss.value()[0] * weight;
      });

      params.zero_grads();
      for (std::size_t sh = 0; sh < shards; ++sh) {
        for (std::size_t k = 0; k < nparams; ++k) params.all()[k].grad += shard_grads[sh][k];
        loss_sum += shard_loss[sh];
      }
      for (const auto& p : params.all()) {
        if (!p.grad.all_finite()) throw NonFiniteValue(p.name + " gradient");
      }
      adam_step(params, *ckpt.adam, cfg);
    }

    EpochMetrics em;
    em.epoch = epoch + 1;
    em.loss = loss_sum / static_cast<double>(cfg.steps_per_epoch);
    em.train_acc = run_inference(net, params, ckpt.norm, train_set, false).confusion.accuracy();
    em.test_acc = test_set ? run_inference(net, params, ckpt.norm, *test_set, false).confusion.accuracy()
                           : std::numeric_limits<double>::quiet_NaN();
    em.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    ckpt.epochs_done = epoch + 1;
    result.metrics.history.push_back(em);

    const double score = test_set ? em.test_acc : em.train_acc;
    if (score > result.best_test_acc) {
      result.best_test_acc = score;
      result.best_model = ckpt;
    }
    if (on_epoch) on_epoch(em);
  }

  if (result.best_test_acc < 0.0) {
    result.best_model = ckpt;
    result.best_test_acc = 0.0;
  }
  result.accepted = result.best_test_acc >= cfg.accept_threshold;
  result.final_model = ckpt;
  const auto& final_eval_set = test_set ? *test_set : train_set;
  result.metrics.confusion = run_inference(net, params, ckpt.norm, final_eval_set, false).confusion;
  return result;
}

Metrics evaluate(const Checkpoint& checkpoint, const LabeledDataset& dataset) {
  if (dataset.samples.empty()) throw EmptyDataset("evaluation dataset is empty");
  check_dims(dataset, checkpoint.model, "evaluation");
  const Stgcn net(checkpoint.model, dataset.topology);
  const auto out = run_inference(net, checkpoint.params, checkpoint.norm, dataset, false);
  Metrics m;
  m.confusion = out.confusion;
  EpochMetrics em;
  em.epoch = checkpoint.epochs_done;
  em.loss = out.loss;
  em.train_acc = std::numeric_limits<double>::quiet_NaN();
  em.test_acc = out.confusion.accuracy();
  m.history.push_back(em);
  return m;
}

std::vector<AssessmentResult> predict(const Checkpoint& checkpoint, const LabeledDataset& dataset) {
  if (dataset.samples.empty()) throw EmptyDataset("dataset is empty");
  check_dims(dataset, checkpoint.model, "prediction");
  const Stgcn net(checkpoint.model, dataset.topology);
  return run_inference(net, checkpoint.params, checkpoint.norm, dataset, true).cases;
}

std::vector<std::vector<std::size_t>> kfold_partition(std::size_t count, int k, std::uint64_t seed) {
  if (k < 2) throw InvalidConfig("k-fold needs k >= 2");
  if (static_cast<std::size_t>(k) > count) {
    throw InvalidConfig("k = " + std::to_string(k) + " exceeds sample count " + std::to_string(count));
  }
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  auto rng = Rng::derive(seed, {kFoldTag});
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> folds(static_cast<std::size_t>(k));
  const auto kk = static_cast<std::size_t>(k);
  for (std::size_t f = 0; f < kk; ++f) {
    const std::size_t lo = count * f / kk;
    const std::size_t hi = count * (f + 1) / kk;
    folds[f].assign(order.begin() + static_cast<long>(lo), order.begin() + static_cast<long>(hi));
    std::sort(folds[f].begin(), folds[f].end());
  }
  return folds;
}

CrossValReport kfold(const LabeledDataset& dataset, const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                     std::size_t workers) {
  train_cfg.validate();
  const auto parts = kfold_partition(dataset.size(), train_cfg.folds, train_cfg.seed);
  CrossValReport report;
  report.folds.resize(parts.size());
  TrainConfig fold_cfg = train_cfg;
  if (workers > 1) fold_cfg.threads = 1;
  run_parallel(parts.size(), workers, [&](std::size_t f) {
    std::vector<char> in_test(dataset.size(), 0);
    for (auto i : parts[f]) in_test[i] = 1;
    std::vector<std::size_t> train_idx;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      if (!in_test[i]) train_idx.push_back(i);
    }
    const auto train_set = dataset.subset(train_idx);
    const auto test_set = dataset.subset(parts[f]);
    auto& fr = report.folds[f];
    fr.test_indices = parts[f];
    fr.result = train(train_set, &test_set, model_cfg, fold_cfg);
    fr.train_acc = evaluate(fr.result.final_model, train_set).confusion.accuracy();
    fr.test_acc = fr.result.metrics.confusion.accuracy();
  });
  for (const auto& fr : report.folds) {
    report.mean_train_acc += fr.train_acc;
    report.mean_test_acc += fr.test_acc;
    report.mean_final_loss += fr.result.metrics.history.empty() ? 0.0 : fr.result.metrics.history.back().loss;
  }
  const double k = static_cast<double>(report.folds.size());
  report.mean_train_acc /= k;
  report.mean_test_acc /= k;
  report.mean_final_loss /= k;
  return report;
}

std::size_t default_workers() {
  if (const char* env = std::getenv("STGCN_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace stgcn
