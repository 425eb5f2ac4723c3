#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "arob/error.hpp"
#include "arob/network.hpp"
#include "arob/parallel.hpp"
#include "arob/phantom.hpp"
#include "arob/rng.hpp"
#include "arob/tensor.hpp"

namespace arob {

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t patience = 8;
  std::size_t max_epochs = 80;
  std::size_t batch_size = 4;
  std::size_t repetitions = 10;
  std::uint64_t base_seed = 1;
  double sagittal_flip_p = 0.5;
  int coronal_shift_min = -2;
  int coronal_shift_max = 2;

  void validate() const {
    if (!(lr > 0)) throw DataError("train config: lr must be positive");
    if (!(weight_decay >= 0)) throw DataError("train config: weight_decay must be non-negative");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw DataError("train config: betas must lie in [0,1)");
    if (!(adam_eps > 0)) throw DataError("train config: adam_eps must be positive");
    if (patience < 1) throw DataError("train config: patience must be >= 1");
    if (max_epochs < 1 || batch_size < 1) throw DataError("train config: max_epochs and batch_size must be >= 1");
    if (repetitions < 1) throw DataError("train config: repetitions must be >= 1");
    if (!(sagittal_flip_p >= 0 && sagittal_flip_p <= 1)) throw DataError("train config: flip probability outside [0,1]");
    if (coronal_shift_min < -2 || coronal_shift_max > 2 || coronal_shift_min > coronal_shift_max)
      throw DataError("train config: coronal shift range must lie within [-2, 2]");
  }
};

// ---------------------------------------------------------------------------
// ADAM

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m, v;
  std::uint64_t t = 0;

  static AdamState zeros_like(const std::vector<Tensor<T>*>& params) {
    AdamState s;
    for (const auto* p : params) {
      s.m.emplace_back(p->shape());
      s.v.emplace_back(p->shape());
    }
    return s;
  }
};

/// One bias-corrected ADAM step. Weight decay is coupled: decay * theta is
/// added to the gradient before the moment updates.
template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params, const Gradients<T>& grads, AdamState<T>& state,
               const TrainConfig& cfg) {
  if (grads.size() != params.size() || state.m.size() != params.size())
    throw UsageError("adam_step: parameter, gradient and state counts differ");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (grads[k].shape() != params[k]->shape() || state.m[k].shape() != params[k]->shape())
      throw ShapeError("adam_step: shape mismatch for parameter " + std::to_string(k));
    for (std::size_t i = 0; i < grads[k].size(); ++i)
      if (!std::isfinite(grads[k][i]))
        throw RunError(detail::concat("adam_step: non-finite gradient in parameter ", k, " at offset ", i));
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor<T>& p = *params[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double theta = p[i];
      const double g = static_cast<double>(grads[k][i]) + cfg.weight_decay * theta;
      const double m = cfg.beta1 * state.m[k][i] + (1 - cfg.beta1) * g;
      const double v = cfg.beta2 * state.v[k][i] + (1 - cfg.beta2) * g * g;
      state.m[k][i] = static_cast<T>(m);
      state.v[k][i] = static_cast<T>(v);
      p[i] = static_cast<T>(theta - cfg.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.adam_eps));
    }
  }
}

// ---------------------------------------------------------------------------
// Loss

/// Softmax cross-entropy averaged over the batch.
template <typename T>
std::pair<double, Tensor<T>> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& targets) {
  const std::size_t N = logits.extent(0), C = logits.extent(1);
  if (targets.size() != N) throw ShapeError("softmax_cross_entropy: target count does not match batch");
  Tensor<T> grad(logits.shape());
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, static_cast<double>(logits[n * C + c]));
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(static_cast<double>(logits[n * C + c]) - mx);
    const double log_z = mx + std::log(z);
    total += log_z - static_cast<double>(logits[n * C + targets[n]]);
    for (std::size_t c = 0; c < C; ++c) {
      const double p = std::exp(static_cast<double>(logits[n * C + c]) - log_z);
      grad[n * C + c] = static_cast<T>((p - (c == targets[n] ? 1.0 : 0.0)) / static_cast<double>(N));
    }
  }
  return {total / static_cast<double>(N), std::move(grad)};
}

// ---------------------------------------------------------------------------
// Augmentation

/// Applies a given flip/shift to a (1, D, H, W) sample.
inline VolumeSample augment_with(const VolumeSample& s, bool flip_sagittal, int coronal_shift) {
  VolumeSample out = s;
  if (flip_sagittal) out.volume = flip(out.volume, 1 + s.axes.sagittal);
  if (coronal_shift != 0) out.volume = shift(out.volume, 1 + s.axes.coronal, coronal_shift, 0.0f);
  return out;
}

struct AugmentDraw {
  bool flip = false;
  int shift = 0;
};

/// Both draws are always consumed so the stream advances identically per sample.
inline AugmentDraw draw_augmentation(Rng& rng, const TrainConfig& cfg) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> s(cfg.coronal_shift_min, cfg.coronal_shift_max);
  AugmentDraw d;
  d.flip = u(rng) < cfg.sagittal_flip_p;
  d.shift = s(rng);
  return d;
}

inline VolumeSample augment(const VolumeSample& s, Rng& rng, const TrainConfig& cfg) {
  const AugmentDraw d = draw_augmentation(rng, cfg);
  return augment_with(s, d.flip, d.shift);
}

// ---------------------------------------------------------------------------
// Evaluation records

struct Prediction {
  std::string subject_id;
  std::size_t timepoint = 0;
  ClassLabel truth = ClassLabel::control;
  ClassLabel predicted = ClassLabel::control;
  std::size_t sample_index = 0;  // index into the test list
};

struct ConfusionMatrix {
  std::size_t tp = 0, fn = 0, tn = 0, fp = 0;
};

inline ConfusionMatrix confusion(const std::vector<Prediction>& preds) {
  ConfusionMatrix m;
  for (const auto& p : preds) {
    if (p.truth == ClassLabel::patient) (p.predicted == ClassLabel::patient ? m.tp : m.fn)++;
    else (p.predicted == ClassLabel::control ? m.tn : m.fp)++;
  }
  return m;
}

/// Mean of per-class recalls; both classes must occur in the ground truth.
inline double balanced_accuracy(const ConfusionMatrix& m) {
  if (m.tp + m.fn == 0 || m.tn + m.fp == 0)
    throw DataError("balanced_accuracy: both classes must be present in the ground truth");
  const double sens = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn);
  const double spec = static_cast<double>(m.tn) / static_cast<double>(m.tn + m.fp);
  return (sens + spec) / 2;
}

inline double balanced_accuracy(const std::vector<Prediction>& preds) { return balanced_accuracy(confusion(preds)); }

/// Tracks the best validation loss; stop once `patience` consecutive epochs
/// fail to improve on it.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

  /// Returns true when `loss` is a new best.
  bool update(double loss, std::size_t epoch) {
    if (loss < best_) {
      best_ = loss;
      best_epoch_ = epoch;
      stale_ = 0;
      return true;
    }
    ++stale_;
    return false;
  }
  bool should_stop() const { return stale_ >= patience_; }
  double best() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }

 private:
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t best_epoch_ = 0;
  std::size_t stale_ = 0;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct RunResult {
  std::size_t run = 0;
  std::uint64_t seed = 0;
  Network<float> network;  // best-validation checkpoint
  std::vector<EpochMetrics> epochs;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  std::vector<Prediction> predictions;
  double balanced_accuracy = 0.0;
  bool failed = false;
  std::string failure;
};

struct TrainHooks {
  // May replace the validation loss the early-stopping monitor sees.
  std::function<double(std::size_t epoch, double val_loss)> on_validation;
  std::function<void(const EpochMetrics&)> on_epoch;
};

inline Tensor<float> stack_volumes(const std::vector<const VolumeSample*>& samples) {
  const Shape& s = samples.front()->volume.shape();
  Shape batch{samples.size()};
  batch.insert(batch.end(), s.begin(), s.end());
  Tensor<float> out(batch);
  const std::size_t n = samples.front()->volume.size();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i]->volume.shape() != s) throw ShapeError("stack_volumes: inconsistent sample shapes");
    std::copy(samples[i]->volume.data().begin(), samples[i]->volume.data().end(), out.ptr() + i * n);
  }
  return out;
}

/// Mean eval-mode cross-entropy and per-sample predicted classes.
inline std::pair<double, std::vector<std::size_t>> evaluate_samples(const Network<float>& net,
                                                                    const std::vector<VolumeSample>& samples,
                                                                    std::size_t chunk = 8) {
  double total = 0.0;
  std::vector<std::size_t> predicted;
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    std::vector<const VolumeSample*> part;
    std::vector<std::size_t> targets;
    for (std::size_t i = start; i < std::min(samples.size(), start + chunk); ++i) {
      part.push_back(&samples[i]);
      targets.push_back(static_cast<std::size_t>(samples[i].label));
    }
    const Tensor<float> logits = predict_logits(net, stack_volumes(part));
    const auto [loss, grad] = softmax_cross_entropy(logits, targets);
    total += loss * static_cast<double>(part.size());
    const std::size_t C = logits.extent(1);
    for (std::size_t n = 0; n < part.size(); ++n) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < C; ++c)
        if (logits[n * C + c] > logits[n * C + best]) best = c;
      predicted.push_back(best);
    }
  }
  return {samples.empty() ? 0.0 : total / static_cast<double>(samples.size()), predicted};
}

/// Trains one network from scratch. Seed drives initialization, batch
/// order, augmentation and dropout through independent derived streams.
/// Divergence yields a RunResult flagged failed rather than an exception.
inline RunResult train_once(const DatasetSplit& data, const NetworkSpec& spec, const TrainConfig& cfg,
                            std::uint64_t seed, std::size_t run_index = 0, const TrainHooks* hooks = nullptr) {
  cfg.validate();
  if (data.train.empty() || data.validation.empty() || data.test.empty())
    throw DataError(detail::concat("train_once: empty split (train ", data.train.size(), ", validation ",
                                   data.validation.size(), ", test ", data.test.size(), ")"));
  RunResult result;
  result.run = run_index;
  result.seed = seed;
  Network<float> net = build_network<float>(spec, seed);
  Rng shuffle_rng = make_rng(seed, "shuffle");
  Rng augment_rng = make_rng(seed, "augment");
  Rng dropout_rng = make_rng(seed, "dropout");
  auto params = net.parameters();
  AdamState<float> adam = AdamState<float>::zeros_like(params);
  EarlyStopping stopper(cfg.patience);
  Network<float> best = net;

  std::vector<std::size_t> order(data.train.size());
  try {
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      double train_total = 0.0;
      for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
        const std::size_t end = std::min(order.size(), start + cfg.batch_size);
        std::vector<VolumeSample> augmented;
        std::vector<std::size_t> targets;
        for (std::size_t i = start; i < end; ++i) {
          augmented.push_back(augment(data.train[order[i]], augment_rng, cfg));
          targets.push_back(static_cast<std::size_t>(data.train[order[i]].label));
        }
        std::vector<const VolumeSample*> ptrs;
        for (const auto& a : augmented) ptrs.push_back(&a);
        auto fwd = forward_train(net, stack_volumes(ptrs), dropout_rng);
        auto [loss, grad] = softmax_cross_entropy(fwd.logits, targets);
        if (!std::isfinite(loss)) throw RunError(detail::concat("non-finite training loss at epoch ", epoch));
        train_total += loss * static_cast<double>(end - start);
        const Gradients<float> grads = backward_params(net, fwd.trace, grad);
        adam_step(params, grads, adam, cfg);
      }
      EpochMetrics m;
      m.epoch = epoch;
      m.train_loss = train_total / static_cast<double>(order.size());
      m.val_loss = evaluate_samples(net, data.validation).first;
      if (!std::isfinite(m.val_loss)) throw RunError(detail::concat("non-finite validation loss at epoch ", epoch));
      if (hooks && hooks->on_validation) m.val_loss = hooks->on_validation(epoch, m.val_loss);
      result.epochs.push_back(m);
      if (hooks && hooks->on_epoch) hooks->on_epoch(m);
      if (stopper.update(m.val_loss, epoch)) best = net;
      if (stopper.should_stop()) break;
    }
  } catch (const RunError& e) {
    result.failed = true;
    result.failure = e.what();
    result.network = std::move(best);
    return result;
  }

  result.network = std::move(best);
  result.best_epoch = stopper.best_epoch();
  result.best_val_loss = stopper.best();
  const auto predicted = evaluate_samples(result.network, data.test).second;
  for (std::size_t i = 0; i < data.test.size(); ++i) {
    Prediction p;
    p.subject_id = data.test[i].subject_id;
    p.timepoint = data.test[i].timepoint;
    p.truth = data.test[i].label;
    p.predicted = static_cast<ClassLabel>(predicted[i]);
    p.sample_index = i;
    result.predictions.push_back(std::move(p));
  }
  result.balanced_accuracy = balanced_accuracy(result.predictions);
  return result;
}

struct AccuracySummary {
  double mean = 0.0, min = 0.0, max = 0.0;
  std::size_t runs = 0;  // non-failed runs included
};

inline AccuracySummary summarize_accuracy(const std::vector<double>& values) {
  AccuracySummary s;
  if (values.empty()) return s;
  s.runs = values.size();
  s.min = *std::min_element(values.begin(), values.end());
  s.max = *std::max_element(values.begin(), values.end());
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  return s;
}

inline AccuracySummary summarize_accuracy(const std::vector<RunResult>& runs) {
  std::vector<double> v;
  for (const auto& r : runs)
    if (!r.failed) v.push_back(r.balanced_accuracy);
  return summarize_accuracy(v);
}

/// Runs cfg.repetitions independent trainings; run i is seeded with
/// base_seed + i. Runs execute in parallel and never abort each other.
inline std::vector<RunResult> train_repeated(const DatasetSplit& data, const NetworkSpec& spec,
                                             const TrainConfig& cfg, const std::vector<std::size_t>& run_indices = {},
                                             std::size_t workers = worker_count()) {
  cfg.validate();
  std::vector<std::size_t> runs = run_indices;
  if (runs.empty()) {
    runs.resize(cfg.repetitions);
    std::iota(runs.begin(), runs.end(), std::size_t{0});
  }
  std::vector<RunResult> results(runs.size());
  parallel_for(
      runs.size(),
      [&](std::size_t k) {
        try {
          results[k] = train_once(data, spec, cfg, cfg.base_seed + runs[k], runs[k]);
        } catch (const Error& e) {
          results[k].run = runs[k];
          results[k].seed = cfg.base_seed + runs[k];
          results[k].failed = true;
          results[k].failure = e.what();
        }
      },
      workers);
  return results;
}

/// FNV-1a over every parameter and buffer byte.
template <typename T>
std::uint64_t parameter_hash(const Network<T>& net) {
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&](const Tensor<T>* t) {
    const auto* p = reinterpret_cast<const unsigned char*>(t->ptr());
    for (std::size_t i = 0; i < t->size() * sizeof(T); ++i) h = (h ^ p[i]) * 1099511628211ULL;
  };
  for (const auto* t : net.parameters()) feed(t);
  for (const auto* t : net.buffers()) feed(t);
  return h;
}

}  // namespace arob
