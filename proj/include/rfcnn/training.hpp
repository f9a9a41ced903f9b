#pragma once

// Training loop: Adam, optional mixup, optional random time crops, per-epoch
// evaluation in eval mode and mean/std over the last `eval_window` epochs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "rfcnn/checkpoint.hpp"
#include "rfcnn/data.hpp"
#include "rfcnn/metrics.hpp"
#include "rfcnn/optim.hpp"

namespace rfcnn {

struct TrainConfig {
  int epochs = 150;
  int batch_size = 32;
  double learning_rate = 1e-4;
  bool mixup_enabled = false;
  double mixup_concentration = 0.2;
  std::uint64_t seed = 0;
  int eval_window = 10;
  std::size_t crop_frames = 0;  // 0 = use whole clips
  int checkpoint_every = 10;    // 0 = only at the last epoch
  double threshold = 0.5;

  void validate() const {
    if (epochs < 1) throw ArgumentError("epochs must be >= 1");
    if (batch_size < 1) throw ArgumentError("batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ArgumentError("learning_rate must be positive");
    if (eval_window < 1 || eval_window > epochs) throw ArgumentError("eval_window must lie in [1, epochs]");
    if (mixup_enabled && !(mixup_concentration > 0.0)) throw ArgumentError("mixup_concentration must be positive");
    if (checkpoint_every < 0) throw ArgumentError("checkpoint_every must be >= 0");
    if (!(threshold > 0.0 && threshold < 1.0)) throw ArgumentError("threshold must lie in (0,1)");
  }
};

/// A batch in model layout: inputs [N,1,F,T], targets and masks [N,C].
struct Batch {
  std::size_t size = 0, n_bins = 0, n_frames = 0, n_classes = 0;
  std::vector<float> inputs;
  std::vector<float> targets;
  std::vector<std::uint8_t> mask;

  Tensor<float> input_tensor() const { return Tensor<float>({size, 1, n_bins, n_frames}, inputs); }
};

inline Batch make_batch(const std::vector<const Sample*>& samples, std::size_t n_classes) {
  if (samples.empty()) throw ArgumentError("make_batch: no samples");
  Batch b;
  b.size = samples.size();
  b.n_bins = samples.front()->n_bins;
  b.n_frames = samples.front()->n_frames;
  b.n_classes = n_classes;
  for (const Sample* s : samples) {
    if (s->n_bins != b.n_bins || s->n_frames != b.n_frames) {
      throw DimensionError("make_batch: sample '" + s->id + "' has different extents");
    }
    if (s->labels.size() != n_classes || s->mask.size() != n_classes) {
      throw DimensionError("make_batch: sample '" + s->id + "' has the wrong label count");
    }
    b.inputs.insert(b.inputs.end(), s->values.begin(), s->values.end());
    b.targets.insert(b.targets.end(), s->labels.begin(), s->labels.end());
    b.mask.insert(b.mask.end(), s->mask.begin(), s->mask.end());
  }
  return b;
}

/// x = lam*x1 + (1-lam)*x2, y likewise; the unknown-label mask of the mix is
/// the union of both unknown masks.
struct MixedPair {
  std::vector<float> x;
  std::vector<float> y;
  std::vector<std::uint8_t> mask;
};

inline MixedPair mixup_batch(std::span<const float> x1, std::span<const float> y1, std::span<const float> x2,
                             std::span<const float> y2, double lam, std::span<const std::uint8_t> m1 = {},
                             std::span<const std::uint8_t> m2 = {}) {
  if (!(lam >= 0.0 && lam <= 1.0)) throw ArgumentError("mixup: lambda must lie in [0,1]");
  if (x1.size() != x2.size() || y1.size() != y2.size()) throw DimensionError("mixup: pair shapes differ");
  if (m1.size() != m2.size() || (!m1.empty() && m1.size() != y1.size())) throw DimensionError("mixup: mask shapes differ");
  MixedPair out;
  const float l = static_cast<float>(lam), r = static_cast<float>(1.0 - lam);
  out.x.resize(x1.size());
  for (std::size_t i = 0; i < x1.size(); ++i) out.x[i] = l * x1[i] + r * x2[i];
  out.y.resize(y1.size());
  for (std::size_t i = 0; i < y1.size(); ++i) out.y[i] = l * y1[i] + r * y2[i];
  out.mask.resize(m1.size());
  for (std::size_t i = 0; i < m1.size(); ++i) out.mask[i] = (m1[i] != 0 && m2[i] != 0) ? 1 : 0;
  return out;
}

inline double sample_mixup_lambda(RngStream& rng, double concentration) {
  if (!(concentration > 0.0)) throw ArgumentError("mixup concentration must be positive");
  return rng.beta(concentration, concentration);
}

/// Mixes each sample with a randomly permuted partner, one lambda per sample.
inline void apply_mixup(Batch& b, RngStream& rng, double concentration) {
  std::vector<std::size_t> perm(b.size);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  rng.shuffle(perm.begin(), perm.end());
  const auto in_sz = b.n_bins * b.n_frames, C = b.n_classes;
  Batch mixed = b;
  for (std::size_t i = 0; i < b.size; ++i) {
    const auto j = perm[i];
    const double lam = sample_mixup_lambda(rng, concentration);
    auto m = mixup_batch(std::span<const float>(b.inputs).subspan(i * in_sz, in_sz),
                         std::span<const float>(b.targets).subspan(i * C, C),
                         std::span<const float>(b.inputs).subspan(j * in_sz, in_sz),
                         std::span<const float>(b.targets).subspan(j * C, C), lam,
                         std::span<const std::uint8_t>(b.mask).subspan(i * C, C),
                         std::span<const std::uint8_t>(b.mask).subspan(j * C, C));
    std::copy(m.x.begin(), m.x.end(), mixed.inputs.begin() + static_cast<std::ptrdiff_t>(i * in_sz));
    std::copy(m.y.begin(), m.y.end(), mixed.targets.begin() + static_cast<std::ptrdiff_t>(i * C));
    std::copy(m.mask.begin(), m.mask.end(), mixed.mask.begin() + static_cast<std::ptrdiff_t>(i * C));
  }
  b = std::move(mixed);
}

struct EvalResult {
  double loss = 0.0;
  MetricsReport metrics;
  PredictionSet predictions;
};

/// Eval-mode pass over a split: no graph, batchnorm running stats and Shake
/// coefficients untouched. Soft labels are binarized at 0.5 for metrics.
inline EvalResult evaluate(Model<float>& model, const std::vector<Sample>& split, std::size_t n_classes,
                           int batch_size, double threshold = 0.5, std::ostream* warn = nullptr) {
  if (split.empty()) throw ArgumentError("evaluate: empty split");
  NoGradGuard guard;
  EvalResult r;
  r.predictions.n_samples = split.size();
  r.predictions.n_classes = n_classes;
  double loss_sum = 0.0;
  std::size_t known = 0;
  for (std::size_t start = 0; start < split.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto stop = std::min(split.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<const Sample*> ptrs;
    for (auto i = start; i < stop; ++i) ptrs.push_back(&split[i]);
    const auto batch = make_batch(ptrs, n_classes);
    const auto logits = model.forward(batch.input_tensor(), Mode::Eval);
    const auto n_known = static_cast<std::size_t>(std::count(batch.mask.begin(), batch.mask.end(), std::uint8_t{1}));
    if (n_known > 0) {
      loss_sum += static_cast<double>(bce_with_logits<float>(logits, batch.targets, batch.mask).item()) *
                  static_cast<double>(n_known);
      known += n_known;
    }
    for (std::size_t i = 0; i < logits.numel(); ++i) {
      r.predictions.scores.push_back(static_cast<double>(stable_sigmoid(logits.values()[i])));
      r.predictions.labels.push_back(batch.targets[i] >= 0.5f ? 1 : 0);
      r.predictions.mask.push_back(batch.mask[i]);
    }
  }
  if (known == 0) throw EmptyLossError("evaluate: every label in the split is masked");
  r.loss = loss_sum / static_cast<double>(known);
  r.metrics = evaluate_metrics(r.predictions, threshold, warn);
  return r;
}

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double test_loss = 0.0;
  double macro_pr_auc = 0.0;
  double f1_classical = 0.0;
  double f1_posneg = 0.0;
};

struct WindowStat {
  double mean = 0.0;
  double std = 0.0;
};

/// Mean and population standard deviation.
inline WindowStat window_stat(std::span<const double> values) {
  if (values.empty()) throw ArgumentError("window_stat: empty window");
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / static_cast<double>(values.size()))};
}

struct TrainReport {
  std::vector<EpochRecord> history;
  int eval_window = 10;
  WindowStat train_loss, test_loss, macro_pr_auc, f1_classical, f1_posneg;
};

inline TrainReport summarize(std::vector<EpochRecord> history, int eval_window) {
  TrainReport r;
  r.history = std::move(history);
  r.eval_window = eval_window;
  const auto n = r.history.size();
  const auto w = std::min<std::size_t>(n, static_cast<std::size_t>(eval_window));
  auto stat = [&](double EpochRecord::*field) {
    std::vector<double> v;
    for (std::size_t i = n - w; i < n; ++i) v.push_back(r.history[i].*field);
    return window_stat(v);
  };
  r.train_loss = stat(&EpochRecord::train_loss);
  r.test_loss = stat(&EpochRecord::test_loss);
  r.macro_pr_auc = stat(&EpochRecord::macro_pr_auc);
  r.f1_classical = stat(&EpochRecord::f1_classical);
  r.f1_posneg = stat(&EpochRecord::f1_posneg);
  return r;
}

struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
  /// Called with the epoch number (1-based) whenever a checkpoint is due;
  /// the final epoch always triggers it.
  std::function<void(int epoch, ModelState<float>&)> on_checkpoint;
  std::ostream* warn = nullptr;
};

inline TrainReport train(ModelState<float>& state, const TaggingDataset& data, const TrainConfig& cfg,
                         const TrainHooks& hooks = {}) {
  cfg.validate();
  if (data.train.empty()) throw ArgumentError("train: empty training split");
  if (data.test.empty()) throw ArgumentError("train: empty test split");

  // Streams are keyed by purpose so the data order, augmentation and Shake
  // draws never depend on each other.
  const RngStream root(cfg.seed);
  const RngStream order_rng = root.split(11), aug_rng = root.split(12), shake_rng = root.split(13);
  const AdamConfig adam{cfg.learning_rate, 0.9, 0.999, 1e-8};
  auto& model = state.model;

  std::vector<EpochRecord> history;
  std::vector<std::size_t> order(data.train.size());
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto epoch_order = order_rng.split(static_cast<std::uint64_t>(epoch));
    epoch_order.shuffle(order.begin(), order.end());

    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const auto stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const std::uint64_t step = state.adam.step_count + 1;
      auto step_aug = aug_rng.split(step);

      std::vector<Sample> cropped;
      std::vector<const Sample*> ptrs;
      if (cfg.crop_frames > 0) {
        cropped.reserve(stop - start);
        for (auto i = start; i < stop; ++i) cropped.push_back(random_crop(data.train[order[i]], cfg.crop_frames, step_aug));
        for (const auto& s : cropped) ptrs.push_back(&s);
      } else {
        for (auto i = start; i < stop; ++i) ptrs.push_back(&data.train[order[i]]);
      }
      auto batch = make_batch(ptrs, data.n_classes);
      if (cfg.mixup_enabled) apply_mixup(batch, step_aug, cfg.mixup_concentration);

      model.zero_grad();
      auto logits = model.forward(batch.input_tensor(), Mode::Train, shake_rng.split(step).seed());
      auto loss = bce_with_logits<float>(logits, batch.targets, batch.mask);
      const double lv = loss.item();
      if (!std::isfinite(lv)) throw TrainingDivergedError("non-finite training loss at epoch " + std::to_string(epoch), step);
      backward(loss);
      adam_step(state, adam);
      loss_sum += lv;
      ++batches;
    }

    const auto eval = evaluate(model, data.test, data.n_classes, cfg.batch_size, cfg.threshold, hooks.warn);
    if (!std::isfinite(eval.loss)) {
      throw TrainingDivergedError("non-finite test loss at epoch " + std::to_string(epoch), state.adam.step_count);
    }
    EpochRecord rec{epoch,
                    batches ? loss_sum / static_cast<double>(batches) : 0.0,
                    eval.loss,
                    eval.metrics.macro_pr_auc,
                    eval.metrics.macro_f1_classical,
                    eval.metrics.macro_f1_posneg};
    history.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
    const bool due = epoch == cfg.epochs || (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0);
    if (due && hooks.on_checkpoint) hooks.on_checkpoint(epoch, state);
  }
  return summarize(std::move(history), cfg.eval_window);
}

}  // namespace rfcnn
