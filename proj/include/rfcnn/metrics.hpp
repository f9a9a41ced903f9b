#pragma once

// Multi-label evaluation: per-class average precision (PR-AUC), and the two
// macro F-score conventions in use for instrument tagging:
//   classical  - F1 of the positive class per label, averaged over labels
//   pos/neg    - mean of positive-class and negative-class F1 per label,
//                averaged over labels

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <iostream>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "rfcnn/errors.hpp"

namespace rfcnn {

/// Row-major [n_samples x n_classes] scores, binary labels and a known-mask.
struct PredictionSet {
  std::size_t n_samples = 0;
  std::size_t n_classes = 0;
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
  std::vector<std::uint8_t> mask;  // 1 = known; empty means all known

  bool known(std::size_t s, std::size_t c) const { return mask.empty() || mask[s * n_classes + c] != 0; }

  void validate() const {
    const auto n = n_samples * n_classes;
    if (scores.size() != n || labels.size() != n || (!mask.empty() && mask.size() != n)) {
      throw DimensionError("PredictionSet: matrix sizes do not match n_samples x n_classes");
    }
    for (double s : scores) {
      if (!(s >= 0.0 && s <= 1.0)) throw ArgumentError("PredictionSet: scores must lie in [0,1]");
    }
  }

  /// Known (score, label) pairs of one class.
  void column(std::size_t c, std::vector<double>& s, std::vector<std::uint8_t>& y) const {
    s.clear();
    y.clear();
    for (std::size_t i = 0; i < n_samples; ++i) {
      if (!known(i, c)) continue;
      s.push_back(scores[i * n_classes + c]);
      y.push_back(labels[i * n_classes + c]);
    }
  }
};

struct MetricsReport {
  std::vector<double> per_class_ap;  // NaN for classes without a defined AP
  double macro_pr_auc = 0.0;
  double macro_f1_classical = 0.0;
  double macro_f1_posneg = 0.0;
  double threshold = 0.5;
  std::size_t defined_classes = 0;
};

/// Step-wise average precision: sum over descending score groups of
/// (recall gain) * (precision at that group). Tied scores form one group.
inline double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw DimensionError("average_precision: scores/labels length mismatch");
  const auto positives = static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](auto v) { return v != 0; }));
  if (positives == 0) throw UndefinedClassError("average_precision: no positive labels");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0;
  std::size_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i, group_pos = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      group_pos += labels[order[j]] != 0;
      ++j;
    }
    tp += group_pos;
    seen += j - i;
    if (group_pos > 0) {
      ap += (static_cast<double>(group_pos) / static_cast<double>(positives)) *
            (static_cast<double>(tp) / static_cast<double>(seen));
    }
    i = j;
  }
  return ap;
}

namespace detail {

struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

inline double f1(std::size_t tp, std::size_t fp, std::size_t fn) {
  const auto denom = 2 * tp + fp + fn;
  return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

inline Confusion confusion(const PredictionSet& p, std::size_t c, double threshold) {
  Confusion m;
  for (std::size_t i = 0; i < p.n_samples; ++i) {
    if (!p.known(i, c)) continue;
    const bool pred = p.scores[i * p.n_classes + c] >= threshold;
    const bool truth = p.labels[i * p.n_classes + c] != 0;
    if (pred && truth) ++m.tp;
    else if (pred) ++m.fp;
    else if (truth) ++m.fn;
    else ++m.tn;
  }
  return m;
}

inline bool has_known(const PredictionSet& p, std::size_t c) {
  for (std::size_t i = 0; i < p.n_samples; ++i) {
    if (p.known(i, c)) return true;
  }
  return false;
}

inline void check_threshold(double t) {
  if (!(t > 0.0 && t < 1.0)) throw ArgumentError("F-score threshold must lie in (0,1)");
}

}  // namespace detail

/// Per-class AP; NaN marks classes lacking a known positive or negative.
inline std::vector<double> per_class_average_precision(const PredictionSet& preds, std::ostream* warn = nullptr) {
  preds.validate();
  std::vector<double> out(preds.n_classes, std::numeric_limits<double>::quiet_NaN());
  std::vector<double> s;
  std::vector<std::uint8_t> y;
  for (std::size_t c = 0; c < preds.n_classes; ++c) {
    preds.column(c, s, y);
    const auto pos = std::count(y.begin(), y.end(), std::uint8_t{1});
    if (pos == 0 || pos == static_cast<std::ptrdiff_t>(y.size())) {
      if (warn) *warn << "warning: class " << c << " has no known " << (pos == 0 ? "positives" : "negatives")
                      << "; excluded from macro PR-AUC\n";
      continue;
    }
    out[c] = average_precision(s, y);
  }
  return out;
}

inline double macro_pr_auc(const PredictionSet& preds, std::ostream* warn = nullptr) {
  const auto ap = per_class_average_precision(preds, warn);
  double total = 0.0;
  std::size_t n = 0;
  for (double v : ap) {
    if (v == v) {
      total += v;
      ++n;
    }
  }
  if (n == 0) throw MetricError("macro_pr_auc: no class has a defined average precision");
  return total / static_cast<double>(n);
}

inline double f1_classical(const PredictionSet& preds, double threshold = 0.5) {
  preds.validate();
  detail::check_threshold(threshold);
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < preds.n_classes; ++c) {
    if (!detail::has_known(preds, c)) continue;
    const auto m = detail::confusion(preds, c, threshold);
    total += detail::f1(m.tp, m.fp, m.fn);
    ++n;
  }
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

inline double f1_posneg(const PredictionSet& preds, double threshold = 0.5) {
  preds.validate();
  detail::check_threshold(threshold);
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < preds.n_classes; ++c) {
    if (!detail::has_known(preds, c)) continue;
    const auto m = detail::confusion(preds, c, threshold);
    // The negative class swaps roles: its TP is our TN, its FP our FN.
    total += 0.5 * (detail::f1(m.tp, m.fp, m.fn) + detail::f1(m.tn, m.fn, m.fp));
    ++n;
  }
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

inline MetricsReport evaluate_metrics(const PredictionSet& preds, double threshold = 0.5, std::ostream* warn = nullptr) {
  MetricsReport r;
  r.threshold = threshold;
  r.per_class_ap = per_class_average_precision(preds, warn);
  double total = 0.0;
  for (double v : r.per_class_ap) {
    if (v == v) {
      total += v;
      ++r.defined_classes;
    }
  }
  if (r.defined_classes == 0) throw MetricError("no class has a defined average precision");
  r.macro_pr_auc = total / static_cast<double>(r.defined_classes);
  r.macro_f1_classical = f1_classical(preds, threshold);
  r.macro_f1_posneg = f1_posneg(preds, threshold);
  return r;
}

inline void write_metrics_csv_header(std::ostream& os) { os << "run_id,epoch,rf,arch,metric_name,value\n"; }

struct MetricRow {
  std::string run_id;
  int epoch = 0;
  std::int64_t rf = 0;
  std::string arch;
  std::string metric_name;
  double value = 0.0;
};

inline void write_metric_row(std::ostream& os, const MetricRow& row) {
  const auto old = os.precision(17);
  os << row.run_id << ',' << row.epoch << ',' << row.rf << ',' << row.arch << ',' << row.metric_name << ','
     << row.value << '\n';
  os.precision(old);
}

}  // namespace rfcnn
