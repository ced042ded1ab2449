#pragma once

// Binary classification metrics referenced to the Present class.
//
// Ratios whose denominator is zero are reported as undefined (std::nullopt)
// rather than 0 or an exception, so per-epoch curve emission never aborts.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cardiolens/label.hpp"

namespace cardiolens::metrics {

struct ConfusionMatrix {
  std::uint64_t tp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;

  std::uint64_t total() const { return tp + tn + fp + fn; }
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

inline ConfusionMatrix confusion_matrix(std::span<const Label> predicted, std::span<const Label> truth) {
  if (predicted.size() != truth.size())
    throw std::invalid_argument("confusion_matrix: " + std::to_string(predicted.size()) + " predictions vs " +
                                std::to_string(truth.size()) + " labels");
  if (predicted.empty()) throw std::invalid_argument("confusion_matrix: empty input");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const bool p = predicted[i] == Label::kPresent;
    const bool t = truth[i] == Label::kPresent;
    if (p && t) ++cm.tp;
    else if (!p && !t) ++cm.tn;
    else if (p) ++cm.fp;
    else ++cm.fn;
  }
  return cm;
}

using Metric = std::optional<double>;

inline Metric ratio(std::uint64_t num, std::uint64_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

struct MetricReport {
  Metric accuracy;
  Metric precision;
  Metric recall;
  Metric specificity;
  Metric sensitivity;
  Metric f1;
  Metric dice;
  Metric auc;
};

/// 2 tp / (2 tp + fp + fn)
inline Metric dice(const ConfusionMatrix& cm) { return ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn); }

/// Everything except AUC, which needs scores.
inline MetricReport scalar_metrics(const ConfusionMatrix& cm) {
  MetricReport r;
  r.accuracy = ratio(cm.tp + cm.tn, cm.total());
  r.precision = ratio(cm.tp, cm.tp + cm.fp);
  r.recall = ratio(cm.tp, cm.tp + cm.fn);
  r.sensitivity = r.recall;
  r.specificity = ratio(cm.tn, cm.tn + cm.fp);
  if (r.precision && r.recall && (*r.precision + *r.recall) > 0.0)
    r.f1 = 2.0 * *r.precision * *r.recall / (*r.precision + *r.recall);
  else if (r.precision && r.recall)
    r.f1 = 0.0;
  r.dice = dice(cm);
  return r;
}

/// Area under the ROC curve as the Mann-Whitney statistic: the fraction of
/// (positive, negative) pairs where the positive scores higher, ties counting
/// one half. Computed from midranks in O(n log n).
inline double roc_auc(std::span<const double> scores, std::span<const Label> truth) {
  if (scores.size() != truth.size()) throw std::invalid_argument("roc_auc: score/label length mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::uint64_t n_pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k)
      if (truth[order[k]] == Label::kPresent) {
        pos_rank_sum += midrank;
        ++n_pos;
      }
    i = j;
  }
  const std::uint64_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("roc_auc: need at least one positive and one negative");
  const double np = static_cast<double>(n_pos);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

/// AUC, or undefined when only one class is present.
inline Metric roc_auc_or_undefined(std::span<const double> scores, std::span<const Label> truth) {
  const auto pos = std::count(truth.begin(), truth.end(), Label::kPresent);
  if (pos == 0 || pos == static_cast<long>(truth.size())) return std::nullopt;
  return roc_auc(scores, truth);
}

inline constexpr const char* kMetricCsvHeader = "accuracy,precision,recall,specificity,sensitivity,f1,dice,auc";

inline std::string format_metric(const Metric& m) {
  if (!m) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", *m);
  return buf;
}

inline std::string to_csv_row(const MetricReport& r) {
  std::string out;
  for (const Metric* m : {&r.accuracy, &r.precision, &r.recall, &r.specificity, &r.sensitivity, &r.f1, &r.dice, &r.auc}) {
    if (!out.empty()) out += ',';
    out += format_metric(*m);
  }
  return out;
}

}  // namespace cardiolens::metrics
