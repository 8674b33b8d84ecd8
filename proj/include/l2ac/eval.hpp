#pragma once

// Class-balanced metrics: confusion matrix, balanced accuracy (bACC),
// geometric mean of recalls (GM), pseudo-label recall and the averaged
// predicted class distribution.

#include "l2ac/data.hpp"
#include "l2ac/model.hpp"
#include "l2ac/numcore.hpp"

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace l2ac {

/// counts[t][p]: samples of true class t predicted as p.
struct ConfusionMatrix {
  std::vector<std::vector<long long>> counts;

  explicit ConfusionMatrix(int num_classes = 0)
      : counts(static_cast<std::size_t>(num_classes), std::vector<long long>(static_cast<std::size_t>(num_classes), 0)) {}

  int num_classes() const { return static_cast<int>(counts.size()); }
  long long row_total(int k) const {
    long long s = 0;
    for (long long c : counts[static_cast<std::size_t>(k)]) s += c;
    return s;
  }
  long long total() const {
    long long s = 0;
    for (int k = 0; k < num_classes(); ++k) s += row_total(k);
    return s;
  }
  ConfusionMatrix& operator+=(const ConfusionMatrix& other) {
    require(other.num_classes() == num_classes(), "ConfusionMatrix: class count mismatch");
    for (std::size_t t = 0; t < counts.size(); ++t)
      for (std::size_t p = 0; p < counts.size(); ++p) counts[t][p] += other.counts[t][p];
    return *this;
  }
  bool operator==(const ConfusionMatrix&) const = default;
};

inline ConfusionMatrix confusion(std::span<const int> true_labels, std::span<const int> predicted, int num_classes) {
  require(true_labels.size() == predicted.size(), "confusion: label count mismatch");
  ConfusionMatrix cm(num_classes);
  for (std::size_t i = 0; i < true_labels.size(); ++i) {
    const int t = true_labels[i], p = predicted[i];
    if (t < 0 || t >= num_classes || p < 0 || p >= num_classes) {
      throw Error("confusion: label out of range at sample " + std::to_string(i));
    }
    ++cm.counts[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)];
  }
  return cm;
}

inline std::vector<double> per_class_recall(const ConfusionMatrix& cm) {
  std::vector<double> recall(static_cast<std::size_t>(cm.num_classes()));
  for (int k = 0; k < cm.num_classes(); ++k) {
    const long long n = cm.row_total(k);
    if (n == 0) throw Error("per_class_recall: class " + std::to_string(k) + " has no samples");
    recall[static_cast<std::size_t>(k)] =
        static_cast<double>(cm.counts[static_cast<std::size_t>(k)][static_cast<std::size_t>(k)]) / static_cast<double>(n);
  }
  return recall;
}

inline double balanced_accuracy(const ConfusionMatrix& cm) {
  const auto recall = per_class_recall(cm);
  double s = 0.0;
  for (double r : recall) s += r;
  return s / static_cast<double>(recall.size());
}

/// (prod_k recall_k)^(1/K), exactly 0 when any recall is 0.
inline double geometric_mean(const ConfusionMatrix& cm) {
  const auto recall = per_class_recall(cm);
  double log_sum = 0.0;
  for (double r : recall) {
    if (r == 0.0) return 0.0;
    log_sum += std::log(r);
  }
  return std::exp(log_sum / static_cast<double>(recall.size()));
}

inline double plain_accuracy(const ConfusionMatrix& cm) {
  long long hit = 0;
  for (int k = 0; k < cm.num_classes(); ++k) hit += cm.counts[static_cast<std::size_t>(k)][static_cast<std::size_t>(k)];
  const long long n = cm.total();
  return n == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(n);
}

/// Recall of hard pseudo-labels against the hidden truth, counting only rows
/// that passed the confidence mask. Classes with no such rows are nullopt.
inline std::vector<std::optional<double>> pseudo_label_recall(std::span<const int> true_labels,
                                                              std::span<const int> pseudo_labels,
                                                              std::span<const double> mask_weights, int num_classes) {
  require(true_labels.size() == pseudo_labels.size() && true_labels.size() == mask_weights.size(),
          "pseudo_label_recall: length mismatch");
  std::vector<long long> seen(static_cast<std::size_t>(num_classes), 0), hit(static_cast<std::size_t>(num_classes), 0);
  for (std::size_t i = 0; i < true_labels.size(); ++i) {
    if (mask_weights[i] <= 0.0) continue;
    const auto t = static_cast<std::size_t>(true_labels[i]);
    ++seen.at(t);
    if (pseudo_labels[i] == true_labels[i]) ++hit[t];
  }
  std::vector<std::optional<double>> out(static_cast<std::size_t>(num_classes));
  for (std::size_t k = 0; k < out.size(); ++k) {
    if (seen[k] > 0) out[k] = static_cast<double>(hit[k]) / static_cast<double>(seen[k]);
  }
  return out;
}

/// Mean of the softmax rows.
inline std::vector<double> predicted_distribution(const Matrix& logits) {
  require(logits.rows() > 0, "predicted_distribution: empty set");
  const RowVector mean = softmax(logits).colwise().mean();
  return {mean.data(), mean.data() + mean.size()};
}

struct MetricsReport {
  double bacc = 0.0;
  double gm = 0.0;
  double acc = 0.0;
  std::vector<double> per_class_recall;
  std::vector<double> predicted_distribution;
  std::vector<std::optional<double>> pseudo_recall;  // empty when not computed
  ConfusionMatrix confusion;
};

inline MetricsReport make_report(const ConfusionMatrix& cm, const Matrix& logits) {
  MetricsReport r;
  r.confusion = cm;
  r.per_class_recall = per_class_recall(cm);
  r.bacc = balanced_accuracy(cm);
  r.gm = geometric_mean(cm);
  r.acc = plain_accuracy(cm);
  r.predicted_distribution = predicted_distribution(logits);
  return r;
}

/// Scores the test-time classifier (attractor removed) on a labeled set.
inline MetricsReport evaluate(const ModelState& state, const Dataset& test, bool use_ema) {
  require(!test.empty(), "evaluate: empty test set");
  require(test.fully_labeled(), "evaluate: test set must be fully labeled");
  const Matrix logits = forward_eval(test.features(), state, use_ema);
  const auto predicted = predict(logits);
  return make_report(confusion(test.labels(), predicted, test.num_classes()), logits);
}

/// Element-wise mean of several reports (the headline number averages the
/// last E evaluations). Confusion counts are summed.
inline MetricsReport average_reports(std::span<const MetricsReport> reports) {
  require(!reports.empty(), "average_reports: nothing to average");
  MetricsReport out = reports.front();
  const double n = static_cast<double>(reports.size());
  for (std::size_t i = 1; i < reports.size(); ++i) {
    const auto& r = reports[i];
    out.bacc += r.bacc;
    out.gm += r.gm;
    out.acc += r.acc;
    for (std::size_t k = 0; k < out.per_class_recall.size(); ++k) {
      out.per_class_recall[k] += r.per_class_recall[k];
      out.predicted_distribution[k] += r.predicted_distribution[k];
    }
    out.confusion += r.confusion;
  }
  out.bacc /= n;
  out.gm /= n;
  out.acc /= n;
  for (std::size_t k = 0; k < out.per_class_recall.size(); ++k) {
    out.per_class_recall[k] /= n;
    out.predicted_distribution[k] /= n;
  }
  return out;
}

inline double min_recall(const MetricsReport& r) {
  double m = 1.0;
  for (double v : r.per_class_recall) m = std::min(m, v);
  return m;
}

}  // namespace l2ac
