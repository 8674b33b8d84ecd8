#pragma once

// Imbalanced class-count recipes, a synthetic Gaussian-mixture generator,
// labeled/unlabeled splitting, class-aware balanced sampling and CSV I/O.

#include "l2ac/numcore.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace l2ac {

inline constexpr int kUnlabeled = -1;

enum class ProfileKind { longtail, step, reversed_longtail, uniform };

inline std::string to_string(ProfileKind kind) {
  switch (kind) {
    case ProfileKind::longtail: return "longtail";
    case ProfileKind::step: return "step";
    case ProfileKind::reversed_longtail: return "reversed_longtail";
    case ProfileKind::uniform: return "uniform";
  }
  return "?";
}

inline ProfileKind parse_profile_kind(std::string_view name) {
  if (name == "longtail") return ProfileKind::longtail;
  if (name == "step") return ProfileKind::step;
  if (name == "reversed_longtail" || name == "reversed") return ProfileKind::reversed_longtail;
  if (name == "uniform") return ProfileKind::uniform;
  throw Error("unknown imbalance profile '" + std::string(name) + "'");
}

/// Per-class count recipe. n1 is the size of the largest class; gamma is the
/// ratio between largest and smallest class.
struct ImbalanceProfile {
  ProfileKind kind = ProfileKind::longtail;
  double gamma = 1.0;
  int n1 = 0;
  int num_classes = 0;

  bool operator==(const ImbalanceProfile&) const = default;
};

/// Class sizes for a profile. Class 0 is the head of a long tail:
/// counts[k] = max(1, floor(n1 / gamma^(k/(K-1)))). reversed_longtail mirrors
/// that; step gives the first ceil(K/2) classes n1 and the rest n1/gamma.
inline std::vector<int> class_counts(const ImbalanceProfile& profile) {
  require(profile.gamma >= 1.0, "class_counts: gamma must be >= 1");
  require(profile.num_classes >= 1, "class_counts: need at least one class");
  require(profile.n1 >= 1, "class_counts: n1 must be >= 1");
  const int classes = profile.num_classes;
  // The 1e-9 slack absorbs pow() rounding so exact quotients floor correctly.
  auto floored = [](double value) { return std::max(1, static_cast<int>(std::floor(value + 1e-9))); };
  std::vector<int> counts(static_cast<std::size_t>(classes), profile.n1);
  switch (profile.kind) {
    case ProfileKind::uniform:
      break;
    case ProfileKind::longtail:
    case ProfileKind::reversed_longtail:
      if (classes > 1) {
        for (int k = 0; k < classes; ++k) {
          const double exponent = static_cast<double>(k) / static_cast<double>(classes - 1);
          counts[static_cast<std::size_t>(k)] = floored(profile.n1 / std::pow(profile.gamma, exponent));
        }
      }
      if (profile.kind == ProfileKind::reversed_longtail) std::reverse(counts.begin(), counts.end());
      break;
    case ProfileKind::step: {
      const int head = (classes + 1) / 2;
      for (int k = head; k < classes; ++k) {
        counts[static_cast<std::size_t>(k)] = floored(profile.n1 / profile.gamma);
      }
      break;
    }
  }
  return counts;
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// Read-only slice of a dataset that the trainer is allowed to see: features
/// and observed labels, never the hidden ground truth.
struct TrainingView {
  const Matrix* features = nullptr;
  std::span<const int> labels;
  int num_classes = 0;

  Eigen::Index rows() const { return features ? features->rows() : 0; }
};

/// Feature rows with observed labels (kUnlabeled for unlabeled rows) and the
/// hidden true labels, which exist for diagnostics only.
class Dataset {
 public:
  Dataset() = default;
  Dataset(Matrix features, std::vector<int> labels, std::vector<int> true_labels, int num_classes)
      : features_(std::move(features)),
        labels_(std::move(labels)),
        true_labels_(std::move(true_labels)),
        num_classes_(num_classes) {
    validate();
  }

  const Matrix& features() const { return features_; }
  const std::vector<int>& labels() const { return labels_; }
  int num_classes() const { return num_classes_; }
  Eigen::Index rows() const { return features_.rows(); }
  Eigen::Index dim() const { return features_.cols(); }
  bool empty() const { return features_.rows() == 0; }

  /// Ground truth for evaluation and pseudo-label diagnostics. The training
  /// engine only receives training_view() and cannot reach this.
  const std::vector<int>& true_labels_for_diagnostics() const { return true_labels_; }

  TrainingView training_view() const { return {&features_, labels_, num_classes_}; }

  bool fully_labeled() const {
    return std::none_of(labels_.begin(), labels_.end(), [](int y) { return y == kUnlabeled; });
  }

  /// Rows picked by index, in the given order.
  Dataset subset(std::span<const std::size_t> rows) const {
    Matrix x(static_cast<Eigen::Index>(rows.size()), features_.cols());
    std::vector<int> labels(rows.size()), truth(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      x.row(static_cast<Eigen::Index>(i)) = features_.row(static_cast<Eigen::Index>(rows[i]));
      labels[i] = labels_[rows[i]];
      truth[i] = true_labels_[rows[i]];
    }
    return Dataset(std::move(x), std::move(labels), std::move(truth), num_classes_);
  }

  /// Same rows with every observed label replaced by kUnlabeled.
  Dataset as_unlabeled() const {
    Dataset out = *this;
    std::fill(out.labels_.begin(), out.labels_.end(), kUnlabeled);
    return out;
  }

  std::vector<int> class_histogram(bool use_truth) const {
    std::vector<int> counts(static_cast<std::size_t>(num_classes_), 0);
    for (std::size_t i = 0; i < labels_.size(); ++i) {
      const int y = use_truth ? true_labels_[i] : labels_[i];
      if (y >= 0) ++counts[static_cast<std::size_t>(y)];
    }
    return counts;
  }

  bool operator==(const Dataset& other) const {
    return num_classes_ == other.num_classes_ && labels_ == other.labels_ &&
           true_labels_ == other.true_labels_ && features_.rows() == other.features_.rows() &&
           features_.cols() == other.features_.cols() && features_ == other.features_;
  }

 private:
  void validate() const {
    require(num_classes_ >= 1, "Dataset: num_classes must be >= 1");
    const auto n = static_cast<std::size_t>(features_.rows());
    require(labels_.size() == n && true_labels_.size() == n, "Dataset: label count mismatch");
    require(all_finite(features_), "Dataset: non-finite feature");
    for (std::size_t i = 0; i < n; ++i) {
      const int truth = true_labels_[i];
      require(truth >= 0 && truth < num_classes_, "Dataset: true label out of range at row " + std::to_string(i));
      require(labels_[i] == kUnlabeled || labels_[i] == truth,
              "Dataset: observed label disagrees with truth at row " + std::to_string(i));
    }
  }

  Matrix features_;
  std::vector<int> labels_;
  std::vector<int> true_labels_;
  int num_classes_ = 0;
};

/// Isotropic unit-variance Gaussian mixture. Class means sit at
/// class_separation times unit vectors: orthonormalized random directions when
/// K <= dim, independent random directions otherwise. Rows are shuffled.
inline Dataset synth_gaussian_mixture(int num_classes, int dim, double class_separation,
                                      std::span<const int> counts, Rng& rng) {
  require(dim >= 2, "synth_gaussian_mixture: dim must be >= 2");
  require(class_separation >= 0.0, "synth_gaussian_mixture: negative separation");
  require(static_cast<int>(counts.size()) == num_classes, "synth_gaussian_mixture: counts length != K");

  Matrix means = rng.normal_matrix(num_classes, dim);
  for (int k = 0; k < num_classes; ++k) {
    if (k < dim) {
      for (int j = 0; j < k; ++j) means.row(k) -= means.row(k).dot(means.row(j)) * means.row(j);
    }
    means.row(k).normalize();
  }
  means *= class_separation;

  std::vector<int> truth;
  for (int k = 0; k < num_classes; ++k) {
    require(counts[static_cast<std::size_t>(k)] >= 0, "synth_gaussian_mixture: negative count");
    truth.insert(truth.end(), static_cast<std::size_t>(counts[static_cast<std::size_t>(k)]), k);
  }
  rng.shuffle(truth);
  Matrix x = rng.normal_matrix(static_cast<Eigen::Index>(truth.size()), dim);
  for (std::size_t i = 0; i < truth.size(); ++i) x.row(static_cast<Eigen::Index>(i)) += means.row(truth[i]);
  std::vector<int> labels = truth;
  return Dataset(std::move(x), std::move(labels), std::move(truth), num_classes);
}

/// Disjoint per-class random draws: labeled_counts[k] rows of class k keep
/// their label, the next unlabeled_counts[k] rows are marked unlabeled.
inline std::pair<Dataset, Dataset> split_labeled_unlabeled(const Dataset& full,
                                                           std::span<const int> labeled_counts,
                                                           std::span<const int> unlabeled_counts,
                                                           Rng& rng) {
  const int classes = full.num_classes();
  require(static_cast<int>(labeled_counts.size()) == classes &&
              static_cast<int>(unlabeled_counts.size()) == classes,
          "split_labeled_unlabeled: count vectors must have length K");
  const auto& truth = full.true_labels_for_diagnostics();
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(classes));
  for (std::size_t i = 0; i < truth.size(); ++i) by_class[static_cast<std::size_t>(truth[i])].push_back(i);

  std::vector<std::size_t> labeled_rows, unlabeled_rows;
  for (int k = 0; k < classes; ++k) {
    auto& rows = by_class[static_cast<std::size_t>(k)];
    const auto need_l = static_cast<std::size_t>(labeled_counts[static_cast<std::size_t>(k)]);
    const auto need_u = static_cast<std::size_t>(unlabeled_counts[static_cast<std::size_t>(k)]);
    if (need_l + need_u > rows.size()) {
      throw Error("split_labeled_unlabeled: class " + std::to_string(k) + " needs " +
                  std::to_string(need_l + need_u) + " rows but has " + std::to_string(rows.size()));
    }
    rng.shuffle(rows);
    labeled_rows.insert(labeled_rows.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(need_l));
    unlabeled_rows.insert(unlabeled_rows.end(), rows.begin() + static_cast<std::ptrdiff_t>(need_l),
                          rows.begin() + static_cast<std::ptrdiff_t>(need_l + need_u));
  }
  Dataset labeled = full.subset(labeled_rows);
  std::vector<int> l = labeled.labels();
  const auto& lt = labeled.true_labels_for_diagnostics();
  std::copy(lt.begin(), lt.end(), l.begin());
  labeled = Dataset(labeled.features(), std::move(l), lt, classes);
  return {std::move(labeled), full.subset(unlabeled_rows).as_unlabeled()};
}

// ---------------------------------------------------------------------------
// Class-aware sampling
// ---------------------------------------------------------------------------

struct BalancedBatchSpec {
  int batch_size = 0;
  int num_classes = 0;

  int per_class() const {
    require(num_classes > 0 && batch_size % num_classes == 0,
            "BalancedBatchSpec: batch size " + std::to_string(batch_size) +
                " is not divisible by " + std::to_string(num_classes) + " classes");
    return batch_size / num_classes;
  }
};

/// Row indices of each observed class.
class ClassIndex {
 public:
  ClassIndex(std::span<const int> labels, int num_classes)
      : rows_(static_cast<std::size_t>(num_classes)) {
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] >= 0) rows_.at(static_cast<std::size_t>(labels[i])).push_back(i);
    }
  }
  explicit ClassIndex(const TrainingView& view) : ClassIndex(view.labels, view.num_classes) {}

  const std::vector<std::size_t>& rows(int k) const { return rows_.at(static_cast<std::size_t>(k)); }
  int num_classes() const { return static_cast<int>(rows_.size()); }

 private:
  std::vector<std::vector<std::size_t>> rows_;
};

/// Exactly per_class indices of every class, drawn with replacement within the
/// class, grouped class by class.
inline std::vector<std::size_t> balanced_batch(const ClassIndex& index, const BalancedBatchSpec& spec,
                                               Rng& rng) {
  require(spec.num_classes == index.num_classes(), "balanced_batch: class count mismatch");
  const int per_class = spec.per_class();
  std::vector<std::size_t> out;
  out.reserve(static_cast<std::size_t>(spec.batch_size));
  for (int k = 0; k < spec.num_classes; ++k) {
    const auto& rows = index.rows(k);
    if (rows.empty()) throw Error("balanced_batch: class " + std::to_string(k) + " has no labeled rows");
    for (int j = 0; j < per_class; ++j) out.push_back(rows[rng.index(rows.size())]);
  }
  return out;
}

inline std::vector<std::size_t> balanced_batch(const Dataset& labeled, const BalancedBatchSpec& spec, Rng& rng) {
  return balanced_batch(ClassIndex(labeled.labels(), labeled.num_classes()), spec, rng);
}

/// Uniform draw of `count` row indices with replacement.
inline std::vector<std::size_t> sample_rows(std::size_t available, std::size_t count, Rng& rng) {
  std::vector<std::size_t> out(count);
  for (auto& row : out) row = rng.index(available);
  return out;
}

inline Matrix gather_rows(const Matrix& x, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

inline std::vector<int> gather_labels(std::span<const int> labels, std::span<const std::size_t> rows) {
  std::vector<int> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) out[i] = labels[rows[i]];
  return out;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

namespace detail {

inline std::string format_double(double value) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  return buf;
}

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    cells.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return cells;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <typename T>
T parse_cell(std::string_view cell, std::size_t line_no, const std::string& path) {
  cell = trim(cell);
  T value{};
  const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), value);
  if (ec != std::errc() || ptr != cell.data() + cell.size()) {
    throw Error(path + ": line " + std::to_string(line_no) + ": non-numeric cell '" + std::string(cell) + "'");
  }
  return value;
}

}  // namespace detail

/// Writes header `f0,...,f{d-1},label,true_label` and one row per sample;
/// doubles use 17 significant digits so a reload is bit-exact.
inline void save_csv_dataset(const Dataset& data, const std::string& path) {
  std::ofstream out(path);
  require(static_cast<bool>(out), "save_csv_dataset: cannot open " + path);
  for (Eigen::Index j = 0; j < data.dim(); ++j) out << 'f' << j << ',';
  out << "label,true_label\n";
  const auto& truth = data.true_labels_for_diagnostics();
  for (Eigen::Index i = 0; i < data.rows(); ++i) {
    for (Eigen::Index j = 0; j < data.dim(); ++j) out << detail::format_double(data.features()(i, j)) << ',';
    out << data.labels()[static_cast<std::size_t>(i)] << ',' << truth[static_cast<std::size_t>(i)] << '\n';
  }
  require(static_cast<bool>(out), "save_csv_dataset: write failed for " + path);
}

/// Parses a dataset CSV. When num_classes is 0 it is inferred as
/// max(true_label) + 1. Errors carry the 1-based line number.
inline Dataset load_csv_dataset(const std::string& path, int num_classes = 0) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "load_csv_dataset: cannot open " + path);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), path + ": missing header");
  const auto header = detail::split_commas(line);
  require(header.size() >= 3 && detail::trim(header[header.size() - 2]) == "label" &&
              detail::trim(header.back()) == "true_label",
          path + ": line 1: header must end with label,true_label");
  const std::size_t dim = header.size() - 2;

  std::vector<double> values;
  std::vector<int> labels, truth;
  std::vector<std::size_t> line_of_row;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_commas(line);
    if (cells.size() != header.size()) {
      throw Error(path + ": line " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                  " cells, found " + std::to_string(cells.size()));
    }
    for (std::size_t j = 0; j < dim; ++j) {
      const double v = detail::parse_cell<double>(cells[j], line_no, path);
      if (!std::isfinite(v)) throw Error(path + ": line " + std::to_string(line_no) + ": non-finite value");
      values.push_back(v);
    }
    labels.push_back(detail::parse_cell<int>(cells[dim], line_no, path));
    truth.push_back(detail::parse_cell<int>(cells[dim + 1], line_no, path));
    line_of_row.push_back(line_no);
  }

  int classes = num_classes;
  if (classes <= 0) {
    classes = 1;
    for (int t : truth) classes = std::max(classes, t + 1);
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::string where = path + ": line " + std::to_string(line_of_row[i]) + ": ";
    if (labels[i] < kUnlabeled || labels[i] >= classes) throw Error(where + "label outside {-1, 0..K-1}");
    if (truth[i] < 0 || truth[i] >= classes) throw Error(where + "true_label outside {0..K-1}");
    if (labels[i] != kUnlabeled && labels[i] != truth[i]) throw Error(where + "label disagrees with true_label");
  }

  Matrix x(static_cast<Eigen::Index>(labels.size()), static_cast<Eigen::Index>(dim));
  std::copy(values.begin(), values.end(), x.data());
  return Dataset(std::move(x), std::move(labels), std::move(truth), classes);
}

}  // namespace l2ac
