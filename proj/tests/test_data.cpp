#include "l2ac/data.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

namespace l2ac {
namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("l2ac_test_data_" + name)).string();
}

TEST(ClassCounts, LongtailReferenceValues) {
  // floor(1500 / 100^(k/9)) evaluated at high precision outside this code
  const std::vector<int> expected{1500, 899, 539, 323, 193, 116, 69, 41, 25, 15};
  EXPECT_EQ(class_counts({ProfileKind::longtail, 100.0, 1500, 10}), expected);
  EXPECT_EQ(class_counts({ProfileKind::longtail, 20.0, 100, 6}), (std::vector<int>{100, 54, 30, 16, 9, 5}));
  EXPECT_EQ(class_counts({ProfileKind::longtail, 20.0, 500, 6}), (std::vector<int>{500, 274, 150, 82, 45, 25}));
}

TEST(ClassCounts, EndpointsGiveExactRatio) {
  for (auto [n1, gamma, k] : {std::tuple{1500, 15, 10}, {1000, 10, 5}, {1200, 12, 4}, {64, 64, 7}}) {
    const auto c = class_counts({ProfileKind::longtail, static_cast<double>(gamma), n1, k});
    EXPECT_EQ(c.front(), n1);
    EXPECT_EQ(c.front(), gamma * c.back()) << n1 << "/" << gamma;
  }
}

TEST(ClassCounts, UniformStepReversed) {
  EXPECT_EQ(class_counts({ProfileKind::uniform, 1.0, 150, 10}), std::vector<int>(10, 150));
  EXPECT_EQ(class_counts({ProfileKind::step, 10.0, 500, 5}), (std::vector<int>{500, 500, 500, 50, 50}));
  auto lt = class_counts({ProfileKind::longtail, 100.0, 1500, 10});
  std::reverse(lt.begin(), lt.end());
  EXPECT_EQ(class_counts({ProfileKind::reversed_longtail, 100.0, 1500, 10}), lt);
}

TEST(ClassCounts, MonotoneAndAtLeastOne) {
  const auto c = class_counts({ProfileKind::longtail, 1000.0, 10, 8});
  for (std::size_t k = 1; k < c.size(); ++k) EXPECT_LE(c[k], c[k - 1]);
  EXPECT_GE(c.back(), 1);
}

TEST(ClassCounts, RejectsBadProfiles) {
  EXPECT_THROW(class_counts({ProfileKind::longtail, 0.5, 100, 5}), Error);
  EXPECT_THROW(class_counts({ProfileKind::longtail, 2.0, 0, 5}), Error);
  EXPECT_THROW(parse_profile_kind("zipf"), Error);
}

TEST(Synth, CountsAndLabels) {
  Rng rng(1);
  const Dataset d = synth_gaussian_mixture(2, 2, 3.0, std::vector<int>{5, 5}, rng);
  EXPECT_EQ(d.rows(), 10);
  EXPECT_EQ(d.class_histogram(true), (std::vector<int>{5, 5}));
  EXPECT_EQ(d.labels(), d.true_labels_for_diagnostics());
}

TEST(Synth, SameSeedSameData) {
  Rng a(9), b(9);
  EXPECT_EQ(synth_gaussian_mixture(3, 4, 2.0, std::vector<int>{4, 5, 6}, a),
            synth_gaussian_mixture(3, 4, 2.0, std::vector<int>{4, 5, 6}, b));
}

// Nearest-class-mean classifier fitted on the data itself (a linear probe).
double nearest_mean_accuracy(const Dataset& d) {
  const int k = d.num_classes();
  Matrix means = Matrix::Zero(k, d.dim());
  std::vector<int> n(static_cast<std::size_t>(k), 0);
  for (Eigen::Index i = 0; i < d.rows(); ++i) {
    means.row(d.labels()[i]) += d.features().row(i);
    ++n[static_cast<std::size_t>(d.labels()[i])];
  }
  for (int c = 0; c < k; ++c) means.row(c) /= n[static_cast<std::size_t>(c)];
  int correct = 0;
  for (Eigen::Index i = 0; i < d.rows(); ++i) {
    Eigen::Index best;
    (means.rowwise() - d.features().row(i)).rowwise().squaredNorm().minCoeff(&best);
    correct += best == d.labels()[i] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(d.rows());
}

TEST(Synth, WellSeparatedIsLinearlyEasy) {
  Rng rng(2);
  const Dataset d = synth_gaussian_mixture(4, 16, 8.0, std::vector<int>(4, 100), rng);
  EXPECT_GE(nearest_mean_accuracy(d), 0.99);
}

TEST(Synth, ZeroSeparationIsChance) {
  Rng rng(3);
  const Dataset d = synth_gaussian_mixture(4, 8, 0.0, std::vector<int>(4, 2000), rng);
  // Class-conditional means coincide: empirical means all near the origin.
  for (int k = 0; k < 4; ++k) {
    RowVector mean = RowVector::Zero(8);
    for (Eigen::Index i = 0; i < d.rows(); ++i) {
      if (d.labels()[i] == k) mean += d.features().row(i) / 2000.0;
    }
    EXPECT_LT(mean.cwiseAbs().maxCoeff(), 0.1);
  }
  Rng held(4);
  const Dataset test = synth_gaussian_mixture(4, 8, 0.0, std::vector<int>(4, 2000), held);
  // Chance: the fitted probe does no better than 1/K (+ noise) on fresh data.
  Matrix means = Matrix::Zero(4, 8);
  for (Eigen::Index i = 0; i < d.rows(); ++i) means.row(d.labels()[i]) += d.features().row(i) / 2000.0;
  int correct = 0;
  for (Eigen::Index i = 0; i < test.rows(); ++i) {
    Eigen::Index best;
    (means.rowwise() - test.features().row(i)).rowwise().squaredNorm().minCoeff(&best);
    correct += best == test.labels()[i] ? 1 : 0;
  }
  EXPECT_NEAR(correct / 8000.0, 0.25, 0.03);
}

TEST(Split, DisjointWithRequestedCounts) {
  Rng rng(5);
  const Dataset full = synth_gaussian_mixture(2, 3, 2.0, std::vector<int>{5, 5}, rng);
  auto [l, u] = split_labeled_unlabeled(full, std::vector<int>{2, 2}, std::vector<int>{3, 3}, rng);
  EXPECT_EQ(l.rows(), 4);
  EXPECT_EQ(u.rows(), 6);
  EXPECT_TRUE(l.fully_labeled());
  for (int y : u.labels()) EXPECT_EQ(y, kUnlabeled);
  EXPECT_EQ(u.class_histogram(true), (std::vector<int>{3, 3}));
  std::set<std::vector<double>> rows;
  for (const Dataset* d : {&l, &u}) {
    for (Eigen::Index i = 0; i < d->rows(); ++i) {
      const RowVector r = d->features().row(i);
      rows.insert(std::vector<double>(r.data(), r.data() + r.size()));
    }
  }
  EXPECT_EQ(rows.size(), 10u);
}

TEST(Split, EmptyUnlabeled) {
  Rng rng(6);
  const Dataset full = synth_gaussian_mixture(2, 3, 2.0, std::vector<int>{5, 5}, rng);
  auto [l, u] = split_labeled_unlabeled(full, std::vector<int>{2, 2}, std::vector<int>{0, 0}, rng);
  EXPECT_TRUE(u.empty());
}

TEST(Split, ReversedUnlabeledScenario) {
  Rng rng(7);
  const auto lc = class_counts({ProfileKind::longtail, 100.0, 200, 5});
  const auto uc = class_counts({ProfileKind::reversed_longtail, 100.0, 200, 5});
  std::vector<int> total(5);
  for (int k = 0; k < 5; ++k) total[k] = lc[k] + uc[k];
  const Dataset full = synth_gaussian_mixture(5, 6, 2.0, total, rng);
  auto [l, u] = split_labeled_unlabeled(full, lc, uc, rng);
  const auto hl = l.class_histogram(false);
  const auto hu = u.class_histogram(true);
  EXPECT_EQ(std::max_element(hl.begin(), hl.end()) - hl.begin(), 0);
  EXPECT_EQ(std::max_element(hu.begin(), hu.end()) - hu.begin(), 4);
}

TEST(Split, ErrorNamesClass) {
  Rng rng(8);
  const Dataset full = synth_gaussian_mixture(2, 3, 2.0, std::vector<int>{5, 2}, rng);
  try {
    split_labeled_unlabeled(full, std::vector<int>{1, 2}, std::vector<int>{1, 1}, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("class 1"), std::string::npos);
  }
}

TEST(BalancedBatch, ExactlyStratified) {
  std::vector<int> labels;
  for (int k = 0; k < 5; ++k) labels.insert(labels.end(), 3 + k * 4, k);
  const ClassIndex index(labels, 5);
  Rng rng(9);
  const auto rows = balanced_batch(index, {10, 5}, rng);
  std::vector<int> hist(5, 0);
  for (auto r : rows) ++hist[labels[r]];
  EXPECT_EQ(hist, std::vector<int>(5, 2));
}

TEST(BalancedBatch, SingletonClassRepeats) {
  const std::vector<int> labels{0, 0, 0, 1};
  Rng rng(10);
  const auto rows = balanced_batch(ClassIndex(labels, 2), {6, 2}, rng);
  EXPECT_EQ(std::count(rows.begin(), rows.end(), std::size_t{3}), 3);
}

TEST(BalancedBatch, WithinClassDrawsUniformMonteCarlo) {
  std::vector<int> labels{0, 0, 0, 0, 1, 1};
  Rng rng(11);
  const ClassIndex index(labels, 2);
  std::vector<int> uses(labels.size(), 0);
  int class0 = 0, total = 0;
  for (int draw = 0; draw < 10000; ++draw) {
    for (auto r : balanced_batch(index, {2, 2}, rng)) {
      ++uses[r];
      class0 += labels[r] == 0 ? 1 : 0;
      ++total;
    }
  }
  EXPECT_EQ(class0 * 2, total);
  for (int r = 0; r < 4; ++r) EXPECT_NEAR(uses[r] / 10000.0, 0.25, 0.01);
  for (int r = 4; r < 6; ++r) EXPECT_NEAR(uses[r] / 10000.0, 0.5, 0.01);
}

TEST(BalancedBatch, Errors) {
  const std::vector<int> labels{0, 0, 1};
  Rng rng(12);
  EXPECT_THROW(balanced_batch(ClassIndex(labels, 2), {3, 2}, rng), Error);
  EXPECT_THROW(balanced_batch(ClassIndex(labels, 3), {3, 3}, rng), Error);  // class 2 empty
}

TEST(Dataset, RejectsInconsistentLabels) {
  EXPECT_THROW(Dataset(Matrix::Zero(2, 2), {0, 1}, {0, 0}, 2), Error);
  EXPECT_THROW(Dataset(Matrix::Zero(2, 2), {0, 3}, {0, 3}, 2), Error);
  EXPECT_NO_THROW(Dataset(Matrix::Zero(2, 2), {kUnlabeled, 1}, {0, 1}, 2));
}

TEST(Csv, RoundTrip) {
  Rng rng(13);
  const Dataset full = synth_gaussian_mixture(3, 4, 2.0, std::vector<int>{3, 4, 5}, rng);
  auto [l, u] = split_labeled_unlabeled(full, std::vector<int>{1, 2, 3}, std::vector<int>{2, 2, 2}, rng);
  for (const Dataset* d : {&l, &u}) {
    const std::string path = temp_path("roundtrip.csv");
    save_csv_dataset(*d, path);
    EXPECT_EQ(load_csv_dataset(path, 3), *d);
  }
}

TEST(Csv, AllUnlabeled) {
  const std::string path = temp_path("unlabeled.csv");
  std::ofstream(path) << "f0,f1,label,true_label\n1,2,-1,0\n3,4,-1,1\n";
  const Dataset d = load_csv_dataset(path);
  EXPECT_EQ(d.rows(), 2);
  EXPECT_EQ(d.labels(), (std::vector<int>{kUnlabeled, kUnlabeled}));
  EXPECT_FALSE(d.fully_labeled());
}

TEST(Csv, MalformedRowReportsLine) {
  const std::string path = temp_path("bad.csv");
  std::ofstream out(path);
  out << "f0,f1,label,true_label\n";
  for (int i = 0; i < 5; ++i) out << "0.5,1.5,0,0\n";
  out << "0.5,oops,0,0\n";  // line 7
  out.close();
  try {
    load_csv_dataset(path);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("line 7"), std::string::npos) << e.what();
  }
}

}  // namespace
}  // namespace l2ac
