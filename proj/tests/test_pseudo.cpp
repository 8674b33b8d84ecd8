#include "l2ac/pseudo.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace l2ac {
namespace {

Matrix logits_for(std::initializer_list<double> probs) {
  Matrix m(1, static_cast<Eigen::Index>(probs.size()));
  Eigen::Index j = 0;
  for (double p : probs) m(0, j++) = std::log(p);
  return m;
}

TEST(Augment, ZeroWeakNoiseIsIdentity) {
  Rng rng(1);
  const Matrix x = rng.normal_matrix(5, 3);
  const AugmentedViews v = augment(x, 0.0, 0.5, rng);
  EXPECT_EQ(v.weak, x);
  EXPECT_NE(v.strong, x);
}

TEST(Augment, StrongNoiseStdMonteCarlo) {
  Rng rng(2);
  const Matrix x = Matrix::Constant(10000, 4, 2.5);
  const AugmentedViews v = augment(x, 0.1, 0.7, rng);
  const Matrix diff = v.strong - x;
  for (Eigen::Index j = 0; j < 4; ++j) {
    const double mean = diff.col(j).mean();
    const double sd = std::sqrt((diff.col(j).array() - mean).square().sum() / (diff.rows() - 1));
    EXPECT_NEAR(sd, 0.7, 0.7 * 0.03);
  }
}

TEST(Augment, SameSeedSamePair) {
  Rng a(3), b(3);
  const Matrix x = Matrix::Ones(4, 2);
  const AugmentedViews va = augment(x, 0.2, 0.6, a);
  const AugmentedViews vb = augment(x, 0.2, 0.6, b);
  EXPECT_EQ(va.weak, vb.weak);
  EXPECT_EQ(va.strong, vb.strong);
}

TEST(PseudoLabels, ThresholdKeepsConfidentRow) {
  const PseudoLabels p = assign_pseudo_labels(logits_for({0.96, 0.04}), 0.95, 1.0, PseudoLabelMode::hard());
  EXPECT_EQ(p.weights[0], 1.0);
  EXPECT_EQ(p.hard[0], 0);
  EXPECT_EQ(p.targets(0, 0), 1.0);
}

TEST(PseudoLabels, ThresholdMasksUnconfidentRow) {
  const PseudoLabels p = assign_pseudo_labels(logits_for({0.5, 0.3, 0.2}), 0.95, 1.0, PseudoLabelMode::hard());
  EXPECT_EQ(p.weights[0], 0.0);
}

TEST(PseudoLabels, HardModeWeightsAndRows) {
  Rng rng(4);
  const Matrix logits = rng.normal_matrix(200, 5, 3.0);
  const PseudoLabels p = assign_pseudo_labels(logits, 0.7, 2.5, PseudoLabelMode::hard());
  int kept = 0;
  for (std::size_t i = 0; i < p.weights.size(); ++i) {
    EXPECT_TRUE(p.weights[i] == 0.0 || p.weights[i] == 2.5);
    kept += p.weights[i] > 0.0 ? 1 : 0;
    EXPECT_NEAR(p.targets.row(static_cast<Eigen::Index>(i)).sum(), 1.0, 1e-9);
  }
  EXPECT_GT(kept, 0);
  EXPECT_LT(kept, 200);
}

TEST(PseudoLabels, SharpenIdentityTemperature) {
  Rng rng(5);
  const Matrix logits = rng.normal_matrix(10, 4);
  const PseudoLabels p = assign_pseudo_labels(logits, 0.0, 1.0, PseudoLabelMode::sharpen(1.0));
  EXPECT_EQ(p.targets, softmax(logits));
}

TEST(PseudoLabels, SharpenLowTemperatureConcentrates) {
  const Matrix logits = logits_for({0.6, 0.3, 0.1});
  const PseudoLabels p = assign_pseudo_labels(logits, 0.0, 1.0, PseudoLabelMode::sharpen(0.5));
  // p^2 / sum p^2 = 0.36 / 0.46
  EXPECT_NEAR(p.targets(0, 0), 0.36 / 0.46, 1e-12);
  EXPECT_NEAR(p.targets.row(0).sum(), 1.0, 1e-12);
}

TEST(PseudoLabels, RejectsBadParameters) {
  const Matrix logits = logits_for({0.5, 0.5});
  EXPECT_THROW(assign_pseudo_labels(logits, 1.5, 1.0, PseudoLabelMode::hard()), Error);
  EXPECT_THROW(assign_pseudo_labels(logits, 0.5, -1.0, PseudoLabelMode::hard()), Error);
  EXPECT_THROW(assign_pseudo_labels(logits, 0.5, 1.0, PseudoLabelMode::sharpen(0.0)), Error);
}

}  // namespace
}  // namespace l2ac
