#pragma once

// Confidence-masked pseudo-labels and the two-view feature-space augmentation
// used in place of image augmentations.

#include "l2ac/numcore.hpp"

#include <cmath>
#include <utility>
#include <vector>

namespace l2ac {

struct AugmentedViews {
  Matrix weak;
  Matrix strong;
};

/// Additive isotropic Gaussian noise at two scales. Both noise matrices are
/// always drawn (weak first), so the stream position does not depend on sigma.
inline AugmentedViews augment(const Matrix& x, double sigma_weak, double sigma_strong, Rng& rng) {
  require(sigma_weak >= 0.0 && sigma_weak < sigma_strong, "augment: need 0 <= sigma_weak < sigma_strong");
  AugmentedViews v;
  v.weak = x + rng.normal_matrix(x.rows(), x.cols(), sigma_weak);
  v.strong = x + rng.normal_matrix(x.rows(), x.cols(), sigma_strong);
  return v;
}

struct PseudoLabelMode {
  enum class Kind { hard, sharpen } kind = Kind::hard;
  double temperature = 1.0;

  static PseudoLabelMode hard() { return {}; }
  static PseudoLabelMode sharpen(double t) { return {Kind::sharpen, t}; }
  bool operator==(const PseudoLabelMode&) const = default;
};

struct PseudoLabels {
  Matrix targets;              // one-hot or sharpened rows
  std::vector<double> weights; // lambda_u if confident, else 0
  std::vector<int> hard;       // argmax of the weak-view probabilities
};

/// Pseudo-labels from weak-view logits: a row is kept with weight lambda_u
/// when its max probability reaches tau, and masked to weight 0 otherwise.
inline PseudoLabels assign_pseudo_labels(const Matrix& logits_weak, double tau, double lambda_u,
                                         const PseudoLabelMode& mode) {
  require(tau >= 0.0 && tau <= 1.0, "assign_pseudo_labels: tau must be in [0, 1]");
  require(lambda_u >= 0.0, "assign_pseudo_labels: lambda_u must be >= 0");
  require(mode.kind == PseudoLabelMode::Kind::hard || mode.temperature > 0.0,
          "assign_pseudo_labels: temperature must be > 0");
  const Matrix probs = softmax(logits_weak);
  PseudoLabels out;
  out.targets = Matrix::Zero(probs.rows(), probs.cols());
  out.weights.resize(static_cast<std::size_t>(probs.rows()));
  out.hard = argmax_rows(probs);
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    const auto row = static_cast<std::size_t>(i);
    const int top = out.hard[row];
    out.weights[row] = probs(i, top) >= tau ? lambda_u : 0.0;
    if (mode.kind == PseudoLabelMode::Kind::hard) {
      out.targets(i, top) = 1.0;
    } else if (mode.temperature == 1.0) {
      out.targets.row(i) = probs.row(i);
    } else {
      // p^(1/T) in log space, renormalized.
      const RowVector logp = probs.row(i).array().max(kLogFloor).log().matrix() / mode.temperature;
      const double peak = logp.maxCoeff();
      RowVector sharp = (logp.array() - peak).exp().matrix();
      out.targets.row(i) = sharp / sharp.sum();
    }
  }
  return out;
}

/// Unlabeled mini-batch ready for the lower-level loss.
struct PseudoBatch {
  Matrix x_weak;
  Matrix x_strong;
  Matrix y_hat;
  std::vector<double> lambda;
  std::vector<int> hard;

  Eigen::Index rows() const { return x_strong.rows(); }
};

}  // namespace l2ac
