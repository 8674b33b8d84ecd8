#pragma once

// Dense numeric kernel: matrix aliases, a portable seeded generator,
// softmax / cross-entropy with analytic gradients, and a central-difference
// gradient checker.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace l2ac {

/// Row-major dense matrix of doubles. Rows are samples throughout the library.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw Error(message);
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

/// Smallest argument passed to log() by the loss functions; keeps log(0) finite.
inline constexpr double kLogFloor = 1e-300;

// ---------------------------------------------------------------------------
// Rng
// ---------------------------------------------------------------------------

/// SplitMix64 finalizer, used to derive independent seeds from a master seed.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seeded random stream backed by std::mt19937_64. Uniform and normal draws
/// are implemented here, not taken from <random>, so the stream is identical
/// on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, n) by rejection.
  std::size_t index(std::size_t n) {
    require(n > 0, "Rng::index: empty range");
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t draw;
    do {
      draw = engine_();
    } while (draw >= limit);
    return static_cast<std::size_t>(draw % bound);
  }

  /// Standard normal via the Marsaglia polar method.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double scale = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * scale;
    has_spare_ = true;
    return u * scale;
  }

  Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev = 1.0) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * normal();
    return m;
  }

  template <typename T>
  void shuffle(std::vector<T>& values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      std::swap(values[i - 1], values[index(i)]);
    }
  }

  /// Independent child stream; the same (seed, stream) pair always yields the
  /// same child.
  Rng fork(std::uint64_t stream) const {
    return Rng(splitmix64(seed_ ^ splitmix64(stream + 0x632be59bd9b4e019ULL)));
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// ---------------------------------------------------------------------------
// Softmax and cross-entropy
// ---------------------------------------------------------------------------

/// Row-wise softmax with max subtraction.
inline Matrix softmax(const Matrix& logits) {
  require(logits.cols() >= 2, "softmax: need at least 2 classes");
  require(all_finite(logits), "non-finite logits");
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double peak = logits.row(i).maxCoeff();
    out.row(i) = (logits.row(i).array() - peak).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

struct LossAndGrad {
  double loss = 0.0;
  Matrix grad;  // d loss / d logits, same shape as the logits
};

/// Weighted cross-entropy, averaged over the batch size (not over the weight
/// sum): loss = (1/B) sum_i w_i * H(target_i, softmax(logits_i)).
/// The gradient row i is w_i * (p_i - target_i) / B.
/// log() inputs are floored at kLogFloor.
inline LossAndGrad cross_entropy(const Matrix& logits, const Matrix& targets,
                                 std::span<const double> weights) {
  const Eigen::Index batch = logits.rows();
  require(targets.rows() == batch && targets.cols() == logits.cols(),
          "cross_entropy: target shape mismatch");
  require(static_cast<Eigen::Index>(weights.size()) == batch,
          "cross_entropy: weight count mismatch");
  LossAndGrad out;
  out.grad = Matrix::Zero(batch, logits.cols());
  if (batch == 0) return out;
  const Matrix probs = softmax(logits);
  const double inv_batch = 1.0 / static_cast<double>(batch);
  double total = 0.0;
  for (Eigen::Index i = 0; i < batch; ++i) {
    const double row_sum = targets.row(i).sum();
    if (std::abs(row_sum - 1.0) > 1e-9) {
      throw Error("cross_entropy: target row " + std::to_string(i) +
                  " does not sum to 1");
    }
    const double w = weights[static_cast<std::size_t>(i)];
    require(w >= 0.0, "cross_entropy: negative weight");
    if (w == 0.0) continue;
    double h = 0.0;
    for (Eigen::Index k = 0; k < logits.cols(); ++k) {
      const double t = targets(i, k);
      if (t != 0.0) h -= t * std::log(std::max(probs(i, k), kLogFloor));
    }
    total += w * h;
    out.grad.row(i) = (w * inv_batch) * (probs.row(i) - targets.row(i));
  }
  out.loss = total * inv_batch;
  return out;
}

inline LossAndGrad cross_entropy(const Matrix& logits, const Matrix& targets) {
  const std::vector<double> ones(static_cast<std::size_t>(logits.rows()), 1.0);
  return cross_entropy(logits, targets, ones);
}

/// One-hot rows for integer labels in [0, num_classes).
inline Matrix one_hot(std::span<const int> labels, int num_classes) {
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(labels.size()), num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] >= 0 && labels[i] < num_classes, "one_hot: label out of range");
    out(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
  }
  return out;
}

/// Index of the row maximum; ties go to the lowest index.
inline int argmax_row(const Matrix& m, Eigen::Index row) {
  int best = 0;
  for (Eigen::Index k = 1; k < m.cols(); ++k) {
    if (m(row, k) > m(row, best)) best = static_cast<int>(k);
  }
  return best;
}

inline std::vector<int> argmax_rows(const Matrix& m) {
  std::vector<int> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) out[static_cast<std::size_t>(i)] = argmax_row(m, i);
  return out;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Central-difference numeric gradient of f at point.
inline Vector numeric_gradient(const std::function<double(const Vector&)>& f,
                               const Vector& point, double epsilon) {
  Vector grad(point.size());
  Vector probe = point;
  for (Eigen::Index i = 0; i < point.size(); ++i) {
    probe[i] = point[i] + epsilon;
    const double up = f(probe);
    probe[i] = point[i] - epsilon;
    const double down = f(probe);
    probe[i] = point[i];
    grad[i] = (up - down) / (2.0 * epsilon);
  }
  return grad;
}

/// Max over coordinates of |a - n| / max(1, |a|, |n|), where a is the
/// analytic gradient and n the central-difference estimate.
inline double grad_check(const std::function<double(const Vector&)>& f,
                         const Vector& analytic, const Vector& point,
                         double epsilon = 1e-6) {
  require(epsilon >= 1e-8 && epsilon <= 1e-3, "grad_check: epsilon outside [1e-8, 1e-3]");
  require(analytic.size() == point.size(), "grad_check: gradient size mismatch");
  const Vector numeric = numeric_gradient(f, point, epsilon);
  double worst = 0.0;
  for (Eigen::Index i = 0; i < point.size(); ++i) {
    const double a = analytic[i];
    const double n = numeric[i];
    const double scale = std::max({1.0, std::abs(a), std::abs(n)});
    worst = std::max(worst, std::abs(a - n) / scale);
  }
  return worst;
}

}  // namespace l2ac
