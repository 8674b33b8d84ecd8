#pragma once

// Bi-level training engine. Each iteration takes a lower-level step on the
// extractor and classifier through the attractor-augmented logits, then
// updates the attractor from the class-balanced loss of the stepped
// classifier. The hypergradient is obtained by differentiating the
// classifier's update through the attractor; only the classifier head is
// unrolled, so the extractor never depends on omega.

#include "l2ac/data.hpp"
#include "l2ac/model.hpp"
#include "l2ac/numcore.hpp"
#include "l2ac/pseudo.hpp"

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace l2ac {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class TrainMode { l2ac, baseline, plain_attractor, single_level };

inline std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::l2ac: return "l2ac";
    case TrainMode::baseline: return "baseline";
    case TrainMode::plain_attractor: return "plain_attractor";
    case TrainMode::single_level: return "single_level";
  }
  return "?";
}

inline TrainMode parse_train_mode(const std::string& name) {
  if (name == "l2ac") return TrainMode::l2ac;
  if (name == "baseline") return TrainMode::baseline;
  if (name == "plain_attractor") return TrainMode::plain_attractor;
  if (name == "single_level") return TrainMode::single_level;
  throw Error("unknown training mode '" + name + "'");
}

struct Schedule {
  enum class Kind { constant, decaying } kind = Kind::constant;
  double c1 = 1.0;
  double c2 = 1.0;
  bool operator==(const Schedule&) const = default;
};

struct LowerOptimizerConfig {
  enum class Kind { sgd, adam } kind = Kind::sgd;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  bool operator==(const LowerOptimizerConfig&) const = default;
};

struct TrainConfig {
  double alpha = 2e-3;
  double eta = 1e-4;
  double tau = 0.95;
  double lambda_u = 1.0;
  int batch_n = 60;
  int batch_m = 120;
  int balanced_n = 60;
  int iters = 1000;
  double ema_decay = 0.999;
  TrainMode mode = TrainMode::l2ac;
  double single_level_lambda = 1.0;
  Schedule schedule;
  LowerOptimizerConfig lower_optimizer;
  PseudoLabelMode pseudo_mode;
  bool pseudo_from_classifier = true;  // pseudo-labels from phi(theta(x)) rather than the biased logits
  double sigma_weak = 0.1;
  double sigma_strong = 0.5;
  std::uint64_t seed = 0;

  bool operator==(const TrainConfig&) const = default;

  void validate(int num_classes) const {
    require(alpha > 0.0, "train config: alpha must be > 0");
    require(eta > 0.0, "train config: eta must be > 0");
    require(tau >= 0.0 && tau <= 1.0, "train config: tau must be in [0, 1]");
    require(lambda_u >= 0.0, "train config: lambda_u must be >= 0");
    require(batch_n >= 1 && batch_m >= 0 && iters >= 0, "train config: batch sizes and iters must be positive");
    require(balanced_n >= 1 && balanced_n % num_classes == 0,
            "train config: balanced_n (" + std::to_string(balanced_n) + ") must be divisible by K = " +
                std::to_string(num_classes));
    require(ema_decay >= 0.0 && ema_decay <= 1.0, "train config: ema_decay must be in [0, 1]");
    require(sigma_weak >= 0.0 && sigma_weak < sigma_strong, "train config: need 0 <= sigma_weak < sigma_strong");
    require(single_level_lambda >= 0.0, "train config: single_level_lambda must be >= 0");
    require(schedule.kind == Schedule::Kind::constant || (schedule.c1 > 0.0 && schedule.c2 > 0.0),
            "train config: schedule constants must be > 0");
  }
};

/// Extractor and attractor architecture; input width and K come from the data.
struct ModelConfig {
  std::vector<int> hidden{32};
  int feature_dim = 16;
  int attractor_hidden = kDefaultAttractorHidden;
  AttractorNorm norm = AttractorNorm::softmax_input;

  bool operator==(const ModelConfig&) const = default;

  ModelDims dims(int input_dim, int num_classes) const {
    return {input_dim, hidden, feature_dim, num_classes, attractor_hidden};
  }
};

struct Rates {
  double alpha = 0.0;
  double eta = 0.0;
};

/// Learning rates for iteration t >= 1: the configured constants, or
/// alpha_t = c1 / t and eta_t = c2 / sqrt(t).
inline Rates schedule_rates(const TrainConfig& config, std::uint64_t t) {
  require(t >= 1, "schedule_rates: t must be >= 1");
  if (config.schedule.kind == Schedule::Kind::constant) return {config.alpha, config.eta};
  const double td = static_cast<double>(t);
  return {config.schedule.c1 / td, config.schedule.c2 / std::sqrt(td)};
}

// ---------------------------------------------------------------------------
// Lower-level loss
// ---------------------------------------------------------------------------

struct Gradients {
  Mlp theta;
  Dense phi;
  Mlp omega;  // empty when the attractor was not differentiated
};

/// Per-row quantities of one lower-level batch that the classifier's
/// gradient depends on. row_scale_i is the row's total weight in the loss
/// (1/n for labeled rows, lambda_i/m for unlabeled rows).
struct UnrollSegment {
  Matrix features;
  Matrix probs;
  Matrix targets;
  std::vector<double> row_scale;
  Matrix attractor_input;
  MlpCache attractor_cache;
};

struct LowerResult {
  double loss = 0.0;
  double labeled_loss = 0.0;
  double unlabeled_loss = 0.0;
  Gradients grads;
  std::vector<UnrollSegment> segments;
  double backward_seconds = 0.0;
};

struct LowerOptions {
  bool with_attractor = true;
  bool omega_gradient = true;
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct BranchResult {
  double loss = 0.0;
  Gradients grads;
  UnrollSegment segment;
  double backward_seconds = 0.0;
};

// Cross-entropy of one batch averaged over its own size, backpropagated to
// every parameter block. The attractor input is a constant, so d/ds = d/dlogits.
inline BranchResult lower_branch(const Matrix& x, const Matrix& targets, std::span<const double> weights,
                                 const ModelState& state, AttractorNorm norm, const LowerOptions& options) {
  BranchResult out;
  TrainForward fwd = forward_train(x, state, norm, options.with_attractor);
  LossAndGrad ce = cross_entropy(fwd.logits, targets, weights);
  out.loss = ce.loss;

  const auto start = Clock::now();
  if (options.with_attractor && options.omega_gradient) {
    out.grads.omega = mlp_backward(state.omega, fwd.attractor_cache, ce.grad);
  }
  out.grads.phi.weight.noalias() = fwd.features.transpose() * ce.grad;
  out.grads.phi.bias = ce.grad.colwise().sum();
  const Matrix d_features = ce.grad * state.phi.weight.transpose();
  out.grads.theta = mlp_backward(state.theta, fwd.extractor_cache, d_features);
  out.backward_seconds = seconds_since(start);

  const double inv_batch = x.rows() > 0 ? 1.0 / static_cast<double>(x.rows()) : 0.0;
  out.segment.row_scale.resize(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i) out.segment.row_scale[i] = weights[i] * inv_batch;
  out.segment.probs = softmax(fwd.logits);
  out.segment.features = std::move(fwd.features);
  out.segment.targets = targets;
  out.segment.attractor_input = std::move(fwd.attractor_input);
  out.segment.attractor_cache = std::move(fwd.attractor_cache);
  return out;
}

inline void accumulate(Gradients& total, const Gradients& part) {
  axpy(total.theta, 1.0, part.theta);
  axpy(total.phi, 1.0, part.phi);
  if (!part.omega.layers.empty()) {
    if (total.omega.layers.empty()) {
      total.omega = part.omega;
    } else {
      axpy(total.omega, 1.0, part.omega);
    }
  }
}

}  // namespace detail

/// Mean labeled cross-entropy on the attractor-augmented logits plus the mean
/// over the unlabeled batch of lambda_i * H(logits(x_strong_i), y_hat_i), with
/// analytic gradients for theta, phi and (optionally) omega.
inline LowerResult lower_loss(const Matrix& x_labeled, const Matrix& y_labeled, const PseudoBatch& pseudo,
                              const ModelState& state, AttractorNorm norm, const LowerOptions& options = {}) {
  require(x_labeled.rows() > 0, "lower_loss: labeled batch is empty");
  LowerResult out;
  const std::vector<double> ones(static_cast<std::size_t>(x_labeled.rows()), 1.0);
  detail::BranchResult labeled = detail::lower_branch(x_labeled, y_labeled, ones, state, norm, options);
  out.labeled_loss = labeled.loss;
  out.grads = std::move(labeled.grads);
  out.backward_seconds = labeled.backward_seconds;
  out.segments.push_back(std::move(labeled.segment));

  if (pseudo.rows() > 0) {
    detail::BranchResult unlabeled =
        detail::lower_branch(pseudo.x_strong, pseudo.y_hat, pseudo.lambda, state, norm, options);
    out.unlabeled_loss = unlabeled.loss;
    detail::accumulate(out.grads, unlabeled.grads);
    out.backward_seconds += unlabeled.backward_seconds;
    out.segments.push_back(std::move(unlabeled.segment));
  }
  out.loss = out.labeled_loss + out.unlabeled_loss;
  return out;
}

// ---------------------------------------------------------------------------
// Lower-level step
// ---------------------------------------------------------------------------

/// SGD or Adam over theta, phi and (for the joint ablations) omega.
class LowerOptimizer {
 public:
  LowerOptimizer() = default;
  LowerOptimizer(LowerOptimizerConfig config, const ModelState& state) : config_(config) {
    if (config_.kind == LowerOptimizerConfig::Kind::adam) {
      m_theta_ = v_theta_ = state.theta.zeros_like();
      m_phi_ = v_phi_ = state.phi.zeros_like();
      m_omega_ = v_omega_ = state.omega.zeros_like();
    }
  }

  const LowerOptimizerConfig& config() const { return config_; }
  std::uint64_t steps() const { return t_; }

  /// Applies one update and returns d(phi_new)/d(grad_phi) as a diagonal
  /// (stored with phi's shape, sign flipped so phi_new = phi - step(g) and
  /// the returned value is d step / d g).
  Dense step(ModelState& state, const Gradients& grads, double alpha, bool include_omega) {
    ++t_;
    if (config_.kind == LowerOptimizerConfig::Kind::sgd) {
      axpy(state.theta, -alpha, grads.theta);
      axpy(state.phi, -alpha, grads.phi);
      if (include_omega) axpy(state.omega, -alpha, grads.omega);
      Dense jac = state.phi.zeros_like();
      jac.weight.setConstant(alpha);
      jac.bias.setConstant(alpha);
      return jac;
    }
    for (std::size_t l = 0; l < state.theta.layers.size(); ++l) {
      adam(state.theta.layers[l], grads.theta.layers[l], m_theta_.layers[l], v_theta_.layers[l], alpha, nullptr);
    }
    Dense jac = state.phi.zeros_like();
    adam(state.phi, grads.phi, m_phi_, v_phi_, alpha, &jac);
    if (include_omega) {
      for (std::size_t l = 0; l < state.omega.layers.size(); ++l) {
        adam(state.omega.layers[l], grads.omega.layers[l], m_omega_.layers[l], v_omega_.layers[l], alpha, nullptr);
      }
    }
    return jac;
  }

 private:
  template <typename Param, typename Moment>
  void adam_array(Param& p, const Param& g, Moment& m, Moment& v, double alpha, Param* jac) const {
    const double b1 = config_.beta1, b2 = config_.beta2, eps = config_.epsilon;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      const double gi = g.data()[i];
      double& mi = m.data()[i];
      double& vi = v.data()[i];
      mi = b1 * mi + (1.0 - b1) * gi;
      vi = b2 * vi + (1.0 - b2) * gi * gi;
      const double m_hat = mi / bc1;
      const double root = std::sqrt(vi / bc2);
      const double denom = root + eps;
      p.data()[i] -= alpha * m_hat / denom;
      if (jac) {
        double d = (1.0 - b1) / (bc1 * denom);
        if (root > 0.0) d -= m_hat * (1.0 - b2) * gi / (bc2 * root * denom * denom);
        jac->data()[i] = alpha * d;
      }
    }
  }

  void adam(Dense& p, const Dense& g, Dense& m, Dense& v, double alpha, Dense* jac) const {
    adam_array(p.weight, g.weight, m.weight, v.weight, alpha, jac ? &jac->weight : nullptr);
    adam_array(p.bias, g.bias, m.bias, v.bias, alpha, jac ? &jac->bias : nullptr);
  }

  LowerOptimizerConfig config_;
  std::uint64_t t_ = 0;
  Mlp m_theta_, v_theta_, m_omega_, v_omega_;
  Dense m_phi_, v_phi_;
};

/// What the omega update needs from the lower step: the per-row record of the
/// classifier gradient and the derivative of the phi update with respect to
/// that gradient. Valid only for the state step it was produced at.
struct UnrollCache {
  std::vector<UnrollSegment> segments;
  Dense step_jacobian;
  std::uint64_t step = 0;
};

/// theta <- theta - step(g_theta), phi <- phi - step(g_phi). The dependence of
/// the new phi on omega is kept (via the returned cache); the new theta's
/// dependence on omega is dropped.
inline UnrollCache lower_step(ModelState& state, const Gradients& grads, std::vector<UnrollSegment> segments,
                              double alpha, LowerOptimizer& optimizer, bool include_omega = false) {
  UnrollCache cache;
  cache.step_jacobian = optimizer.step(state, grads, alpha, include_omega);
  cache.segments = std::move(segments);
  cache.step = ++state.step;
  return cache;
}

inline UnrollCache lower_step(ModelState& state, LowerResult&& lower, double alpha, LowerOptimizer& optimizer,
                              bool include_omega = false) {
  return lower_step(state, lower.grads, std::move(lower.segments), alpha, optimizer, include_omega);
}

// ---------------------------------------------------------------------------
// Upper-level loss
// ---------------------------------------------------------------------------

struct UpperResult {
  double loss = 0.0;
  Dense grad_phi;
  Mlp grad_theta;  // filled only on request
};

/// Mean cross-entropy of the plain classifier (no attractor) on a balanced
/// batch.
inline UpperResult upper_loss(const Matrix& x_balanced, const Matrix& y_balanced, const ModelState& state,
                              bool theta_gradient = false) {
  UpperResult out;
  MlpCache cache;
  const Matrix z = forward_features(x_balanced, state.theta, theta_gradient ? &cache : nullptr);
  LossAndGrad ce = cross_entropy(state.phi.forward(z), y_balanced);
  out.loss = ce.loss;
  out.grad_phi.weight.noalias() = z.transpose() * ce.grad;
  out.grad_phi.bias = ce.grad.colwise().sum();
  if (theta_gradient) {
    out.grad_theta = mlp_backward(state.theta, cache, ce.grad * state.phi.weight.transpose());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Omega update
// ---------------------------------------------------------------------------

/// Hypergradient d L_bal / d omega by reverse-mode differentiation of the
/// phi update: phi' = phi - step(sum_i r_i (p_i(omega) - y_i) [z_i; 1]).
/// The upper gradient is pulled back through the step, onto each row's
/// probabilities, through the softmax Jacobian and finally through the
/// attractor.
inline Mlp omega_hypergradient(const Mlp& omega, const UnrollCache& cache, const Dense& upper_grad) {
  // d L_bal / d g_phi = -(step Jacobian) .* upper_grad
  const Matrix pulled_w = -cache.step_jacobian.weight.cwiseProduct(upper_grad.weight);
  const RowVector pulled_b = -cache.step_jacobian.bias.cwiseProduct(upper_grad.bias);
  Mlp total = omega.zeros_like();
  for (const auto& seg : cache.segments) {
    if (seg.features.rows() == 0) continue;
    require(!seg.attractor_cache.inputs.empty(), "omega_hypergradient: segment has no attractor record");
    Matrix dp = seg.features * pulled_w;
    dp.rowwise() += pulled_b;
    for (Eigen::Index i = 0; i < dp.rows(); ++i) dp.row(i) *= seg.row_scale[static_cast<std::size_t>(i)];
    // softmax Jacobian: p .* (dp - <p, dp>)
    const Vector inner = seg.probs.cwiseProduct(dp).rowwise().sum();
    Matrix d_logits = seg.probs.cwiseProduct(dp - inner.replicate(1, dp.cols()));
    axpy(total, 1.0, mlp_backward(omega, seg.attractor_cache, d_logits));
  }
  return total;
}

/// omega <- omega - eta * hypergradient. Returns the hypergradient.
inline Mlp omega_step(ModelState& state, const UnrollCache& cache, const Dense& upper_grad, double eta) {
  if (cache.step != state.step) {
    throw Error("omega_step: stale unroll cache (cache step " + std::to_string(cache.step) + ", state step " +
                std::to_string(state.step) + ")");
  }
  Mlp grad = omega_hypergradient(state.omega, cache, upper_grad);
  axpy(state.omega, -eta, grad);
  return grad;
}

// ---------------------------------------------------------------------------
// Closed-form hypergradient
// ---------------------------------------------------------------------------

/// Closed-form omega gradient for one SGD iteration, assembled from explicit
/// per-sample Jacobians rather than by backpropagation:
///
///   G_i = (d(p_i - y_i)/d phi |_{phi})^T  mean_j d L_bal_j / d phi |_{phi'}
///   delta_omega = eta * alpha * sum_i r_i * (d Delta_i / d omega)^T G_i
///
/// with r_i the row's weight in the lower loss. Returns -delta_omega / eta,
/// the gradient that plain descent with rate eta would apply. Requires a
/// one-hidden-layer attractor.
inline Mlp omega_grad_closed_form(const Matrix& x_labeled, const Matrix& y_labeled, const PseudoBatch& pseudo,
                                  const Matrix& x_balanced, const Matrix& y_balanced, const ModelState& state,
                                  AttractorNorm norm, double alpha) {
  require(state.omega.layers.size() == 2, "omega_grad_closed_form: attractor must have one hidden layer");
  const Eigen::Index d = state.phi.in();
  const Eigen::Index classes = state.phi.out();
  const Eigen::Index phi_size = state.phi.parameter_count();

  // Lower step with plain SGD.
  const LowerResult lower = lower_loss(x_labeled, y_labeled, pseudo, state, norm, {true, false});
  Mlp theta_next = state.theta;
  axpy(theta_next, -alpha, lower.grads.theta);
  Dense phi_next = state.phi;
  axpy(phi_next, -alpha, lower.grads.phi);

  // Mean per-sample balanced-loss gradient at (theta', phi'), flattened in
  // flatten(Dense) order: weight (d x K) row-major, then bias.
  const Matrix z_bal = forward_features(x_balanced, theta_next);
  const Matrix q = softmax(phi_next.forward(z_bal));
  Vector mean_grad = Vector::Zero(phi_size);
  for (Eigen::Index j = 0; j < z_bal.rows(); ++j) {
    Vector g(phi_size);
    for (Eigen::Index c = 0; c < d; ++c) {
      for (Eigen::Index k = 0; k < classes; ++k) g[c * classes + k] = z_bal(j, c) * (q(j, k) - y_balanced(j, k));
    }
    for (Eigen::Index k = 0; k < classes; ++k) g[d * classes + k] = q(j, k) - y_balanced(j, k);
    mean_grad += g;
  }
  mean_grad /= static_cast<double>(z_bal.rows());

  const Dense& w1 = state.omega.layers[0];
  const Dense& w2 = state.omega.layers[1];
  const Eigen::Index hidden = w1.out();
  Vector delta_omega = Vector::Zero(state.omega.parameter_count());

  auto add_samples = [&](const Matrix& x, std::span<const double> weights, double inv_batch) {
    const TrainForward fwd = forward_train(x, state, norm, true);
    const Matrix p = softmax(fwd.logits);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double r = weights[static_cast<std::size_t>(i)] * inv_batch;
      if (r == 0.0) continue;
      // d p_k / d phi: softmax Jacobian times d s / d phi.
      Matrix jac_p(classes, phi_size);
      jac_p.setZero();
      for (Eigen::Index k = 0; k < classes; ++k) {
        for (Eigen::Index l = 0; l < classes; ++l) {
          const double j_kl = p(i, k) * ((k == l ? 1.0 : 0.0) - p(i, l));
          for (Eigen::Index c = 0; c < d; ++c) jac_p(k, c * classes + l) = j_kl * fwd.features(i, c);
          jac_p(k, d * classes + l) = j_kl;
        }
      }
      const Vector similarity = jac_p * mean_grad;  // G_i, one entry per class

      // d Delta_k / d omega for Delta = relu(u W1 + b1) W2 + b2.
      const RowVector u = fwd.attractor_input.row(i);
      const RowVector pre = w1.forward(u);
      Matrix jac_delta = Matrix::Zero(classes, state.omega.parameter_count());
      const Eigen::Index w1_size = w1.weight.size(), b1_size = w1.bias.size(), w2_size = w2.weight.size();
      for (Eigen::Index k = 0; k < classes; ++k) {
        for (Eigen::Index h = 0; h < hidden; ++h) {
          if (pre[h] <= 0.0) continue;
          for (Eigen::Index a = 0; a < classes; ++a) jac_delta(k, a * hidden + h) = w2.weight(h, k) * u[a];
          jac_delta(k, w1_size + h) = w2.weight(h, k);
          jac_delta(k, w1_size + b1_size + h * classes + k) = pre[h];
        }
        jac_delta(k, w1_size + b1_size + w2_size + k) = 1.0;
      }
      delta_omega += alpha * r * (jac_delta.transpose() * similarity);
    }
  };

  const std::vector<double> ones(static_cast<std::size_t>(x_labeled.rows()), 1.0);
  add_samples(x_labeled, ones, 1.0 / static_cast<double>(x_labeled.rows()));
  if (pseudo.rows() > 0) add_samples(pseudo.x_strong, pseudo.lambda, 1.0 / static_cast<double>(pseudo.rows()));

  Mlp grad = state.omega.zeros_like();
  unflatten(grad, -delta_omega);
  return grad;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct StepTrace {
  std::uint64_t iter = 0;
  double lower_loss = 0.0;
  double upper_loss = 0.0;
  double grad_norm_theta = 0.0;
  double grad_norm_phi = 0.0;
  double grad_norm_omega = 0.0;
  double mask_rate = 0.0;  // fraction of unlabeled rows passing the threshold
  double second_order_seconds = 0.0;
  double backward_seconds = 0.0;
};

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(const std::string& what, std::vector<StepTrace> traces)
      : Error(what), traces_(std::move(traces)) {}
  const std::vector<StepTrace>& traces() const { return traces_; }

 private:
  std::vector<StepTrace> traces_;
};

struct TrainHooks {
  /// Called after every iteration with the 1-based iteration number.
  std::function<void(std::uint64_t iter, const ModelState&)> after_iteration;
};

struct TrainResult {
  ModelState state;
  std::vector<StepTrace> traces;
};

/// Independent streams derived from the training seed.
enum class SeedStream : std::uint64_t { init = 1, sampling = 2, augmentation = 3 };

/// Runs config.iters iterations of the configured mode and returns the final
/// state with one trace row per iteration. Deterministic given config.seed.
inline TrainResult train(const TrainConfig& config, const ModelConfig& model, const TrainingView& labeled,
                         const TrainingView& unlabeled, const TrainHooks& hooks = {}) {
  const int classes = labeled.num_classes;
  config.validate(classes);
  require(labeled.rows() > 0, "train: labeled set is empty");
  require(unlabeled.rows() == 0 || unlabeled.features->cols() == labeled.features->cols(),
          "train: labeled and unlabeled feature widths differ");
  for (int y : labeled.labels) require(y >= 0 && y < classes, "train: labeled set contains unlabeled rows");

  const Rng master(config.seed);
  Rng init_rng = master.fork(static_cast<std::uint64_t>(SeedStream::init));
  Rng sample_rng = master.fork(static_cast<std::uint64_t>(SeedStream::sampling));
  Rng augment_rng = master.fork(static_cast<std::uint64_t>(SeedStream::augmentation));

  TrainResult result;
  result.state = init_model(model.dims(static_cast<int>(labeled.features->cols()), classes), init_rng);
  ModelState& state = result.state;
  LowerOptimizer optimizer(config.lower_optimizer, state);
  const ClassIndex class_index(labeled);
  const BalancedBatchSpec balanced_spec{config.balanced_n, classes};
  const bool attractor = config.mode != TrainMode::baseline;
  const bool has_unlabeled = unlabeled.rows() > 0 && config.batch_m > 0;

  for (std::uint64_t t = 1; t <= static_cast<std::uint64_t>(config.iters); ++t) {
    try {
      // Sample the three batches.
      const auto rows_l = sample_rows(static_cast<std::size_t>(labeled.rows()),
                                      static_cast<std::size_t>(config.batch_n), sample_rng);
      const auto rows_u = has_unlabeled ? sample_rows(static_cast<std::size_t>(unlabeled.rows()),
                                                      static_cast<std::size_t>(config.batch_m), sample_rng)
                                        : std::vector<std::size_t>{};
      const auto rows_b = balanced_batch(class_index, balanced_spec, sample_rng);

      const Matrix x_l = gather_rows(*labeled.features, rows_l) +
                         augment_rng.normal_matrix(static_cast<Eigen::Index>(rows_l.size()), labeled.features->cols(),
                                                   config.sigma_weak);
      const Matrix y_l = one_hot(gather_labels(labeled.labels, rows_l), classes);
      const Matrix x_b = gather_rows(*labeled.features, rows_b);
      const Matrix y_b = one_hot(gather_labels(labeled.labels, rows_b), classes);

      // Pseudo-labels from the weak view of the current (non-EMA) model.
      PseudoBatch pseudo;
      if (has_unlabeled) {
        AugmentedViews views = augment(gather_rows(*unlabeled.features, rows_u), config.sigma_weak,
                                       config.sigma_strong, augment_rng);
        const bool biased_path = attractor && !config.pseudo_from_classifier;
        const Matrix logits_weak = forward_train(views.weak, state, model.norm, biased_path).logits;
        PseudoLabels labels = assign_pseudo_labels(logits_weak, config.tau, config.lambda_u, config.pseudo_mode);
        pseudo.x_weak = std::move(views.weak);
        pseudo.x_strong = std::move(views.strong);
        pseudo.y_hat = std::move(labels.targets);
        pseudo.lambda = std::move(labels.weights);
        pseudo.hard = std::move(labels.hard);
      }

      const Rates rates = schedule_rates(config, t);
      StepTrace trace;
      trace.iter = t;
      if (!pseudo.lambda.empty()) {
        std::size_t kept = 0;
        for (double w : pseudo.lambda) kept += w > 0.0 ? 1 : 0;
        trace.mask_rate = static_cast<double>(kept) / static_cast<double>(pseudo.lambda.size());
      }

      const bool joint_omega = config.mode == TrainMode::plain_attractor || config.mode == TrainMode::single_level;
      LowerResult lower = lower_loss(x_l, y_l, pseudo, state, model.norm, {attractor, joint_omega});
      trace.lower_loss = lower.loss;
      trace.backward_seconds = lower.backward_seconds;
      trace.grad_norm_theta = std::sqrt(squared_norm(lower.grads.theta));
      trace.grad_norm_phi = std::sqrt(squared_norm(lower.grads.phi));
      if (joint_omega) trace.grad_norm_omega = std::sqrt(squared_norm(lower.grads.omega));

      switch (config.mode) {
        case TrainMode::baseline:
        case TrainMode::plain_attractor: {
          lower_step(state, std::move(lower), rates.alpha, optimizer, joint_omega);
          trace.upper_loss = upper_loss(x_b, y_b, state).loss;
          break;
        }
        case TrainMode::single_level: {
          const UpperResult upper = upper_loss(x_b, y_b, state, true);
          trace.upper_loss = upper.loss;
          axpy(lower.grads.theta, config.single_level_lambda, upper.grad_theta);
          axpy(lower.grads.phi, config.single_level_lambda, upper.grad_phi);
          lower_step(state, std::move(lower), rates.alpha, optimizer, true);
          break;
        }
        case TrainMode::l2ac: {
          const UnrollCache cache = lower_step(state, std::move(lower), rates.alpha, optimizer);
          const UpperResult upper = upper_loss(x_b, y_b, state);
          trace.upper_loss = upper.loss;
          const auto start = detail::Clock::now();
          const Mlp hypergrad = omega_step(state, cache, upper.grad_phi, rates.eta);
          trace.second_order_seconds = detail::seconds_since(start);
          trace.grad_norm_omega = std::sqrt(squared_norm(hypergrad));
          break;
        }
      }
      ema_update(state, config.ema_decay);
      result.traces.push_back(trace);

      if (!std::isfinite(trace.lower_loss) || !std::isfinite(trace.upper_loss)) {
        throw TrainingDiverged("train: non-finite loss at iteration " + std::to_string(t), std::move(result.traces));
      }
    } catch (const TrainingDiverged&) {
      throw;
    } catch (const Error& e) {
      // Anything the numeric kernel rejects mid-run (e.g. non-finite logits) is divergence.
      throw TrainingDiverged("train: iteration " + std::to_string(t) + ": " + e.what(), std::move(result.traces));
    }
    if (hooks.after_iteration) hooks.after_iteration(t, state);
  }
  return result;
}

}  // namespace l2ac
