#pragma once

// Invariant suite behind `l2ac selfcheck`: finite-difference gradient checks,
// the closed-form hypergradient oracle, masking, and the residual identities.

#include "l2ac/bilevel.hpp"

#include <algorithm>
#include <string>
#include <vector>

namespace l2ac::selfcheck {

struct InstanceSize {
  int input_dim = 3;
  std::vector<int> hidden{3};
  int feature_dim = 3;
  int num_classes = 3;
  int attractor_hidden = 4;
  int batch_n = 4;
  int batch_m = 4;
  int balanced_per_class = 1;
};

/// A small random problem with every parameter block non-trivial (the
/// attractor's output layer is randomized) and some unlabeled rows masked.
struct Instance {
  ModelState state;
  Matrix x_l, y_l;
  PseudoBatch pseudo;
  Matrix x_b, y_b;
  AttractorNorm norm = AttractorNorm::softmax_input;
  double alpha = 0.5;
};

inline void randomize(Dense& d, Rng& rng, double sd) {
  d.weight = rng.normal_matrix(d.in(), d.out(), sd);
  d.bias = rng.normal_matrix(1, d.out(), 0.1 * sd);
}

inline Matrix random_targets(Eigen::Index rows, int classes, Rng& rng, bool soft) {
  if (!soft) {
    std::vector<int> labels(static_cast<std::size_t>(rows));
    for (auto& y : labels) y = static_cast<int>(rng.index(static_cast<std::size_t>(classes)));
    return one_hot(labels, classes);
  }
  Matrix t(rows, classes);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (int k = 0; k < classes; ++k) t(i, k) = 0.1 + rng.uniform();
    t.row(i) /= t.row(i).sum();
  }
  return t;
}

inline Instance make_instance(const InstanceSize& size, AttractorNorm norm, Rng& rng, bool soft_pseudo = false) {
  Instance inst;
  inst.norm = norm;
  inst.state = init_model({size.input_dim, size.hidden, size.feature_dim, size.num_classes, size.attractor_hidden}, rng);
  for (auto& l : inst.state.theta.layers) randomize(l, rng, 0.8);
  randomize(inst.state.phi, rng, 0.8);
  for (auto& l : inst.state.omega.layers) randomize(l, rng, 0.8);
  inst.state.ema_theta = inst.state.theta;
  inst.state.ema_phi = inst.state.phi;

  inst.x_l = rng.normal_matrix(size.batch_n, size.input_dim);
  inst.y_l = random_targets(size.batch_n, size.num_classes, rng, false);
  if (size.batch_m > 0) {
    inst.pseudo.x_weak = rng.normal_matrix(size.batch_m, size.input_dim);
    inst.pseudo.x_strong = rng.normal_matrix(size.batch_m, size.input_dim);
    inst.pseudo.y_hat = random_targets(size.batch_m, size.num_classes, rng, soft_pseudo);
    inst.pseudo.hard = argmax_rows(inst.pseudo.y_hat);
    inst.pseudo.lambda.resize(static_cast<std::size_t>(size.batch_m));
    for (auto& w : inst.pseudo.lambda) w = rng.uniform() < 0.3 ? 0.0 : 0.5 + rng.uniform();
  }
  std::vector<int> balanced;
  for (int k = 0; k < size.num_classes; ++k) {
    for (int r = 0; r < size.balanced_per_class; ++r) balanced.push_back(k);
  }
  inst.x_b = rng.normal_matrix(static_cast<Eigen::Index>(balanced.size()), size.input_dim);
  inst.y_b = one_hot(balanced, size.num_classes);
  inst.alpha = 0.2 + rng.uniform();
  return inst;
}

/// Random sizes within d, K, H <= 4 and batches <= 6.
inline InstanceSize random_small_size(Rng& rng) {
  auto pick = [&rng](int lo, int hi) { return lo + static_cast<int>(rng.index(static_cast<std::size_t>(hi - lo + 1))); };
  InstanceSize s;
  s.input_dim = pick(1, 4);
  s.hidden = {pick(1, 4)};
  s.feature_dim = pick(1, 4);
  s.num_classes = pick(2, 4);
  s.attractor_hidden = pick(1, 4);
  s.batch_n = pick(1, 6);
  s.batch_m = pick(0, 6);
  s.balanced_per_class = pick(1, std::max(1, 6 / s.num_classes));
  return s;
}

// ---------------------------------------------------------------------------
// Hypergradient: unrolled vs closed form
// ---------------------------------------------------------------------------

/// Unrolled hypergradient for one lower step with the given optimizer.
inline Mlp unrolled_hypergradient(const Instance& inst, LowerOptimizer optimizer) {
  ModelState work = inst.state;
  LowerResult lower = lower_loss(inst.x_l, inst.y_l, inst.pseudo, work, inst.norm, {true, false});
  const UnrollCache cache = lower_step(work, std::move(lower), inst.alpha, optimizer);
  const UpperResult upper = upper_loss(inst.x_b, inst.y_b, work);
  return omega_hypergradient(work.omega, cache, upper.grad_phi);
}

inline Mlp unrolled_hypergradient(const Instance& inst) {
  return unrolled_hypergradient(inst, LowerOptimizer(LowerOptimizerConfig{}, inst.state));
}

/// max |a - b| / max |b|; both vectors below 1e-14 count as agreement.
inline double relative_discrepancy(const Vector& a, const Vector& b) {
  const double scale = b.cwiseAbs().maxCoeff();
  const double diff = (a - b).cwiseAbs().maxCoeff();
  if (scale < 1e-14) return a.cwiseAbs().maxCoeff() < 1e-14 ? 0.0 : diff;
  return diff / scale;
}

inline double closed_form_discrepancy(const Instance& inst) {
  const Mlp closed = omega_grad_closed_form(inst.x_l, inst.y_l, inst.pseudo, inst.x_b, inst.y_b, inst.state,
                                            inst.norm, inst.alpha);
  return relative_discrepancy(flatten(unrolled_hypergradient(inst)), flatten(closed));
}

/// Worst discrepancy over `count` random small instances, alternating the
/// attractor norm.
inline double worst_closed_form_discrepancy(Rng& rng, int count) {
  double worst = 0.0;
  for (int i = 0; i < count; ++i) {
    const AttractorNorm norm = i % 2 == 0 ? AttractorNorm::softmax_input : AttractorNorm::l2_input;
    const Instance inst = make_instance(random_small_size(rng), norm, rng, i % 3 == 0);
    worst = std::max(worst, closed_form_discrepancy(inst));
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

inline constexpr double kFdEpsilon = 1e-6;

inline double check_cross_entropy(Rng& rng) {
  const Matrix logits = rng.normal_matrix(5, 4, 2.0);
  const Matrix targets = random_targets(5, 4, rng, true);
  const std::vector<double> weights{1.0, 0.0, 0.7, 2.0, 1.3};
  const LossAndGrad ce = cross_entropy(logits, targets, weights);
  auto f = [&](const Vector& v) {
    const Matrix l = Eigen::Map<const Matrix>(v.data(), logits.rows(), logits.cols());
    return cross_entropy(l, targets, weights).loss;
  };
  const Vector point = Eigen::Map<const Vector>(logits.data(), logits.size());
  const Vector analytic = Eigen::Map<const Vector>(ce.grad.data(), ce.grad.size());
  return grad_check(f, analytic, point, kFdEpsilon);
}

enum class Block { theta, phi, omega };

/// Lower loss with the attractor output held at its value under inst.state,
/// matching the stop-gradient on the attractor input.
inline double frozen_lower_loss(const Instance& inst, const ModelState& s) {
  auto branch = [&](const Matrix& x, const Matrix& targets, std::span<const double> weights) {
    const Matrix delta = forward_train(x, inst.state, inst.norm).delta;
    return cross_entropy(s.phi.forward(forward_features(x, s.theta)) + delta, targets, weights).loss;
  };
  const std::vector<double> ones(static_cast<std::size_t>(inst.x_l.rows()), 1.0);
  double loss = branch(inst.x_l, inst.y_l, ones);
  if (inst.pseudo.rows() > 0) loss += branch(inst.pseudo.x_strong, inst.pseudo.y_hat, inst.pseudo.lambda);
  return loss;
}

/// Lower-loss gradient of one parameter block against central differences.
inline double check_lower_block(const Instance& inst, Block block) {
  const LowerResult lower = lower_loss(inst.x_l, inst.y_l, inst.pseudo, inst.state, inst.norm, {true, true});
  auto loss_at = [&](const Vector& v) {
    ModelState s = inst.state;
    if (block == Block::theta) unflatten(s.theta, v);
    if (block == Block::phi) unflatten(s.phi, v);
    if (block == Block::omega) {
      unflatten(s.omega, v);
      return lower_loss(inst.x_l, inst.y_l, inst.pseudo, s, inst.norm, {true, false}).loss;
    }
    return frozen_lower_loss(inst, s);
  };
  switch (block) {
    case Block::theta: return grad_check(loss_at, flatten(lower.grads.theta), flatten(inst.state.theta), kFdEpsilon);
    case Block::phi: return grad_check(loss_at, flatten(lower.grads.phi), flatten(inst.state.phi), kFdEpsilon);
    case Block::omega: return grad_check(loss_at, flatten(lower.grads.omega), flatten(inst.state.omega), kFdEpsilon);
  }
  return 0.0;
}

/// Upper-loss gradients for phi and theta.
inline double check_upper(const Instance& inst) {
  const UpperResult upper = upper_loss(inst.x_b, inst.y_b, inst.state, true);
  auto at_phi = [&](const Vector& v) {
    ModelState s = inst.state;
    unflatten(s.phi, v);
    return upper_loss(inst.x_b, inst.y_b, s).loss;
  };
  auto at_theta = [&](const Vector& v) {
    ModelState s = inst.state;
    unflatten(s.theta, v);
    return upper_loss(inst.x_b, inst.y_b, s).loss;
  };
  return std::max(grad_check(at_phi, flatten(upper.grad_phi), flatten(inst.state.phi), kFdEpsilon),
                  grad_check(at_theta, flatten(upper.grad_theta), flatten(inst.state.theta), kFdEpsilon));
}

/// omega -> L_bal(theta', phi - step(g_phi(omega))) with theta' held at the
/// value the real step produced, against the unrolled hypergradient.
/// Returns the grad_check score and, via `normalized`, the error relative to
/// the largest numeric entry.
inline double check_composite(const Instance& inst, const LowerOptimizer& optimizer, double* normalized = nullptr) {
  ModelState stepped = inst.state;
  {
    LowerOptimizer opt = optimizer;
    const LowerResult lower = lower_loss(inst.x_l, inst.y_l, inst.pseudo, stepped, inst.norm, {true, false});
    opt.step(stepped, lower.grads, inst.alpha, false);
  }
  const Mlp theta_next = stepped.theta;
  auto f = [&](const Vector& v) {
    ModelState s = inst.state;
    unflatten(s.omega, v);
    LowerOptimizer opt = optimizer;
    const LowerResult lower = lower_loss(inst.x_l, inst.y_l, inst.pseudo, s, inst.norm, {true, false});
    opt.step(s, lower.grads, inst.alpha, false);
    s.theta = theta_next;
    return upper_loss(inst.x_b, inst.y_b, s).loss;
  };
  const Vector analytic = flatten(unrolled_hypergradient(inst, optimizer));
  const Vector point = flatten(inst.state.omega);
  if (normalized) {
    const Vector numeric = numeric_gradient(f, point, kFdEpsilon);
    *normalized = relative_discrepancy(analytic, numeric);
  }
  return grad_check(f, analytic, point, kFdEpsilon);
}

/// An Adam optimizer with two steps of moment history, so its step Jacobian
/// is far from the first-step sign regime.
inline LowerOptimizer warmed_adam(const Instance& inst, Rng& rng) {
  ModelState scratch = inst.state;
  LowerOptimizer opt(LowerOptimizerConfig{LowerOptimizerConfig::Kind::adam}, scratch);
  for (int s = 0; s < 2; ++s) {
    Gradients g{scratch.theta.zeros_like(), scratch.phi.zeros_like(), {}};
    for (auto& l : g.theta.layers) randomize(l, rng, 1.0);
    randomize(g.phi, rng, 1.0);
    opt.step(scratch, g, inst.alpha, false);
  }
  return opt;
}

// ---------------------------------------------------------------------------
// Masking and residual identities
// ---------------------------------------------------------------------------

inline bool all_zero(const Mlp& m) {
  for (const auto& l : m.layers) {
    if ((l.weight.array() != 0.0).any() || (l.bias.array() != 0.0).any()) return false;
  }
  return true;
}

inline bool all_zero(const Dense& d) { return all_zero(Mlp{{d}}); }

/// An unlabeled batch whose rows all fall below tau contributes exactly zero
/// to the loss, to every gradient block and to the hypergradient.
inline bool masking_is_exact(const Instance& inst) {
  PseudoBatch masked = inst.pseudo;
  if (masked.rows() == 0) return true;
  const Matrix logits_weak = forward_train(masked.x_weak, inst.state, inst.norm).logits;
  const PseudoLabels labels = assign_pseudo_labels(logits_weak, 1.0, 1.0, PseudoLabelMode::hard());
  const Matrix probs = softmax(logits_weak);
  bool below = true;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) below = below && probs.row(i).maxCoeff() < 1.0;
  if (!below) return false;  // instance unsuitable; logits saturated
  masked.y_hat = labels.targets;
  masked.lambda = labels.weights;

  const detail::BranchResult branch =
      detail::lower_branch(masked.x_strong, masked.y_hat, masked.lambda, inst.state, inst.norm, {true, true});
  bool ok = branch.loss == 0.0 && all_zero(branch.grads.theta) && all_zero(branch.grads.phi) &&
            all_zero(branch.grads.omega);
  for (double r : branch.segment.row_scale) ok = ok && r == 0.0;

  const LowerResult with = lower_loss(inst.x_l, inst.y_l, masked, inst.state, inst.norm, {true, true});
  const LowerResult without = lower_loss(inst.x_l, inst.y_l, PseudoBatch{}, inst.state, inst.norm, {true, true});
  ok = ok && with.loss == without.loss && with.grads.theta == without.grads.theta &&
       with.grads.phi == without.grads.phi && with.grads.omega == without.grads.omega;

  UnrollCache only_masked;
  only_masked.segments.push_back(branch.segment);
  only_masked.step_jacobian = inst.state.phi.zeros_like();
  only_masked.step_jacobian.weight.setConstant(inst.alpha);
  only_masked.step_jacobian.bias.setConstant(inst.alpha);
  const UpperResult upper = upper_loss(inst.x_b, inst.y_b, inst.state);
  ok = ok && all_zero(omega_hypergradient(inst.state.omega, only_masked, upper.grad_phi));
  return ok;
}

/// Zero attractor output layer: training logits equal evaluation logits.
inline bool residual_identity_holds(const Instance& inst) {
  ModelState s = inst.state;
  s.omega.layers.back() = s.omega.layers.back().zeros_like();
  const Matrix x = inst.x_l;
  return forward_train(x, s, inst.norm).logits == forward_eval(x, s, false) &&
         forward_train(x, s, inst.norm).logits == forward_train(x, s, inst.norm, false).logits;
}

/// Evaluation never reads omega.
inline bool eval_ignores_omega(const Instance& inst, Rng& rng) {
  ModelState s = inst.state;
  const Matrix before = forward_eval(inst.x_l, s, false);
  const Matrix before_ema = forward_eval(inst.x_l, s, true);
  for (auto& l : s.omega.layers) randomize(l, rng, 5.0);
  return forward_eval(inst.x_l, s, false) == before && forward_eval(inst.x_l, s, true) == before_ema;
}

/// The omega step leaves theta, phi and the EMA shadows bit-identical.
inline bool omega_step_isolated(const Instance& inst) {
  ModelState s = inst.state;
  LowerOptimizer opt(LowerOptimizerConfig{}, s);
  LowerResult lower = lower_loss(inst.x_l, inst.y_l, inst.pseudo, s, inst.norm, {true, false});
  const UnrollCache cache = lower_step(s, std::move(lower), inst.alpha, opt);
  const ModelState before = s;
  const UpperResult upper = upper_loss(inst.x_b, inst.y_b, s);
  omega_step(s, cache, upper.grad_phi, 0.7);
  return s.theta == before.theta && s.phi == before.phi && s.ema_theta == before.ema_theta &&
         s.ema_phi == before.ema_phi && !(s.omega == before.omega);
}

// ---------------------------------------------------------------------------
// Suite
// ---------------------------------------------------------------------------

struct CheckResult {
  std::string name;
  double value = 0.0;      // worst error, or 0/1 for boolean checks
  double tolerance = 0.0;
  bool passed = false;
};

inline CheckResult numeric(std::string name, double value, double tolerance) {
  return {std::move(name), value, tolerance, value <= tolerance};
}

inline CheckResult boolean(std::string name, bool ok) { return {std::move(name), ok ? 0.0 : 1.0, 0.0, ok}; }

inline std::vector<CheckResult> run_suite(std::uint64_t seed = 7, int oracle_instances = 100) {
  Rng rng(seed);
  std::vector<CheckResult> out;
  out.push_back(numeric("grad cross_entropy", check_cross_entropy(rng), 1e-5));

  double lower_worst = 0.0, upper_worst = 0.0, composite_worst = 0.0, adam_worst = 0.0;
  bool masking = true, residual = true, eval_omega = true, isolated = true;
  for (int trial = 0; trial < 6; ++trial) {
    const AttractorNorm norm = trial % 2 == 0 ? AttractorNorm::softmax_input : AttractorNorm::l2_input;
    InstanceSize size;
    size.hidden = trial < 3 ? std::vector<int>{3} : std::vector<int>{4, 3};
    const Instance inst = make_instance(size, norm, rng, trial % 3 == 1);
    for (Block b : {Block::theta, Block::phi, Block::omega}) lower_worst = std::max(lower_worst, check_lower_block(inst, b));
    upper_worst = std::max(upper_worst, check_upper(inst));
    composite_worst = std::max(composite_worst, check_composite(inst, LowerOptimizer(LowerOptimizerConfig{}, inst.state)));
    adam_worst = std::max(adam_worst, check_composite(inst, warmed_adam(inst, rng)));
    masking = masking && masking_is_exact(inst);
    residual = residual && residual_identity_holds(inst);
    eval_omega = eval_omega && eval_ignores_omega(inst, rng);
    isolated = isolated && omega_step_isolated(inst);
  }
  out.push_back(numeric("grad lower theta/phi/omega", lower_worst, 1e-5));
  out.push_back(numeric("grad upper theta/phi", upper_worst, 1e-5));
  out.push_back(numeric("grad omega hypergradient (sgd)", composite_worst, 1e-5));
  out.push_back(numeric("grad omega hypergradient (adam)", adam_worst, 1e-5));
  out.push_back(numeric("closed-form oracle", worst_closed_form_discrepancy(rng, oracle_instances), 1e-6));
  out.push_back(boolean("masking exact zero", masking));
  out.push_back(boolean("zero attractor => train == eval", residual));
  out.push_back(boolean("eval independent of omega", eval_omega));
  out.push_back(boolean("omega step leaves theta/phi", isolated));
  return out;
}

}  // namespace l2ac::selfcheck
