#pragma once

// Network pieces: the feature extractor (MLP), the linear classifier, and the
// residual bias attractor that sits on top of the classifier during training.
// All backward passes are written out by hand.

#include "l2ac/numcore.hpp"

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace l2ac {

/// Affine layer y = x * weight + bias, weight stored (in x out).
struct Dense {
  Matrix weight;
  RowVector bias;

  Eigen::Index in() const { return weight.rows(); }
  Eigen::Index out() const { return weight.cols(); }
  Eigen::Index parameter_count() const { return weight.size() + bias.size(); }

  Matrix forward(const Matrix& x) const {
    Matrix y = x * weight;
    y.rowwise() += bias;
    return y;
  }

  static Dense zeros(Eigen::Index in, Eigen::Index out) {
    return {Matrix::Zero(in, out), RowVector::Zero(out)};
  }
  Dense zeros_like() const { return zeros(in(), out()); }

  bool operator==(const Dense& o) const {
    return weight.rows() == o.weight.rows() && weight.cols() == o.weight.cols() && bias.size() == o.bias.size() &&
           weight == o.weight && bias == o.bias;
  }
};

/// Rectifier between layers, linear output.
struct Mlp {
  std::vector<Dense> layers;

  Eigen::Index in() const { return layers.front().in(); }
  Eigen::Index out() const { return layers.back().out(); }
  Eigen::Index parameter_count() const {
    Eigen::Index n = 0;
    for (const auto& l : layers) n += l.parameter_count();
    return n;
  }
  Mlp zeros_like() const {
    Mlp m;
    for (const auto& l : layers) m.layers.push_back(l.zeros_like());
    return m;
  }
  bool operator==(const Mlp& o) const { return layers == o.layers; }
};

struct MlpCache {
  std::vector<Matrix> inputs;  // input of each layer
  std::vector<Matrix> pre;     // pre-activation output of each layer
};

inline Matrix relu(const Matrix& x) { return x.cwiseMax(0.0); }

inline Matrix mlp_forward(const Mlp& net, const Matrix& x, MlpCache* cache = nullptr) {
  require(!net.layers.empty(), "mlp_forward: empty network");
  require(x.cols() == net.in(), "mlp_forward: input has " + std::to_string(x.cols()) + " columns, expected " +
                                    std::to_string(net.in()));
  if (cache) {
    cache->inputs.clear();
    cache->pre.clear();
  }
  Matrix h = x;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    Matrix pre = net.layers[l].forward(h);
    const bool last = l + 1 == net.layers.size();
    Matrix next = last ? pre : relu(pre);
    if (cache) {
      cache->inputs.push_back(std::move(h));
      cache->pre.push_back(std::move(pre));
    }
    h = std::move(next);
  }
  return h;
}

/// Gradient of sum(d_out .* net(x)) with respect to the parameters, and
/// optionally with respect to the input.
inline Mlp mlp_backward(const Mlp& net, const MlpCache& cache, const Matrix& d_out, Matrix* d_input = nullptr) {
  Mlp grad = net.zeros_like();
  Matrix delta = d_out;
  for (std::size_t l = net.layers.size(); l-- > 0;) {
    grad.layers[l].weight.noalias() = cache.inputs[l].transpose() * delta;
    grad.layers[l].bias = delta.colwise().sum();
    if (l == 0 && !d_input) break;
    Matrix back = delta * net.layers[l].weight.transpose();
    if (l > 0) {
      back = back.cwiseProduct((cache.pre[l - 1].array() > 0.0).cast<double>().matrix());
      delta = std::move(back);
    } else {
      *d_input = std::move(back);
    }
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Parameter-set arithmetic
// ---------------------------------------------------------------------------

/// dst += scale * src
inline void axpy(Dense& dst, double scale, const Dense& src) {
  dst.weight += scale * src.weight;
  dst.bias += scale * src.bias;
}
inline void axpy(Mlp& dst, double scale, const Mlp& src) {
  for (std::size_t l = 0; l < dst.layers.size(); ++l) axpy(dst.layers[l], scale, src.layers[l]);
}

inline double squared_norm(const Dense& d) { return d.weight.squaredNorm() + d.bias.squaredNorm(); }
inline double squared_norm(const Mlp& m) {
  double s = 0.0;
  for (const auto& l : m.layers) s += squared_norm(l);
  return s;
}

inline Vector flatten(const Dense& d) {
  Vector v(d.parameter_count());
  v.head(d.weight.size()) = Eigen::Map<const Vector>(d.weight.data(), d.weight.size());
  v.tail(d.bias.size()) = d.bias.transpose();
  return v;
}
inline Vector flatten(const Mlp& m) {
  Vector v(m.parameter_count());
  Eigen::Index at = 0;
  for (const auto& l : m.layers) {
    v.segment(at, l.parameter_count()) = flatten(l);
    at += l.parameter_count();
  }
  return v;
}
inline void unflatten(Dense& d, const Vector& v) {
  require(v.size() == d.parameter_count(), "unflatten: size mismatch");
  Eigen::Map<Vector>(d.weight.data(), d.weight.size()) = v.head(d.weight.size());
  d.bias = v.tail(d.bias.size()).transpose();
}
inline void unflatten(Mlp& m, const Vector& v) {
  require(v.size() == m.parameter_count(), "unflatten: size mismatch");
  Eigen::Index at = 0;
  for (auto& l : m.layers) {
    unflatten(l, v.segment(at, l.parameter_count()));
    at += l.parameter_count();
  }
}

// ---------------------------------------------------------------------------
// Model state
// ---------------------------------------------------------------------------

enum class AttractorNorm { softmax_input, l2_input };

inline std::string to_string(AttractorNorm norm) {
  return norm == AttractorNorm::softmax_input ? "softmax" : "l2";
}
inline AttractorNorm parse_attractor_norm(const std::string& name) {
  if (name == "softmax" || name == "softmax_input") return AttractorNorm::softmax_input;
  if (name == "l2" || name == "l2_input") return AttractorNorm::l2_input;
  throw Error("unknown attractor norm '" + name + "'");
}

inline constexpr int kDefaultAttractorHidden = 256;

struct ModelDims {
  int input_dim = 0;
  std::vector<int> hidden;  // extractor hidden widths; may be empty
  int feature_dim = 0;
  int num_classes = 0;
  int attractor_hidden = kDefaultAttractorHidden;

  bool operator==(const ModelDims&) const = default;
};

/// theta = extractor, phi = linear classifier, omega = bias attractor
/// (K -> H -> K). The EMA shadows cover theta and phi only. `step` counts
/// lower-level updates and ties unroll caches to the state they came from.
struct ModelState {
  Mlp theta;
  Dense phi;
  Mlp omega;
  Mlp ema_theta;
  Dense ema_phi;
  std::uint64_t step = 0;

  int num_classes() const { return static_cast<int>(phi.out()); }
  bool operator==(const ModelState&) const = default;
};

inline Dense glorot_dense(Eigen::Index in, Eigen::Index out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  Dense d = Dense::zeros(in, out);
  for (Eigen::Index i = 0; i < d.weight.size(); ++i) d.weight.data()[i] = rng.uniform(-limit, limit);
  return d;
}

/// Glorot-uniform weights and zero biases everywhere, except the attractor's
/// output layer, which starts at exactly zero so the attractor is initially a
/// no-op.
inline ModelState init_model(const ModelDims& dims, Rng& rng) {
  require(dims.input_dim >= 1 && dims.feature_dim >= 1 && dims.num_classes >= 2 && dims.attractor_hidden >= 1,
          "init_model: dimensions must be positive and K >= 2");
  for (int h : dims.hidden) require(h >= 1, "init_model: hidden widths must be positive");
  ModelState s;
  std::vector<int> widths{dims.input_dim};
  widths.insert(widths.end(), dims.hidden.begin(), dims.hidden.end());
  widths.push_back(dims.feature_dim);
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) s.theta.layers.push_back(glorot_dense(widths[l], widths[l + 1], rng));
  s.phi = glorot_dense(dims.feature_dim, dims.num_classes, rng);
  s.omega.layers.push_back(glorot_dense(dims.num_classes, dims.attractor_hidden, rng));
  s.omega.layers.push_back(Dense::zeros(dims.attractor_hidden, dims.num_classes));
  s.ema_theta = s.theta;
  s.ema_phi = s.phi;
  return s;
}

inline ModelDims dims_of(const ModelState& s) {
  ModelDims d;
  d.input_dim = static_cast<int>(s.theta.in());
  for (std::size_t l = 0; l + 1 < s.theta.layers.size(); ++l) d.hidden.push_back(static_cast<int>(s.theta.layers[l].out()));
  d.feature_dim = static_cast<int>(s.theta.out());
  d.num_classes = s.num_classes();
  d.attractor_hidden = static_cast<int>(s.omega.layers.front().out());
  return d;
}

inline Matrix forward_features(const Matrix& x, const Mlp& theta, MlpCache* cache = nullptr) {
  return mlp_forward(theta, x, cache);
}

/// Attractor input. L2 mode maps a zero row to a zero row.
inline Matrix normalize_attractor_input(const Matrix& scores, AttractorNorm norm) {
  if (norm == AttractorNorm::softmax_input) return softmax(scores);
  Matrix u = scores;
  for (Eigen::Index i = 0; i < u.rows(); ++i) {
    const double n = u.row(i).norm();
    if (n > 0.0) u.row(i) /= n;
  }
  return u;
}

/// Everything the training path computes, kept for the backward passes.
struct TrainForward {
  Matrix features;         // z
  Matrix scores;           // s = phi(z)
  Matrix attractor_input;  // u = normalize(s), treated as a constant
  Matrix delta;            // attractor output
  Matrix logits;           // s + delta
  MlpCache extractor_cache;
  MlpCache attractor_cache;
  bool with_attractor = true;
};

/// Training-time logits s + omega(normalize(s)). With with_attractor=false the
/// attractor is skipped entirely and logits = s.
inline TrainForward forward_train(const Matrix& x, const ModelState& state, AttractorNorm norm,
                                  bool with_attractor = true) {
  TrainForward f;
  f.with_attractor = with_attractor;
  f.features = forward_features(x, state.theta, &f.extractor_cache);
  f.scores = state.phi.forward(f.features);
  if (!with_attractor) {
    f.logits = f.scores;
    return f;
  }
  f.attractor_input = normalize_attractor_input(f.scores, norm);
  f.delta = mlp_forward(state.omega, f.attractor_input, &f.attractor_cache);
  f.logits = f.scores + f.delta;
  return f;
}

/// Test-time logits phi(theta(x)); the attractor is never read.
inline Matrix forward_eval(const Matrix& x, const ModelState& state, bool use_ema) {
  const Mlp& theta = use_ema ? state.ema_theta : state.theta;
  const Dense& phi = use_ema ? state.ema_phi : state.phi;
  return phi.forward(forward_features(x, theta));
}

/// Predicted labels; ties resolve to the lowest class index.
inline std::vector<int> predict(const Matrix& logits) { return argmax_rows(logits); }

/// shadow <- decay * shadow + (1 - decay) * param for theta and phi.
inline void ema_update(ModelState& state, double decay) {
  require(decay >= 0.0 && decay <= 1.0, "ema_update: decay must be in [0, 1]");
  auto blend = [decay](Dense& shadow, const Dense& param) {
    shadow.weight = decay * shadow.weight + (1.0 - decay) * param.weight;
    shadow.bias = decay * shadow.bias + (1.0 - decay) * param.bias;
  };
  for (std::size_t l = 0; l < state.theta.layers.size(); ++l) blend(state.ema_theta.layers[l], state.theta.layers[l]);
  blend(state.ema_phi, state.phi);
}

}  // namespace l2ac
