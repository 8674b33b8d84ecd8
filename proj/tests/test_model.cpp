#include "l2ac/io.hpp"
#include "l2ac/model.hpp"

#include <gtest/gtest.h>

#include <filesystem>

namespace l2ac {
namespace {

Matrix mat(Eigen::Index r, Eigen::Index c, std::initializer_list<double> v) {
  Matrix m(r, c);
  std::copy(v.begin(), v.end(), m.data());
  return m;
}

Dense dense(Eigen::Index in, Eigen::Index out, std::initializer_list<double> w, std::initializer_list<double> b) {
  Dense d = Dense::zeros(in, out);
  d.weight = mat(in, out, w);
  d.bias = mat(1, out, b);
  return d;
}

// d=2, K=2, H=2 instance whose forward pass was evaluated by hand.
ModelState hand_state() {
  ModelState s;
  s.theta.layers = {dense(2, 2, {1.0, 0.5, -0.5, 2.0}, {0.1, -0.2})};
  s.phi = dense(2, 2, {0.3, -0.2, 0.1, 0.4}, {0.05, -0.05});
  s.omega.layers = {dense(2, 2, {1.0, -1.0, 0.5, 2.0}, {0.0, -0.5}), dense(2, 2, {0.2, -0.3, -0.1, 0.4}, {0.01, 0.02})};
  s.ema_theta = s.theta;
  s.ema_phi = s.phi;
  return s;
}

ModelState random_state(std::uint64_t seed, int hidden_attractor = 8) {
  Rng rng(seed);
  ModelState s = init_model({5, {7, 6}, 4, 3, hidden_attractor}, rng);
  s.omega.layers.back().weight = rng.normal_matrix(hidden_attractor, 3);
  return s;
}

TEST(Init, ShapesAndZeroAttractorOutput) {
  Rng rng(1);
  const ModelState s = init_model({5, {7, 6}, 4, 3, 16}, rng);
  EXPECT_EQ(s.theta.layers.size(), 3u);
  EXPECT_EQ(s.phi.in(), 4);
  EXPECT_EQ(s.phi.out(), 3);
  EXPECT_EQ(s.omega.in(), 3);
  EXPECT_EQ(s.omega.out(), 3);
  EXPECT_TRUE((s.omega.layers.back().weight.array() == 0.0).all());
  EXPECT_TRUE((s.omega.layers.back().bias.array() == 0.0).all());
  EXPECT_EQ(s.ema_theta, s.theta);
  EXPECT_EQ(s.ema_phi, s.phi);
  EXPECT_EQ(dims_of(s), (ModelDims{5, {7, 6}, 4, 3, 16}));
}

TEST(Init, DefaultAttractorWidth) {
  EXPECT_EQ(ModelDims{}.attractor_hidden, 256);
  EXPECT_EQ(kDefaultAttractorHidden, 256);
}

TEST(Init, SameSeedSameParameters) {
  Rng a(3), b(3);
  EXPECT_EQ(init_model({4, {5}, 3, 2, 8}, a), init_model({4, {5}, 3, 2, 8}, b));
}

TEST(Init, TrainEqualsEvalAfterInit) {
  Rng rng(4);
  const ModelState s = init_model({4, {5}, 3, 3, 8}, rng);
  const Matrix x = rng.normal_matrix(10, 4);
  for (auto norm : {AttractorNorm::softmax_input, AttractorNorm::l2_input}) {
    EXPECT_LE((forward_train(x, s, norm).logits - forward_eval(x, s, false)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Dense, IdentityAndEmptyBatch) {
  Mlp net{{dense(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}, {0, 0, 0})}};
  const Matrix x = mat(2, 3, {1, -2, 3, 4, 5, -6});
  EXPECT_EQ(forward_features(x, net), x);
  const Matrix empty(0, 3);
  EXPECT_EQ(forward_features(empty, net).rows(), 0);
}

TEST(Mlp, BackwardMatchesFiniteDifferences) {
  Rng rng(5);
  Mlp net;
  net.layers = {glorot_dense(4, 6, rng), glorot_dense(6, 5, rng), glorot_dense(5, 3, rng)};
  for (auto& l : net.layers) l.bias = rng.normal_matrix(1, l.out(), 0.3);
  const Matrix x = rng.normal_matrix(7, 4);
  const Matrix upstream = rng.normal_matrix(7, 3);
  // f = <upstream, net(x)>: its gradient is the vector-Jacobian product.
  MlpCache cache;
  mlp_forward(net, x, &cache);
  Matrix d_input;
  const Mlp grads = mlp_backward(net, cache, upstream, &d_input);
  auto f_params = [&](const Vector& v) {
    Mlp n = net;
    unflatten(n, v);
    return (mlp_forward(n, x).array() * upstream.array()).sum();
  };
  EXPECT_LT(grad_check(f_params, flatten(grads), flatten(net), 1e-6), 1e-6);
  auto f_input = [&](const Vector& v) {
    return (mlp_forward(net, Eigen::Map<const Matrix>(v.data(), 7, 4)).array() * upstream.array()).sum();
  };
  EXPECT_LT(grad_check(f_input, Eigen::Map<const Vector>(d_input.data(), d_input.size()),
                       Eigen::Map<const Vector>(x.data(), x.size()), 1e-6),
            1e-6);
}

TEST(Flatten, RoundTrip) {
  const ModelState s = random_state(6);
  Mlp copy = s.theta.zeros_like();
  unflatten(copy, flatten(s.theta));
  EXPECT_EQ(copy, s.theta);
  EXPECT_EQ(flatten(s.phi).size(), s.phi.parameter_count());
  // weight row-major then bias
  EXPECT_EQ(flatten(s.phi)[1], s.phi.weight(0, 1));
  EXPECT_EQ(flatten(s.phi)[s.phi.weight.size()], s.phi.bias[0]);
}

TEST(ForwardTrain, HandComputedInstance) {
  const ModelState s = hand_state();
  const Matrix x = mat(1, 2, {0.5, -1.0});
  const TrainForward f = forward_train(x, s, AttractorNorm::softmax_input);
  EXPECT_NEAR(f.features(0, 0), 1.1, 1e-15);
  EXPECT_NEAR(f.features(0, 1), -1.95, 1e-15);
  EXPECT_NEAR(f.scores(0, 0), 0.185, 1e-15);
  EXPECT_NEAR(f.scores(0, 1), -1.05, 1e-15);
  EXPECT_NEAR(f.attractor_input(0, 0), 0.7746924929149283, 1e-15);
  EXPECT_NEAR(f.logits(0, 0), 0.37246924929149283, 1e-15);
  EXPECT_NEAR(f.logits(0, 1), -1.2962038739372392, 1e-15);

  const TrainForward g = forward_train(x, s, AttractorNorm::l2_input);
  EXPECT_NEAR(g.logits(0, 0), 0.195, 1e-15);
  EXPECT_NEAR(g.logits(0, 1), -1.03, 1e-15);
}

TEST(ForwardTrain, ZeroOutputLayerGivesScores) {
  ModelState s = random_state(7);
  s.omega.layers.back() = s.omega.layers.back().zeros_like();
  Rng rng(8);
  const Matrix x = rng.normal_matrix(6, 5);
  const TrainForward f = forward_train(x, s, AttractorNorm::l2_input);
  EXPECT_EQ(f.logits, f.scores);
}

TEST(ForwardTrain, WithoutAttractorSkipsIt) {
  const ModelState s = random_state(9);
  Rng rng(10);
  const Matrix x = rng.normal_matrix(3, 5);
  const TrainForward f = forward_train(x, s, AttractorNorm::softmax_input, false);
  EXPECT_EQ(f.logits, f.scores);
  EXPECT_TRUE(f.attractor_cache.inputs.empty());
}

TEST(Normalize, L2ZeroRowStaysZero) {
  const Matrix s = mat(2, 3, {0, 0, 0, 3, 0, 4});
  const Matrix u = normalize_attractor_input(s, AttractorNorm::l2_input);
  EXPECT_TRUE((u.row(0).array() == 0.0).all());
  EXPECT_NEAR(u(1, 0), 0.6, 1e-15);
  EXPECT_NEAR(u(1, 2), 0.8, 1e-15);
}

TEST(ForwardEval, IgnoresOmega) {
  ModelState s = random_state(11);
  Rng rng(12);
  const Matrix x = rng.normal_matrix(4, 5);
  const Matrix before = forward_eval(x, s, false);
  for (auto& l : s.omega.layers) l.weight = rng.normal_matrix(l.in(), l.out(), 10.0);
  EXPECT_EQ(forward_eval(x, s, false), before);
}

TEST(ForwardEval, EmaRightAfterInitMatchesRaw) {
  const ModelState s = random_state(13);
  Rng rng(14);
  const Matrix x = rng.normal_matrix(4, 5);
  EXPECT_EQ(forward_eval(x, s, true), forward_eval(x, s, false));
}

TEST(Predict, TieGoesToLowestIndex) {
  EXPECT_EQ(predict(mat(1, 2, {1.0, 1.0})), std::vector<int>{0});
}

TEST(Ema, DecayLimits) {
  ModelState s = random_state(15);
  const ModelState original = s;
  axpy(s.phi, 1.0, s.phi);
  ema_update(s, 1.0);
  EXPECT_EQ(s.ema_phi, original.ema_phi);
  ema_update(s, 0.0);
  EXPECT_EQ(s.ema_phi, s.phi);
}

TEST(Ema, GeometricRecursion) {
  ModelState s;
  s.theta.layers = {dense(1, 1, {1.0}, {1.0})};
  s.phi = dense(1, 2, {1.0, 1.0}, {1.0, 1.0});
  s.ema_theta.layers = {Dense::zeros(1, 1)};
  s.ema_phi = Dense::zeros(1, 2);
  ema_update(s, 0.999);
  ema_update(s, 0.999);
  EXPECT_NEAR(s.ema_phi.weight(0, 0), 1.0 - 0.999 * 0.999, 1e-12);
  EXPECT_NEAR(s.ema_theta.layers[0].bias[0], 0.001999, 1e-12);
}

TEST(Ema, RejectsBadDecay) {
  ModelState s = random_state(16);
  EXPECT_THROW(ema_update(s, 1.5), Error);
}

TEST(Checkpoint, RoundTripIsExact) {
  ModelState s = random_state(17);
  s.step = 42;
  axpy(s.ema_phi, 0.5, s.phi);
  const std::string path = (std::filesystem::temp_directory_path() / "l2ac_test_ckpt.json").string();
  save_checkpoint(s, AttractorNorm::l2_input, path);
  const Checkpoint c = load_checkpoint(path);
  EXPECT_EQ(c.state, s);
  EXPECT_EQ(c.norm, AttractorNorm::l2_input);
}

TEST(Checkpoint, RejectsShapeMismatch) {
  Json j = checkpoint_to_json(random_state(18), AttractorNorm::softmax_input);
  j["dims"]["feature_dim"] = 99;
  EXPECT_THROW(checkpoint_from_json(j), Error);
  Json k = checkpoint_to_json(random_state(18), AttractorNorm::softmax_input);
  k["version"] = 7;
  EXPECT_THROW(checkpoint_from_json(k), Error);
}

}  // namespace
}  // namespace l2ac
