#pragma once

// File formats: JSON checkpoints, JSON metrics reports, and CSV traces and
// confusion matrices.

#include "l2ac/bilevel.hpp"
#include "l2ac/eval.hpp"
#include "l2ac/model.hpp"

#include "json.hpp"

#include <fstream>
#include <sstream>
#include <string>

namespace l2ac {

using Json = nlohmann::ordered_json;

inline constexpr const char* kCheckpointFormat = "l2ac-checkpoint";
inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline Json matrix_to_json(const Matrix& m) {
  Json rows = Json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Json row = Json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Matrix matrix_from_json(const Json& j, Eigen::Index rows, Eigen::Index cols) {
  require(j.is_array() && static_cast<Eigen::Index>(j.size()) == rows, "checkpoint: matrix row count mismatch");
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const Json& row = j[static_cast<std::size_t>(i)];
    require(row.is_array() && static_cast<Eigen::Index>(row.size()) == cols, "checkpoint: matrix column count mismatch");
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

inline Json dense_to_json(const Dense& d) {
  Json bias = Json::array();
  for (Eigen::Index k = 0; k < d.bias.size(); ++k) bias.push_back(d.bias[k]);
  return Json{{"in", d.in()}, {"out", d.out()}, {"weight", matrix_to_json(d.weight)}, {"bias", bias}};
}

inline Dense dense_from_json(const Json& j) {
  const auto in = j.at("in").get<Eigen::Index>();
  const auto out = j.at("out").get<Eigen::Index>();
  Dense d = Dense::zeros(in, out);
  d.weight = matrix_from_json(j.at("weight"), in, out);
  const Json& bias = j.at("bias");
  require(bias.is_array() && static_cast<Eigen::Index>(bias.size()) == out, "checkpoint: bias length mismatch");
  for (Eigen::Index k = 0; k < out; ++k) d.bias[k] = bias[static_cast<std::size_t>(k)].get<double>();
  return d;
}

inline Json mlp_to_json(const Mlp& m) {
  Json layers = Json::array();
  for (const auto& l : m.layers) layers.push_back(dense_to_json(l));
  return layers;
}

inline Mlp mlp_from_json(const Json& j) {
  require(j.is_array() && !j.empty(), "checkpoint: network must be a non-empty layer list");
  Mlp m;
  for (const auto& layer : j) m.layers.push_back(dense_from_json(layer));
  return m;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), "cannot open " + path + " for writing");
  out << text;
  require(static_cast<bool>(out), "write failed for " + path);
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline Json optional_to_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct Checkpoint {
  ModelState state;
  AttractorNorm norm = AttractorNorm::softmax_input;
};

/// JSON document holding every parameter array, the dimensions and the
/// attractor norm. Doubles are written with round-trip precision.
inline Json checkpoint_to_json(const ModelState& state, AttractorNorm norm) {
  const ModelDims dims = dims_of(state);
  return Json{{"format", kCheckpointFormat},
              {"version", kCheckpointVersion},
              {"dims",
               {{"input_dim", dims.input_dim},
                {"hidden", dims.hidden},
                {"feature_dim", dims.feature_dim},
                {"num_classes", dims.num_classes},
                {"attractor_hidden", dims.attractor_hidden}}},
              {"norm", to_string(norm)},
              {"step", state.step},
              {"theta", detail::mlp_to_json(state.theta)},
              {"phi", detail::dense_to_json(state.phi)},
              {"omega", detail::mlp_to_json(state.omega)},
              {"ema_theta", detail::mlp_to_json(state.ema_theta)},
              {"ema_phi", detail::dense_to_json(state.ema_phi)}};
}

inline Checkpoint checkpoint_from_json(const Json& j) {
  require(j.value("format", std::string()) == kCheckpointFormat, "checkpoint: unrecognized format");
  require(j.value("version", 0) == kCheckpointVersion,
          "checkpoint: unsupported version " + std::to_string(j.value("version", 0)));
  Checkpoint c;
  c.norm = parse_attractor_norm(j.at("norm").get<std::string>());
  c.state.step = j.at("step").get<std::uint64_t>();
  c.state.theta = detail::mlp_from_json(j.at("theta"));
  c.state.phi = detail::dense_from_json(j.at("phi"));
  c.state.omega = detail::mlp_from_json(j.at("omega"));
  c.state.ema_theta = detail::mlp_from_json(j.at("ema_theta"));
  c.state.ema_phi = detail::dense_from_json(j.at("ema_phi"));

  const ModelDims declared{j.at("dims").at("input_dim").get<int>(), j.at("dims").at("hidden").get<std::vector<int>>(),
                           j.at("dims").at("feature_dim").get<int>(), j.at("dims").at("num_classes").get<int>(),
                           j.at("dims").at("attractor_hidden").get<int>()};
  require(dims_of(c.state) == declared, "checkpoint: parameter shapes disagree with declared dims");
  require(c.state.phi.in() == c.state.theta.out() && c.state.omega.in() == c.state.phi.out() &&
              c.state.omega.out() == c.state.phi.out(),
          "checkpoint: inconsistent layer shapes");
  require(dims_of(ModelState{c.state.ema_theta, c.state.ema_phi, c.state.omega, {}, {}, 0}) == declared,
          "checkpoint: EMA shapes disagree with parameters");
  return c;
}

inline void save_checkpoint(const ModelState& state, AttractorNorm norm, const std::string& path) {
  detail::write_text(path, checkpoint_to_json(state, norm).dump() + "\n");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  Json j;
  try {
    j = Json::parse(detail::read_text(path));
  } catch (const Json::exception& e) {
    throw Error(path + ": " + e.what());
  }
  return checkpoint_from_json(j);
}

// ---------------------------------------------------------------------------
// Metrics and traces
// ---------------------------------------------------------------------------

inline Json report_to_json(const MetricsReport& r) {
  Json pseudo = Json::array();
  for (const auto& v : r.pseudo_recall) pseudo.push_back(detail::optional_to_json(v));
  return Json{{"bacc", r.bacc},
              {"gm", r.gm},
              {"acc", r.acc},
              {"min_recall", min_recall(r)},
              {"per_class_recall", r.per_class_recall},
              {"predicted_distribution", r.predicted_distribution},
              {"pseudo_recall", pseudo},
              {"confusion", r.confusion.counts}};
}

inline MetricsReport report_from_json(const Json& j) {
  MetricsReport r;
  r.bacc = j.at("bacc").get<double>();
  r.gm = j.at("gm").get<double>();
  r.acc = j.value("acc", 0.0);
  r.per_class_recall = j.at("per_class_recall").get<std::vector<double>>();
  r.predicted_distribution = j.at("predicted_distribution").get<std::vector<double>>();
  if (j.contains("pseudo_recall")) {
    for (const auto& v : j.at("pseudo_recall")) {
      r.pseudo_recall.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
    }
  }
  if (j.contains("confusion")) r.confusion.counts = j.at("confusion").get<std::vector<std::vector<long long>>>();
  return r;
}

inline std::string confusion_to_csv(const ConfusionMatrix& cm) {
  std::ostringstream out;
  out << "true\\pred";
  for (int k = 0; k < cm.num_classes(); ++k) out << ',' << k;
  out << '\n';
  for (int t = 0; t < cm.num_classes(); ++t) {
    out << t;
    for (long long c : cm.counts[static_cast<std::size_t>(t)]) out << ',' << c;
    out << '\n';
  }
  return out.str();
}

/// One row per iteration. Wall-clock columns only when requested.
inline std::string traces_to_csv(std::span<const StepTrace> traces, bool with_timings) {
  std::ostringstream out;
  out << "iter,lower_loss,upper_loss,grad_norm_theta,grad_norm_phi,grad_norm_omega,mask_rate";
  if (with_timings) out << ",second_order_seconds,backward_seconds";
  out << '\n';
  for (const auto& t : traces) {
    out << t.iter << ',' << detail::format_double(t.lower_loss) << ',' << detail::format_double(t.upper_loss) << ','
        << detail::format_double(t.grad_norm_theta) << ',' << detail::format_double(t.grad_norm_phi) << ','
        << detail::format_double(t.grad_norm_omega) << ',' << detail::format_double(t.mask_rate);
    if (with_timings) {
      out << ',' << detail::format_double(t.second_order_seconds) << ',' << detail::format_double(t.backward_seconds);
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace l2ac
