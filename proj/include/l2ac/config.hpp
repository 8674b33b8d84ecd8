#pragma once

// Experiment configuration: one JSON document with data / model / train /
// eval sections. Every key is optional (defaults below) but unknown keys are
// rejected.

#include "l2ac/bilevel.hpp"
#include "l2ac/data.hpp"
#include "l2ac/io.hpp"

#include <cstdint>
#include <initializer_list>
#include <set>
#include <string>

namespace l2ac {

struct DataConfig {
  std::string source = "synthetic";  // "synthetic" or "csv"
  int num_classes = 6;
  int dim = 16;
  double separation = 3.3;
  ImbalanceProfile labeled{ProfileKind::longtail, 20.0, 100, 6};
  ImbalanceProfile unlabeled{ProfileKind::longtail, 20.0, 500, 6};
  ImbalanceProfile test{ProfileKind::uniform, 1.0, 300, 6};
  std::string labeled_csv;
  std::string unlabeled_csv;
  std::string test_csv;

  bool operator==(const DataConfig&) const = default;
};

struct EvalConfig {
  int interval = 50;
  int last_e = 20;
  bool use_ema = true;
  int checkpoint_interval = 0;  // 0 = final checkpoint only
  bool trace_timings = false;
  bool dump_features = false;
  std::string output_dir = "runs/default";

  bool operator==(const EvalConfig&) const = default;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;

  bool operator==(const ExperimentConfig&) const = default;
};

/// Streams derived from the experiment's master seed.
enum class ExperimentStream : std::uint64_t { data = 10, training = 11 };

inline std::uint64_t derive_seed(std::uint64_t master, ExperimentStream stream) {
  return Rng(master).fork(static_cast<std::uint64_t>(stream)).seed();
}

namespace detail {

inline void check_keys(const Json& j, const std::string& section, std::initializer_list<const char*> allowed) {
  require(j.is_object(), "config: section '" + section + "' must be an object");
  const std::set<std::string> names(allowed.begin(), allowed.end());
  for (const auto& item : j.items()) {
    if (!names.count(item.key())) throw Error("config: unknown key '" + section + "." + item.key() + "'");
  }
}

template <typename T>
void read_key(const Json& j, const char* key, T& value) {
  if (!j.contains(key)) return;
  try {
    value = j.at(key).get<T>();
  } catch (const Json::exception&) {
    throw Error(std::string("config: key '") + key + "' has the wrong type");
  }
}

inline Json profile_to_json(const ImbalanceProfile& p) {
  return Json{{"kind", to_string(p.kind)}, {"gamma", p.gamma}, {"n1", p.n1}};
}

inline ImbalanceProfile profile_from_json(const Json& j, const std::string& section, ImbalanceProfile p) {
  check_keys(j, section, {"kind", "gamma", "n1"});
  if (j.contains("kind")) p.kind = parse_profile_kind(j.at("kind").get<std::string>());
  read_key(j, "gamma", p.gamma);
  read_key(j, "n1", p.n1);
  return p;
}

}  // namespace detail

inline Json config_to_json(const ExperimentConfig& c) {
  const auto& t = c.train;
  Json train{{"mode", to_string(t.mode)},
             {"alpha", t.alpha},
             {"eta", t.eta},
             {"tau", t.tau},
             {"lambda_u", t.lambda_u},
             {"batch_n", t.batch_n},
             {"batch_m", t.batch_m},
             {"balanced_n", t.balanced_n},
             {"iters", t.iters},
             {"ema_decay", t.ema_decay},
             {"single_level_lambda", t.single_level_lambda},
             {"schedule",
              {{"kind", t.schedule.kind == Schedule::Kind::constant ? "constant" : "decaying"},
               {"c1", t.schedule.c1},
               {"c2", t.schedule.c2}}},
             {"optimizer",
              {{"kind", t.lower_optimizer.kind == LowerOptimizerConfig::Kind::sgd ? "sgd" : "adam"},
               {"beta1", t.lower_optimizer.beta1},
               {"beta2", t.lower_optimizer.beta2},
               {"epsilon", t.lower_optimizer.epsilon}}},
             {"pseudo",
              {{"kind", t.pseudo_mode.kind == PseudoLabelMode::Kind::hard ? "hard" : "sharpen"},
               {"temperature", t.pseudo_mode.temperature}}},
             {"pseudo_source", t.pseudo_from_classifier ? "classifier" : "biased"},
             {"sigma_weak", t.sigma_weak},
             {"sigma_strong", t.sigma_strong}};
  return Json{{"seed", c.seed},
              {"data",
               {{"source", c.data.source},
                {"num_classes", c.data.num_classes},
                {"dim", c.data.dim},
                {"separation", c.data.separation},
                {"labeled", detail::profile_to_json(c.data.labeled)},
                {"unlabeled", detail::profile_to_json(c.data.unlabeled)},
                {"test", detail::profile_to_json(c.data.test)},
                {"labeled_csv", c.data.labeled_csv},
                {"unlabeled_csv", c.data.unlabeled_csv},
                {"test_csv", c.data.test_csv}}},
              {"model",
               {{"hidden", c.model.hidden},
                {"feature_dim", c.model.feature_dim},
                {"attractor_hidden", c.model.attractor_hidden},
                {"norm", to_string(c.model.norm)}}},
              {"train", train},
              {"eval",
               {{"interval", c.eval.interval},
                {"last_e", c.eval.last_e},
                {"use_ema", c.eval.use_ema},
                {"checkpoint_interval", c.eval.checkpoint_interval},
                {"trace_timings", c.eval.trace_timings},
                {"dump_features", c.eval.dump_features},
                {"output_dir", c.eval.output_dir}}}};
}

/// Validates ranges that do not depend on the data.
inline void validate_config(const ExperimentConfig& c) {
  require(c.data.source == "synthetic" || c.data.source == "csv", "config: data.source must be synthetic or csv");
  require(c.data.num_classes >= 2, "config: data.num_classes must be >= 2");
  require(c.data.dim >= 2, "config: data.dim must be >= 2");
  require(c.data.separation >= 0.0, "config: data.separation must be >= 0");
  for (const auto* p : {&c.data.labeled, &c.data.unlabeled, &c.data.test}) {
    require(p->gamma >= 1.0, "config: profile gamma must be >= 1");
    require(p->n1 >= 0, "config: profile n1 must be >= 0");
  }
  require(c.data.labeled.n1 >= 1 && c.data.test.n1 >= 1, "config: labeled and test n1 must be >= 1");
  if (c.data.source == "csv") {
    require(!c.data.labeled_csv.empty() && !c.data.test_csv.empty(),
            "config: csv source needs data.labeled_csv and data.test_csv");
  }
  require(!c.model.hidden.empty() || c.model.feature_dim >= 1, "config: model.feature_dim must be >= 1");
  for (int h : c.model.hidden) require(h >= 1, "config: model.hidden widths must be >= 1");
  require(c.model.feature_dim >= 1 && c.model.attractor_hidden >= 1, "config: model widths must be >= 1");
  c.train.validate(c.data.num_classes);
  require(c.eval.interval >= 1, "config: eval.interval must be >= 1");
  require(c.eval.last_e >= 1, "config: eval.last_e must be >= 1");
  require(c.eval.checkpoint_interval >= 0, "config: eval.checkpoint_interval must be >= 0");
  require(!c.eval.output_dir.empty(), "config: eval.output_dir must not be empty");
}

inline ExperimentConfig config_from_json(const Json& j) {
  using detail::check_keys;
  using detail::read_key;
  ExperimentConfig c;
  check_keys(j, "<root>", {"seed", "data", "model", "train", "eval"});
  read_key(j, "seed", c.seed);

  if (j.contains("data")) {
    const Json& d = j.at("data");
    check_keys(d, "data", {"source", "num_classes", "dim", "separation", "labeled", "unlabeled", "test",
                           "labeled_csv", "unlabeled_csv", "test_csv"});
    read_key(d, "source", c.data.source);
    read_key(d, "num_classes", c.data.num_classes);
    read_key(d, "dim", c.data.dim);
    read_key(d, "separation", c.data.separation);
    if (d.contains("labeled")) c.data.labeled = detail::profile_from_json(d.at("labeled"), "data.labeled", c.data.labeled);
    if (d.contains("unlabeled"))
      c.data.unlabeled = detail::profile_from_json(d.at("unlabeled"), "data.unlabeled", c.data.unlabeled);
    if (d.contains("test")) c.data.test = detail::profile_from_json(d.at("test"), "data.test", c.data.test);
    read_key(d, "labeled_csv", c.data.labeled_csv);
    read_key(d, "unlabeled_csv", c.data.unlabeled_csv);
    read_key(d, "test_csv", c.data.test_csv);
  }
  c.data.labeled.num_classes = c.data.unlabeled.num_classes = c.data.test.num_classes = c.data.num_classes;

  if (j.contains("model")) {
    const Json& m = j.at("model");
    check_keys(m, "model", {"hidden", "feature_dim", "attractor_hidden", "norm"});
    read_key(m, "hidden", c.model.hidden);
    read_key(m, "feature_dim", c.model.feature_dim);
    read_key(m, "attractor_hidden", c.model.attractor_hidden);
    if (m.contains("norm")) c.model.norm = parse_attractor_norm(m.at("norm").get<std::string>());
  }

  if (j.contains("train")) {
    const Json& t = j.at("train");
    check_keys(t, "train", {"mode", "alpha", "eta", "tau", "lambda_u", "batch_n", "batch_m", "balanced_n", "iters",
                            "ema_decay", "single_level_lambda", "schedule", "optimizer", "pseudo", "pseudo_source",
                            "sigma_weak", "sigma_strong"});
    auto& tr = c.train;
    if (t.contains("mode")) tr.mode = parse_train_mode(t.at("mode").get<std::string>());
    read_key(t, "alpha", tr.alpha);
    read_key(t, "eta", tr.eta);
    read_key(t, "tau", tr.tau);
    read_key(t, "lambda_u", tr.lambda_u);
    read_key(t, "batch_n", tr.batch_n);
    read_key(t, "batch_m", tr.batch_m);
    read_key(t, "balanced_n", tr.balanced_n);
    read_key(t, "iters", tr.iters);
    read_key(t, "ema_decay", tr.ema_decay);
    read_key(t, "single_level_lambda", tr.single_level_lambda);
    read_key(t, "sigma_weak", tr.sigma_weak);
    read_key(t, "sigma_strong", tr.sigma_strong);
    if (t.contains("schedule")) {
      const Json& s = t.at("schedule");
      check_keys(s, "train.schedule", {"kind", "c1", "c2"});
      const std::string kind = s.value("kind", std::string("constant"));
      require(kind == "constant" || kind == "decaying", "config: train.schedule.kind must be constant or decaying");
      tr.schedule.kind = kind == "constant" ? Schedule::Kind::constant : Schedule::Kind::decaying;
      read_key(s, "c1", tr.schedule.c1);
      read_key(s, "c2", tr.schedule.c2);
    }
    if (t.contains("optimizer")) {
      const Json& o = t.at("optimizer");
      check_keys(o, "train.optimizer", {"kind", "beta1", "beta2", "epsilon"});
      const std::string kind = o.value("kind", std::string("sgd"));
      require(kind == "sgd" || kind == "adam", "config: train.optimizer.kind must be sgd or adam");
      tr.lower_optimizer.kind = kind == "sgd" ? LowerOptimizerConfig::Kind::sgd : LowerOptimizerConfig::Kind::adam;
      read_key(o, "beta1", tr.lower_optimizer.beta1);
      read_key(o, "beta2", tr.lower_optimizer.beta2);
      read_key(o, "epsilon", tr.lower_optimizer.epsilon);
    }
    if (t.contains("pseudo")) {
      const Json& p = t.at("pseudo");
      check_keys(p, "train.pseudo", {"kind", "temperature"});
      const std::string kind = p.value("kind", std::string("hard"));
      require(kind == "hard" || kind == "sharpen", "config: train.pseudo.kind must be hard or sharpen");
      tr.pseudo_mode.kind = kind == "hard" ? PseudoLabelMode::Kind::hard : PseudoLabelMode::Kind::sharpen;
      read_key(p, "temperature", tr.pseudo_mode.temperature);
    }
    if (t.contains("pseudo_source")) {
      const std::string src = t.at("pseudo_source").get<std::string>();
      require(src == "classifier" || src == "biased", "config: train.pseudo_source must be classifier or biased");
      tr.pseudo_from_classifier = src == "classifier";
    }
  }

  if (j.contains("eval")) {
    const Json& e = j.at("eval");
    check_keys(e, "eval", {"interval", "last_e", "use_ema", "checkpoint_interval", "trace_timings", "dump_features",
                           "output_dir"});
    read_key(e, "interval", c.eval.interval);
    read_key(e, "last_e", c.eval.last_e);
    read_key(e, "use_ema", c.eval.use_ema);
    read_key(e, "checkpoint_interval", c.eval.checkpoint_interval);
    read_key(e, "trace_timings", c.eval.trace_timings);
    read_key(e, "dump_features", c.eval.dump_features);
    read_key(e, "output_dir", c.eval.output_dir);
  }
  c.train.seed = derive_seed(c.seed, ExperimentStream::training);
  validate_config(c);
  return c;
}

inline ExperimentConfig parse_config(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::exception& e) {
    throw Error(std::string("config: invalid JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline ExperimentConfig load_config(const std::string& path) { return parse_config(detail::read_text(path)); }

/// Re-derives the training seed after the master seed changes.
inline void set_seed(ExperimentConfig& c, std::uint64_t seed) {
  c.seed = seed;
  c.train.seed = derive_seed(seed, ExperimentStream::training);
}

}  // namespace l2ac
