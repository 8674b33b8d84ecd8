// l2ac command-line harness: data generation, training, evaluation,
// self-checks, overhead benchmark and run comparison.

#include "l2ac/l2ac.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace l2ac;

namespace {

constexpr const char* kOutputRootEnv = "L2AC_OUTPUT_ROOT";

// Relative output paths are placed under $L2AC_OUTPUT_ROOT when it is set.
fs::path resolve_output(const std::string& dir) {
  fs::path p(dir);
  const char* root = std::getenv(kOutputRootEnv);
  if (root && *root && p.is_relative()) p = fs::path(root) / p;
  return p;
}

void prepare_output_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    require(fs::is_directory(dir), "output path " + dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir)) {
      require(force, "output directory " + dir.string() + " is not empty (use --force to overwrite)");
      fs::remove_all(dir);
    }
  }
  fs::create_directories(dir);
}

void sync_profile_classes(DataConfig& d) {
  d.labeled.num_classes = d.unlabeled.num_classes = d.test.num_classes = d.num_classes;
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string config;
  std::string out;
  std::optional<std::string> profile;
  std::optional<int> n1;
  std::optional<double> gamma;
  std::optional<int> classes;
  std::optional<int> dim;
  std::optional<double> separation;
  std::optional<std::string> unlabeled_profile;
  std::optional<int> unlabeled_n1;
  std::optional<double> unlabeled_gamma;
  std::optional<int> test_n1;
  std::optional<std::uint64_t> seed;
  bool force = false;
};

int run_gen_data(const GenDataArgs& a) {
  ExperimentConfig c = a.config.empty() ? ExperimentConfig{} : load_config(a.config);
  DataConfig& d = c.data;
  d.source = "synthetic";
  if (a.classes) d.num_classes = *a.classes;
  if (a.dim) d.dim = *a.dim;
  if (a.separation) d.separation = *a.separation;
  if (a.profile) d.labeled.kind = parse_profile_kind(*a.profile);
  if (a.n1) d.labeled.n1 = *a.n1;
  if (a.gamma) d.labeled.gamma = *a.gamma;
  if (a.unlabeled_profile) d.unlabeled.kind = parse_profile_kind(*a.unlabeled_profile);
  if (a.unlabeled_n1) d.unlabeled.n1 = *a.unlabeled_n1;
  if (a.unlabeled_gamma) d.unlabeled.gamma = *a.unlabeled_gamma;
  if (a.test_n1) d.test.n1 = *a.test_n1;
  if (a.seed) set_seed(c, *a.seed);
  sync_profile_classes(d);
  validate_config(c);

  const ExperimentData data = build_data(c);
  const fs::path out = resolve_output(a.out);
  prepare_output_dir(out, a.force);
  save_csv_dataset(data.labeled, (out / "labeled.csv").string());
  save_csv_dataset(data.unlabeled, (out / "unlabeled.csv").string());
  save_csv_dataset(data.test, (out / "test.csv").string());

  auto describe = [](const char* name, const Dataset& ds, bool truth) {
    const auto hist = ds.class_histogram(truth);
    std::printf("%-9s rows=%-6lld per-class:", name, static_cast<long long>(ds.rows()));
    for (int n : hist) std::printf(" %d", n);
    std::printf("\n");
  };
  describe("labeled", data.labeled, false);
  describe("unlabeled", data.unlabeled, true);
  describe("test", data.test, false);
  std::printf("wrote %s\n", out.string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode;
  std::optional<std::string> out;
  std::optional<int> iters;
  bool force = false;
  bool quiet = false;
};

int run_train(const TrainArgs& a) {
  ExperimentConfig c = a.config.empty() ? ExperimentConfig{} : load_config(a.config);
  if (a.seed) set_seed(c, *a.seed);
  if (a.mode) c.train.mode = parse_train_mode(*a.mode);
  if (a.iters) c.train.iters = *a.iters;
  if (a.out) c.eval.output_dir = *a.out;
  validate_config(c);

  const fs::path out = resolve_output(c.eval.output_dir);
  prepare_output_dir(out, a.force);
  detail::write_text((out / "config.json").string(), config_to_json(c).dump(2) + "\n");

  const ExperimentData data = build_data(c);
  const fs::path ckpt_dir = out / "checkpoints";
  fs::create_directories(ckpt_dir);
  auto after = [&](std::uint64_t iter, const ModelState& state) {
    if (c.eval.checkpoint_interval > 0 && iter % static_cast<std::uint64_t>(c.eval.checkpoint_interval) == 0) {
      save_checkpoint(state, c.model.norm, (ckpt_dir / ("step_" + std::to_string(iter) + ".json")).string());
    }
    if (!a.quiet && iter % static_cast<std::uint64_t>(c.eval.interval) == 0) {
      std::fprintf(stderr, "\r[%s] iter %llu/%d", to_string(c.train.mode).c_str(),
                   static_cast<unsigned long long>(iter), c.train.iters);
    }
  };

  RunOutcome outcome;
  try {
    outcome = run_experiment(c, data, after);
  } catch (const TrainingDiverged& e) {
    detail::write_text((out / "trace.csv").string(), traces_to_csv(e.traces(), c.eval.trace_timings));
    throw;
  }
  if (!a.quiet) std::fprintf(stderr, "\n");

  detail::write_text((out / "trace.csv").string(), traces_to_csv(outcome.result.traces, c.eval.trace_timings));
  detail::write_text((out / "metrics.json").string(), outcome_to_json(c, outcome).dump(2) + "\n");
  detail::write_text((out / "confusion.csv").string(), confusion_to_csv(outcome.final_report.confusion));
  save_checkpoint(outcome.result.state, c.model.norm, (ckpt_dir / "final.json").string());
  if (c.eval.dump_features) {
    detail::write_text((out / "features.csv").string(),
                       features_to_csv(outcome.result.state, data.test, c.eval.use_ema));
  }

  std::printf("mode=%s seed=%llu bACC=%.4f GM=%.4f min_recall=%.4f (mean of last %d evals)\n",
              to_string(c.train.mode).c_str(), static_cast<unsigned long long>(c.seed), outcome.headline.bacc,
              outcome.headline.gm, min_recall(outcome.headline), c.eval.last_e);
  std::printf("wrote %s\n", out.string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string ckpt;
  std::string test;
  bool no_ema = false;
  std::string out;
};

int run_eval(const EvalArgs& a) {
  const Checkpoint ckpt = load_checkpoint(a.ckpt);
  const Dataset raw = load_csv_dataset(a.test, ckpt.state.num_classes());
  require(raw.dim() == ckpt.state.theta.in(), "eval: test feature width " + std::to_string(raw.dim()) +
                                                  " does not match checkpoint input width " +
                                                  std::to_string(ckpt.state.theta.in()));
  const Dataset test(raw.features(), raw.true_labels_for_diagnostics(), raw.true_labels_for_diagnostics(),
                     raw.num_classes());
  const MetricsReport report = evaluate(ckpt.state, test, !a.no_ema);
  const std::string text = report_to_json(report).dump(2) + "\n";
  if (a.out.empty()) {
    std::fputs(text.c_str(), stdout);
  } else {
    detail::write_text(resolve_output(a.out).string(), text);
    std::printf("bACC=%.4f GM=%.4f\n", report.bacc, report.gm);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// selfcheck / bench-overhead / compare
// ---------------------------------------------------------------------------

int run_selfcheck(std::uint64_t seed, int instances) {
  bool ok = true;
  for (const auto& r : selfcheck::run_suite(seed, instances)) {
    std::printf("%-4s %-36s %.3e", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.value);
    if (r.tolerance > 0.0) std::printf("  (tol %.0e)", r.tolerance);
    std::printf("\n");
    ok = ok && r.passed;
  }
  if (!ok) std::fprintf(stderr, "selfcheck: one or more checks failed\n");
  return ok ? 0 : 1;
}

int run_bench(const std::string& config, int reps) {
  const ExperimentConfig c = config.empty() ? ExperimentConfig{} : load_config(config);
  const ExperimentData data = build_data(c);
  const OverheadReport r = measure_overhead(c, data, reps);
  std::printf("parameters: network %lld (classifier %lld), attractor %lld\n", static_cast<long long>(r.network_params),
              static_cast<long long>(r.classifier_params), static_cast<long long>(r.attractor_params));
  std::printf("full lower backward   %.3e s (median of %d)\n", r.full_backward_seconds, r.repetitions);
  std::printf("backward-on-backward  %.3e s\n", r.second_order_seconds);
  std::printf("ratio                 %.3f\n", r.ratio());
  return 0;
}

int run_compare(const std::vector<std::string>& dirs, const std::string& csv) {
  const auto rows = compare_runs(dirs);
  std::fputs(compare_to_text(rows).c_str(), stdout);
  if (!csv.empty()) detail::write_text(resolve_output(csv).string(), compare_to_csv(rows));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bias-adaptive classifier training for imbalanced semi-supervised learning"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate labeled/unlabeled/test CSVs from a synthetic mixture");
  gen_cmd->add_option("--config", gen.config, "Experiment config supplying the data section");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--profile", gen.profile, "Labeled profile: longtail|step|reversed|uniform");
  gen_cmd->add_option("--n1", gen.n1, "Labeled head-class count");
  gen_cmd->add_option("--gamma", gen.gamma, "Labeled imbalance ratio");
  gen_cmd->add_option("--classes", gen.classes, "Number of classes");
  gen_cmd->add_option("--dim", gen.dim, "Feature dimension");
  gen_cmd->add_option("--separation", gen.separation, "Distance of class means from the origin");
  gen_cmd->add_option("--unlabeled-profile", gen.unlabeled_profile, "Unlabeled profile");
  gen_cmd->add_option("--unlabeled-n1", gen.unlabeled_n1, "Unlabeled head-class count (0 = none)");
  gen_cmd->add_option("--unlabeled-gamma", gen.unlabeled_gamma, "Unlabeled imbalance ratio");
  gen_cmd->add_option("--test-n1", gen.test_n1, "Test rows per class");
  gen_cmd->add_option("--seed", gen.seed, "Master seed");
  gen_cmd->add_flag("--force", gen.force, "Overwrite a non-empty output directory");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train one run and write its artifacts");
  train_cmd->add_option("--config", tr.config, "Experiment config (JSON)");
  train_cmd->add_option("--seed", tr.seed, "Master seed (overrides config)");
  train_cmd->add_option("--mode", tr.mode, "l2ac|baseline|plain_attractor|single_level")
      ->check(CLI::IsMember({"l2ac", "baseline", "plain_attractor", "single_level"}));
  train_cmd->add_option("--out", tr.out, "Output directory (overrides eval.output_dir)");
  train_cmd->add_option("--iters", tr.iters, "Iterations (overrides train.iters)");
  train_cmd->add_flag("--force", tr.force, "Overwrite a non-empty output directory");
  train_cmd->add_flag("--quiet", tr.quiet, "No progress output");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on a test CSV");
  eval_cmd->add_option("--ckpt", ev.ckpt, "Checkpoint JSON")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--test", ev.test, "Test CSV")->required()->check(CLI::ExistingFile);
  eval_cmd->add_flag("--no-ema", ev.no_ema, "Use raw parameters instead of the EMA shadows");
  eval_cmd->add_option("--out", ev.out, "Write the report JSON here instead of stdout");

  std::uint64_t check_seed = 7;
  int check_instances = 100;
  auto* check_cmd = app.add_subcommand("selfcheck", "Run the gradient/oracle/invariant suite");
  check_cmd->add_option("--seed", check_seed, "Seed for the random instances");
  check_cmd->add_option("--instances", check_instances, "Closed-form oracle instances")->check(CLI::PositiveNumber);

  std::string bench_config;
  int bench_reps = 51;
  auto* bench_cmd = app.add_subcommand("bench-overhead", "Time the second-order step against a full backward");
  bench_cmd->add_option("--config", bench_config, "Experiment config (defaults if omitted)");
  bench_cmd->add_option("--reps", bench_reps, "Repetitions (median is reported)")->check(CLI::PositiveNumber);

  std::vector<std::string> compare_dirs;
  std::string compare_csv;
  auto* compare_cmd = app.add_subcommand("compare", "Tabulate bACC/GM mean±std per mode across runs");
  compare_cmd->add_option("runs", compare_dirs, "Run directories")->required()->expected(2, -1);
  compare_cmd->add_option("--csv", compare_csv, "Also write the table as CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (gen_cmd->parsed()) return run_gen_data(gen);
    if (train_cmd->parsed()) return run_train(tr);
    if (eval_cmd->parsed()) return run_eval(ev);
    if (check_cmd->parsed()) return run_selfcheck(check_seed, check_instances);
    if (bench_cmd->parsed()) return run_bench(bench_config, bench_reps);
    if (compare_cmd->parsed()) return run_compare(compare_dirs, compare_csv);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "l2ac: error: %s\n", e.what());
    return 1;
  }
  return 1;
}
