#include "l2ac/experiment.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

namespace l2ac {
namespace {

namespace fs = std::filesystem;

ExperimentConfig tiny_config() {
  return parse_config(R"({
    "seed": 5,
    "data": {"num_classes": 3, "dim": 4, "separation": 4.0,
             "labeled": {"kind": "longtail", "gamma": 4, "n1": 40},
             "unlabeled": {"kind": "uniform", "gamma": 1, "n1": 60},
             "test": {"kind": "uniform", "gamma": 1, "n1": 30}},
    "model": {"hidden": [8], "feature_dim": 6, "attractor_hidden": 12},
    "train": {"alpha": 0.05, "eta": 1.0, "tau": 0.8, "batch_n": 12, "batch_m": 24, "balanced_n": 6, "iters": 30},
    "eval": {"interval": 10, "last_e": 2}
  })");
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("l2ac_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_metrics(const fs::path& dir, const std::string& mode, double bacc, double gm) {
  fs::create_directories(dir);
  std::ofstream(dir / "metrics.json") << Json{{"mode", mode}, {"headline", {{"bacc", bacc}, {"gm", gm}}}}.dump();
}

TEST(BuildData, SyntheticCountsPerSplit) {
  const ExperimentConfig c = tiny_config();
  const ExperimentData d = build_data(c);
  EXPECT_EQ(d.labeled.class_histogram(false), class_counts(c.data.labeled));
  EXPECT_EQ(d.unlabeled.class_histogram(true), class_counts(c.data.unlabeled));
  EXPECT_EQ(d.test.class_histogram(false), class_counts(c.data.test));
  EXPECT_TRUE(d.labeled.fully_labeled());
  EXPECT_TRUE(d.test.fully_labeled());
  for (int y : d.unlabeled.labels()) EXPECT_EQ(y, kUnlabeled);
}

TEST(BuildData, DeterministicPerSeed) {
  ExperimentConfig c = tiny_config();
  EXPECT_EQ(build_data(c).labeled.features(), build_data(c).labeled.features());
  const Matrix before = build_data(c).labeled.features();
  set_seed(c, 6);
  EXPECT_NE(build_data(c).labeled.features(), before);
}

TEST(BuildData, CsvRoundTrip) {
  const ExperimentConfig synth = tiny_config();
  const ExperimentData d = build_data(synth);
  const fs::path dir = scratch_dir("csv");
  save_csv_dataset(d.labeled, (dir / "labeled.csv").string());
  save_csv_dataset(d.unlabeled, (dir / "unlabeled.csv").string());
  save_csv_dataset(d.test, (dir / "test.csv").string());
  ExperimentConfig c = synth;
  c.data.source = "csv";
  c.data.labeled_csv = (dir / "labeled.csv").string();
  c.data.unlabeled_csv = (dir / "unlabeled.csv").string();
  c.data.test_csv = (dir / "test.csv").string();
  const ExperimentData e = build_data(c);
  EXPECT_EQ(e.labeled.labels(), d.labeled.labels());
  EXPECT_EQ(e.unlabeled.rows(), d.unlabeled.rows());
  EXPECT_EQ(e.test.labels(), d.test.labels());
}

TEST(RunExperiment, HeadlineAveragesLastEvaluations) {
  const ExperimentConfig c = tiny_config();
  const ExperimentData d = build_data(c);
  const RunOutcome out = run_experiment(c, d);
  ASSERT_EQ(out.evaluations.size(), 3u);
  EXPECT_EQ(out.evaluations.back().iter, 30u);
  EXPECT_DOUBLE_EQ(out.headline.bacc, 0.5 * (out.evaluations[1].report.bacc + out.evaluations[2].report.bacc));
  EXPECT_EQ(out.headline.pseudo_recall.size(), 3u);
  const Json j = outcome_to_json(c, out);
  EXPECT_EQ(j.at("mode"), "l2ac");
  EXPECT_EQ(j.at("evaluations").size(), 3u);
}

TEST(RunExperiment, FeatureDumpHasOneRowPerSample) {
  const ExperimentConfig c = tiny_config();
  const ExperimentData d = build_data(c);
  const RunOutcome out = run_experiment(c, d);
  const std::string csv = features_to_csv(out.result.state, d.test, true);
  EXPECT_EQ(static_cast<Eigen::Index>(std::count(csv.begin(), csv.end(), '\n')), d.test.rows() + 1);
}

TEST(Overhead, ReportsPositiveTimings) {
  ExperimentConfig c = tiny_config();
  const OverheadReport r = measure_overhead(c, build_data(c), 3);
  EXPECT_GT(r.full_backward_seconds, 0.0);
  EXPECT_GE(r.second_order_seconds, 0.0);
  EXPECT_EQ(r.repetitions, 3);
  EXPECT_GT(r.network_params, r.classifier_params);
}

TEST(Compare, IdenticalRunsHaveZeroSpread) {
  const fs::path dir = scratch_dir("cmp_same");
  write_metrics(dir / "a", "l2ac", 0.9, 0.8);
  write_metrics(dir / "b", "l2ac", 0.9, 0.8);
  const std::vector<std::string> runs{(dir / "a").string(), (dir / "b").string()};
  const auto rows = compare_runs(runs);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].runs, 2);
  EXPECT_DOUBLE_EQ(rows[0].bacc_mean, 0.9);
  EXPECT_EQ(rows[0].bacc_std, 0.0);
}

TEST(Compare, GroupsByModeInOrder) {
  const fs::path dir = scratch_dir("cmp_modes");
  std::vector<std::string> runs;
  const double base[] = {0.80, 0.82, 0.84};
  for (int s = 0; s < 3; ++s) {
    write_metrics(dir / ("b" + std::to_string(s)), "baseline", base[s], base[s] - 0.01);
    write_metrics(dir / ("l" + std::to_string(s)), "l2ac", base[s] + 0.05, base[s]);
    runs.push_back((dir / ("b" + std::to_string(s))).string());
    runs.push_back((dir / ("l" + std::to_string(s))).string());
  }
  const auto rows = compare_runs(runs);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].mode, "baseline");
  EXPECT_EQ(rows[1].mode, "l2ac");
  EXPECT_NEAR(rows[0].bacc_mean, 0.82, 1e-12);
  EXPECT_NEAR(rows[0].bacc_std, 0.02, 1e-12);
  EXPECT_NE(compare_to_csv(rows).find("baseline,3,"), std::string::npos);
  EXPECT_NE(compare_to_text(rows).find("82.00"), std::string::npos);
}

TEST(Compare, MissingMetricsNamesRun) {
  const fs::path dir = scratch_dir("cmp_missing");
  write_metrics(dir / "ok", "l2ac", 0.9, 0.9);
  fs::create_directories(dir / "broken");
  const std::vector<std::string> runs{(dir / "ok").string(), (dir / "broken").string()};
  try {
    compare_runs(runs);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("broken"), std::string::npos);
  }
  EXPECT_THROW(compare_runs(std::vector<std::string>{(dir / "ok").string()}), Error);
}

TEST(MeanStd, SampleStandardDeviation) {
  const std::vector<double> v{1.0, 2.0, 3.0, 4.0};
  const auto [m, s] = mean_std(v);
  EXPECT_DOUBLE_EQ(m, 2.5);
  EXPECT_NEAR(s, 1.2909944487358056, 1e-15);
}

}  // namespace
}  // namespace l2ac
