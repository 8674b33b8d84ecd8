#pragma once

// Experiment harness shared by the CLI and the acceptance suite: building the
// three data splits from a config, running a training job with periodic
// evaluation, measuring the second-order overhead and tabulating runs.

#include "l2ac/bilevel.hpp"
#include "l2ac/config.hpp"
#include "l2ac/data.hpp"
#include "l2ac/eval.hpp"
#include "l2ac/io.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace l2ac {

struct ExperimentData {
  Dataset labeled;
  Dataset unlabeled;
  Dataset test;
};

inline std::vector<int> add_counts(std::span<const int> a, std::span<const int> b) {
  std::vector<int> out(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) out[k] = a[k] + b[k];
  return out;
}

/// Synthetic data: one Gaussian mixture holding labeled + unlabeled + test
/// rows per class, split three ways. CSV data: loaded as given.
inline ExperimentData build_data(const ExperimentConfig& config) {
  const DataConfig& d = config.data;
  ExperimentData out;
  if (d.source == "csv") {
    out.labeled = load_csv_dataset(d.labeled_csv, d.num_classes);
    require(out.labeled.fully_labeled(), d.labeled_csv + ": labeled set contains unlabeled rows");
    out.unlabeled = d.unlabeled_csv.empty()
                        ? Dataset(Matrix(0, out.labeled.dim()), {}, {}, d.num_classes)
                        : load_csv_dataset(d.unlabeled_csv, d.num_classes).as_unlabeled();
    Dataset test = load_csv_dataset(d.test_csv, d.num_classes);
    out.test = Dataset(test.features(), test.true_labels_for_diagnostics(), test.true_labels_for_diagnostics(),
                       d.num_classes);
    require(out.unlabeled.empty() || out.unlabeled.dim() == out.labeled.dim(), "csv data: feature widths differ");
    require(out.test.dim() == out.labeled.dim(), "csv data: feature widths differ");
    return out;
  }
  Rng rng(derive_seed(config.seed, ExperimentStream::data));
  const auto labeled_counts = class_counts(d.labeled);
  const auto unlabeled_counts = d.unlabeled.n1 > 0 ? class_counts(d.unlabeled)
                                                   : std::vector<int>(static_cast<std::size_t>(d.num_classes), 0);
  const auto test_counts = class_counts(d.test);
  const auto rest_counts = add_counts(unlabeled_counts, test_counts);
  const Dataset full =
      synth_gaussian_mixture(d.num_classes, d.dim, d.separation, add_counts(labeled_counts, rest_counts), rng);
  auto [labeled, rest] = split_labeled_unlabeled(full, labeled_counts, rest_counts, rng);
  // The "labeled" side of this second split gets its true labels back, which
  // is what a test set needs.
  auto [test, unlabeled] = split_labeled_unlabeled(rest, test_counts, unlabeled_counts, rng);
  out.labeled = std::move(labeled);
  out.unlabeled = std::move(unlabeled);
  out.test = std::move(test);
  return out;
}

struct EvaluationPoint {
  std::uint64_t iter = 0;
  MetricsReport report;
};

struct RunOutcome {
  TrainResult result;
  std::vector<EvaluationPoint> evaluations;
  MetricsReport headline;  // mean of the last E evaluations, with pseudo-label recall
  MetricsReport final_report;
};

/// Pseudo-labels the trainer would assign to the whole unlabeled set at the
/// given state (no augmentation noise), scored against the hidden truth.
inline std::vector<std::optional<double>> final_pseudo_recall(const ExperimentConfig& config, const ModelState& state,
                                                              const Dataset& unlabeled) {
  if (unlabeled.empty()) return {};
  const bool biased = config.train.mode != TrainMode::baseline && !config.train.pseudo_from_classifier;
  const Matrix logits = forward_train(unlabeled.features(), state, config.model.norm, biased).logits;
  const PseudoLabels p = assign_pseudo_labels(logits, config.train.tau, config.train.lambda_u, config.train.pseudo_mode);
  return pseudo_label_recall(unlabeled.true_labels_for_diagnostics(), p.hard, p.weights, unlabeled.num_classes());
}

/// Trains per config, evaluating every eval.interval iterations. The optional
/// callback sees the state after every iteration (used for checkpoints).
inline RunOutcome run_experiment(const ExperimentConfig& config, const ExperimentData& data,
                                 const std::function<void(std::uint64_t, const ModelState&)>& after_iteration = {}) {
  RunOutcome out;
  TrainHooks hooks;
  hooks.after_iteration = [&](std::uint64_t iter, const ModelState& state) {
    if (iter % static_cast<std::uint64_t>(config.eval.interval) == 0) {
      out.evaluations.push_back({iter, evaluate(state, data.test, config.eval.use_ema)});
    }
    if (after_iteration) after_iteration(iter, state);
  };
  out.result = train(config.train, config.model, data.labeled.training_view(), data.unlabeled.training_view(), hooks);
  out.final_report = evaluate(out.result.state, data.test, config.eval.use_ema);
  if (out.evaluations.empty()) {
    out.headline = out.final_report;
  } else {
    const std::size_t take = std::min(out.evaluations.size(), static_cast<std::size_t>(config.eval.last_e));
    std::vector<MetricsReport> last;
    for (std::size_t i = out.evaluations.size() - take; i < out.evaluations.size(); ++i) {
      last.push_back(out.evaluations[i].report);
    }
    out.headline = average_reports(last);
  }
  out.headline.pseudo_recall = final_pseudo_recall(config, out.result.state, data.unlabeled);
  return out;
}

inline Json outcome_to_json(const ExperimentConfig& config, const RunOutcome& outcome) {
  Json evals = Json::array();
  for (const auto& e : outcome.evaluations) {
    evals.push_back(Json{{"iter", e.iter}, {"bacc", e.report.bacc}, {"gm", e.report.gm}, {"acc", e.report.acc}});
  }
  return Json{{"mode", to_string(config.train.mode)},
              {"seed", config.seed},
              {"iters", config.train.iters},
              {"last_e", config.eval.last_e},
              {"headline", report_to_json(outcome.headline)},
              {"final", report_to_json(outcome.final_report)},
              {"evaluations", evals}};
}

/// Raw penultimate-layer features of a dataset, one CSV row per sample, for
/// external embedding tools.
inline std::string features_to_csv(const ModelState& state, const Dataset& data, bool use_ema) {
  const Matrix z = forward_features(data.features(), use_ema ? state.ema_theta : state.theta);
  std::ostringstream out;
  for (Eigen::Index j = 0; j < z.cols(); ++j) out << 'z' << j << ',';
  out << "true_label\n";
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    for (Eigen::Index j = 0; j < z.cols(); ++j) out << detail::format_double(z(i, j)) << ',';
    out << data.true_labels_for_diagnostics()[static_cast<std::size_t>(i)] << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Second-order overhead
// ---------------------------------------------------------------------------

struct OverheadReport {
  double full_backward_seconds = 0.0;   // median lower backward (theta, phi, omega)
  double second_order_seconds = 0.0;    // median omega_step
  Eigen::Index classifier_params = 0;
  Eigen::Index network_params = 0;      // extractor + classifier
  Eigen::Index attractor_params = 0;
  int repetitions = 0;

  double ratio() const { return full_backward_seconds > 0.0 ? second_order_seconds / full_backward_seconds : 0.0; }
};

/// Times one full lower backward against one omega_step on identical
/// batches drawn per the config's batch sizes. Medians over repetitions.
inline OverheadReport measure_overhead(const ExperimentConfig& config, const ExperimentData& data, int repetitions) {
  require(repetitions >= 1, "measure_overhead: repetitions must be >= 1");
  const TrainConfig& tc = config.train;
  const int classes = data.labeled.num_classes();
  Rng rng(derive_seed(config.seed, ExperimentStream::training));
  ModelState state = init_model(config.model.dims(static_cast<int>(data.labeled.dim()), classes), rng);
  // Move the attractor off its zero initialization so timings see real work.
  for (Eigen::Index i = 0; i < state.omega.layers.back().weight.size(); ++i) {
    state.omega.layers.back().weight.data()[i] = 0.01 * rng.normal();
  }

  const auto rows_l = sample_rows(static_cast<std::size_t>(data.labeled.rows()), static_cast<std::size_t>(tc.batch_n), rng);
  const Matrix x_l = gather_rows(data.labeled.features(), rows_l);
  const Matrix y_l = one_hot(gather_labels(data.labeled.labels(), rows_l), classes);
  PseudoBatch pseudo;
  if (!data.unlabeled.empty() && tc.batch_m > 0) {
    const auto rows_u =
        sample_rows(static_cast<std::size_t>(data.unlabeled.rows()), static_cast<std::size_t>(tc.batch_m), rng);
    AugmentedViews views = augment(gather_rows(data.unlabeled.features(), rows_u), tc.sigma_weak, tc.sigma_strong, rng);
    // tau = 0 keeps every row so the timed work does not depend on confidence.
    PseudoLabels labels = assign_pseudo_labels(forward_eval(views.weak, state, false), 0.0, 1.0, tc.pseudo_mode);
    pseudo = {views.weak, views.strong, labels.targets, labels.weights, labels.hard};
  }
  const auto rows_b = balanced_batch(ClassIndex(data.labeled.training_view()), {tc.balanced_n, classes}, rng);
  const Matrix x_b = gather_rows(data.labeled.features(), rows_b);
  const Matrix y_b = one_hot(gather_labels(data.labeled.labels(), rows_b), classes);

  std::vector<double> backward, second_order;
  for (int r = 0; r < repetitions; ++r) {
    ModelState work = state;
    LowerOptimizer opt(LowerOptimizerConfig{}, work);
    LowerResult lower = lower_loss(x_l, y_l, pseudo, work, config.model.norm, {true, true});
    backward.push_back(lower.backward_seconds);
    const UnrollCache cache = lower_step(work, std::move(lower), tc.alpha, opt);
    const UpperResult upper = upper_loss(x_b, y_b, work);
    const auto start = detail::Clock::now();
    omega_step(work, cache, upper.grad_phi, tc.eta);
    second_order.push_back(detail::seconds_since(start));
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  };
  OverheadReport report;
  report.full_backward_seconds = median(backward);
  report.second_order_seconds = median(second_order);
  report.classifier_params = state.phi.parameter_count();
  report.network_params = state.theta.parameter_count() + state.phi.parameter_count();
  report.attractor_params = state.omega.parameter_count();
  report.repetitions = repetitions;
  return report;
}

// ---------------------------------------------------------------------------
// Comparing runs
// ---------------------------------------------------------------------------

struct CompareRow {
  std::string mode;
  int runs = 0;
  double bacc_mean = 0.0, bacc_std = 0.0;
  double gm_mean = 0.0, gm_std = 0.0;
};

inline std::pair<double, double> mean_std(std::span<const double> v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  const double stddev = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  return {mean, stddev};
}

/// Groups completed runs by mode (in order of first appearance) and reports
/// mean and sample standard deviation of the headline bACC and GM.
inline std::vector<CompareRow> compare_runs(std::span<const std::string> run_dirs) {
  require(run_dirs.size() >= 2, "compare: need at least two runs");
  std::vector<std::string> order;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> groups;
  for (const auto& dir : run_dirs) {
    const std::string path = (std::filesystem::path(dir) / "metrics.json").string();
    if (!std::filesystem::exists(path)) throw Error("compare: run '" + dir + "' has no metrics.json");
    Json j;
    try {
      j = Json::parse(detail::read_text(path));
    } catch (const Json::exception& e) {
      throw Error("compare: run '" + dir + "': " + e.what());
    }
    const std::string mode = j.at("mode").get<std::string>();
    if (!groups.count(mode)) order.push_back(mode);
    groups[mode].first.push_back(j.at("headline").at("bacc").get<double>());
    groups[mode].second.push_back(j.at("headline").at("gm").get<double>());
  }
  std::vector<CompareRow> rows;
  for (const auto& mode : order) {
    const auto& [bacc, gm] = groups[mode];
    CompareRow row;
    row.mode = mode;
    row.runs = static_cast<int>(bacc.size());
    std::tie(row.bacc_mean, row.bacc_std) = mean_std(bacc);
    std::tie(row.gm_mean, row.gm_std) = mean_std(gm);
    rows.push_back(row);
  }
  return rows;
}

inline std::string compare_to_csv(std::span<const CompareRow> rows) {
  std::ostringstream out;
  out << "mode,runs,bacc_mean,bacc_std,gm_mean,gm_std\n";
  for (const auto& r : rows) {
    out << r.mode << ',' << r.runs << ',' << detail::format_double(r.bacc_mean) << ','
        << detail::format_double(r.bacc_std) << ',' << detail::format_double(r.gm_mean) << ','
        << detail::format_double(r.gm_std) << '\n';
  }
  return out.str();
}

/// Aligned "bACC / GM" table with percentages as mean±std.
inline std::string compare_to_text(std::span<const CompareRow> rows) {
  std::size_t width = 4;
  for (const auto& r : rows) width = std::max(width, r.mode.size());
  std::ostringstream out;
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-*s  %4s  %-13s  %-13s\n", static_cast<int>(width), "mode", "runs", "bACC", "GM");
  out << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-*s  %4d  %5.2f±%-6.2f  %5.2f±%-6.2f\n", static_cast<int>(width), r.mode.c_str(),
                  r.runs, 100.0 * r.bacc_mean, 100.0 * r.bacc_std, 100.0 * r.gm_mean, 100.0 * r.gm_std);
    out << buf;
  }
  return out.str();
}

}  // namespace l2ac
