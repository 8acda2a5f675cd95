// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "dmu/cli.hpp"
#include "dmu/experiment.hpp"
#include "support/report_check.hpp"

namespace {

using namespace dmu;
namespace fs = std::filesystem;
using testkit::read_csv;
using testkit::read_file;

constexpr double kInf = std::numeric_limits<double>::infinity();

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() /
                       ("dmu_test_" + std::to_string(::getpid()) + "_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ExperimentSpec small_spec(TaskKind kind = TaskKind::adding) {
  ExperimentSpec s;
  s.task = TaskSpec::desk_scale(kind);
  s.arms = {parse_arm("dmu:5,5"), parse_arm("rnn:3,3")};
  s.runs = 3;
  s.train.sizes = SplitSizes{32, 16, 16, 16};
  s.train.max_epochs = 4;
  s.workers = 1;
  s.master_seed = 11;
  return s;
}

// Scores the exact targets on the validation set, so every run reaches
// every threshold at epoch 1.
RunReport oracle_trainer(const Arm&, const RunSeeds& seeds, const ExperimentSpec& spec) {
  const Split split(spec.task, spec.train.sizes, seeds.data);
  double total = 0.0;
  for (const Batch& b : split.validation()) {
    ad::Tape tape;
    total += batch_loss(tape.leaf(b.targets), b, LossKind::mse).value()[0];
  }
  RunReport r;
  r.history.push_back(EpochRecord{1, 0.0, total, 1.0, 0.0, false});
  r.status = RunStatus::reached_threshold;
  r.test_loss = 0.0;
  return r;
}

// Deterministic pseudo-random loss curves, some diverging.
RunReport synthetic_trainer(const Arm& arm, const RunSeeds& seeds, const ExperimentSpec&) {
  Rng rng(seeds.run ^ std::hash<std::string>{}(arm.label));
  RunReport r;
  const std::size_t epochs = 1 + rng.uniform_int(0, 14);
  double loss = rng.uniform(0.01, 1.0);
  for (std::size_t e = 1; e <= epochs; ++e) {
    loss *= rng.uniform(0.05, 1.2);
    r.history.push_back(EpochRecord{e, loss * 1.1, loss, 1.0, 0.0, false});
  }
  if (rng.uniform01() < 0.2) {
    r.history.back().diverged = true;
    r.history.back().val_loss = NAN;
    r.status = RunStatus::diverged;
    r.test_loss = NAN;
  } else {
    r.status = RunStatus::budget_exhausted;
    r.test_loss = loss * 0.9;
  }
  return r;
}

// Experiment runner ---------------------------------------------------------

TEST(Experiment, OracleCurvesJumpToRunCount) {
  ExperimentSpec spec = small_spec();
  spec.runs = 5;
  const ExperimentResult res = run_experiment(spec, oracle_trainer);
  ASSERT_EQ(res.epochs, 1u);
  ASSERT_EQ(res.curves.size(), spec.arms.size() * spec.thresholds.size());
  for (const ThresholdCurve& c : res.curves) EXPECT_EQ(c.counts, std::vector<std::size_t>{5});
}

TEST(Experiment, SingleRunInfiniteThresholdCurvesAreBinary) {
  ExperimentSpec spec = small_spec();
  spec.runs = 1;
  spec.train.stop_threshold = kInf;
  const ExperimentResult res = run_experiment(spec);
  EXPECT_EQ(res.epochs, 1u);
  for (const RunRecord& r : res.runs) EXPECT_EQ(r.report.history.size(), 1u);
  for (const ThresholdCurve& c : res.curves) {
    ASSERT_EQ(c.counts.size(), 1u);
    EXPECT_LE(c.counts[0], 1u);
  }
}

TEST(Experiment, CurvesAreMonotoneAndNested) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    ExperimentSpec spec = small_spec();
    spec.runs = 17;
    spec.master_seed = seed;
    const ExperimentResult res = run_experiment(spec, synthetic_trainer);
    const std::size_t n_th = spec.thresholds.size();
    for (std::size_t a = 0; a < spec.arms.size(); ++a) {
      for (std::size_t t = 0; t < n_th; ++t) {
        const auto& counts = res.curves[a * n_th + t].counts;
        ASSERT_EQ(counts.size(), res.epochs);
        for (std::size_t e = 0; e < counts.size(); ++e) {
          EXPECT_LE(counts[e], spec.runs);
          if (e > 0) EXPECT_GE(counts[e], counts[e - 1]);
          if (t > 0) EXPECT_LE(counts[e], res.curves[a * n_th + t - 1].counts[e]);
        }
      }
    }
    for (const RunRecord& r : res.runs) {
      for (std::size_t t = 1; t < n_th; ++t) {
        if (r.first_reach[t]) {
          ASSERT_TRUE(r.first_reach[t - 1]);
          EXPECT_LE(*r.first_reach[t - 1], *r.first_reach[t]);
        }
      }
    }
    const fs::path dir = scratch("nested_" + std::to_string(seed));
    emit_reports(res, dir);
    const auto problems = testkit::check_reports(dir);
    EXPECT_TRUE(problems.empty()) << problems.front();
    fs::remove_all(dir);
  }
}

TEST(Experiment, DivergedRunsNeverReach) {
  RunReport r;
  r.history.push_back(EpochRecord{1, 0.0, 0.0, 1.0, 0.0, false});
  EXPECT_EQ(first_reach(r, 1e-6), 1u);
  r.status = RunStatus::diverged;
  EXPECT_FALSE(first_reach(r, 1e-6));
  r.status = RunStatus::failed;
  EXPECT_FALSE(first_reach(r, 1.0));
}

TEST(Experiment, SeedsSharedAcrossArms) {
  const ExperimentResult res = run_experiment(small_spec(), synthetic_trainer);
  ASSERT_EQ(res.runs.size(), 6u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(res.runs[i].arm, 0u);
    EXPECT_EQ(res.runs[i + 3].arm, 1u);
    EXPECT_EQ(res.runs[i].run_id, i);
    EXPECT_EQ(res.runs[i].seeds.data, res.runs[i + 3].seeds.data);
    EXPECT_EQ(res.runs[i].seeds.model, res.runs[i + 3].seeds.model);
  }
  EXPECT_NE(res.runs[0].seeds.data, res.runs[1].seeds.data);
  EXPECT_NE(res.runs[0].seeds.data, res.runs[0].seeds.model);
}

TEST(Experiment, FailedRunIsRecordedAndOthersContinue) {
  ExperimentSpec spec = small_spec();
  auto trainer = [](const Arm& arm, const RunSeeds& seeds, const ExperimentSpec& s) {
    if (arm.label == "rnn" && seeds.run == run_seeds(s.master_seed, 1).run) {
      throw std::runtime_error("boom");
    }
    return oracle_trainer(arm, seeds, s);
  };
  std::size_t callbacks = 0;
  const ExperimentResult res =
      run_experiment(spec, trainer, [&](const RunRecord&) { ++callbacks; });
  EXPECT_EQ(callbacks, 6u);
  const RunRecord& bad = res.runs[3 + 1];
  EXPECT_EQ(bad.report.status, RunStatus::failed);
  EXPECT_EQ(bad.error, "boom");
  EXPECT_EQ(res.curves[spec.thresholds.size()].counts[0], 2u);

  const fs::path dir = scratch("failed");
  emit_reports(res, dir);
  const auto meta = nlohmann::json::parse(read_file(dir / "metadata.json"));
  ASSERT_EQ(meta["errors"].size(), 1u);
  EXPECT_EQ(meta["errors"][0]["error"], "boom");
  EXPECT_TRUE(testkit::check_reports(dir).empty());
  fs::remove_all(dir);
}

// Reports -------------------------------------------------------------------

TEST(Reports, ByteIdenticalAcrossReruns) {
  ExperimentSpec spec = small_spec();
  spec.workers = 1;
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  emit_reports(run_experiment(spec), a);
  spec.workers = 4;
  emit_reports(run_experiment(spec), b);
  for (const char* f : {"runs.csv", "curves.csv", "final.csv", "summary.json"}) {
    EXPECT_EQ(read_file(a / f), read_file(b / f)) << f;
  }
  EXPECT_FALSE(read_file(a / "runs.csv").empty());
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Reports, SummaryMatchesRecomputationFromCsv) {
  ExperimentSpec spec = small_spec(TaskKind::tempord);
  spec.arms = {parse_arm("dmu:5,6"), parse_arm("dmu:5,6:nos"), parse_arm("gru:2,4")};
  const fs::path dir = scratch("summary");
  const ExperimentResult res = run_experiment(spec);
  emit_reports(res, dir);
  const auto problems = testkit::check_reports(dir);
  EXPECT_TRUE(problems.empty()) << problems.front();

  // Direct recomputation of one mean from final.csv.
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& row : read_csv(dir / "final.csv")) {
    if (row.at("cell") == "gru") {
      sum += testkit::num(row.at("test_loss"));
      ++n;
    }
  }
  const auto summary = nlohmann::json::parse(read_file(dir / "summary.json"));
  EXPECT_NEAR(summary["cells"][2]["test_loss"]["mean"].get<double>(), sum / n, 1e-12);
  fs::remove_all(dir);
}

TEST(Reports, IdenticalRunsHaveZeroStd) {
  auto same = [](const Arm&, const RunSeeds&, const ExperimentSpec&) {
    RunReport r;
    r.history.push_back(EpochRecord{1, 0.125, 0.25, 1.0, 0.0, false});
    r.test_loss = 0.375;
    return r;
  };
  ExperimentSpec spec = small_spec();
  spec.runs = 7;
  const auto summary = summary_json(run_experiment(spec, same));
  for (const auto& cell : summary["cells"]) {
    EXPECT_EQ(cell["train_loss"]["std"].get<double>(), 0.0);
    EXPECT_EQ(cell["test_loss"]["std"].get<double>(), 0.0);
    EXPECT_EQ(cell["test_loss"]["mean"].get<double>(), 0.375);
    EXPECT_EQ(cell["test_loss"]["count"].get<std::size_t>(), 7u);
  }
}

TEST(Reports, EmptyExperimentWritesHeadersOnly) {
  ExperimentResult res;
  res.spec = small_spec();
  res.curves = threshold_curves(res.spec, {}, 0);
  const fs::path dir = scratch("empty");
  emit_reports(res, dir, EmitOptions{true});
  EXPECT_EQ(read_file(dir / "runs.csv"),
            "run_id,seed,cell,epoch,train_loss,val_loss,scale_S,status\n");
  EXPECT_EQ(read_file(dir / "curves.csv"), "cell,threshold,epoch,cumulative_count\n");
  EXPECT_EQ(read_file(dir / "final.csv"),
            "run_id,seed,cell,status,epochs,train_loss,val_loss,test_loss\n");
  const auto summary = nlohmann::json::parse(read_file(dir / "summary.json"));
  EXPECT_EQ(summary["cells"][0]["test_loss"]["count"], 0);
  EXPECT_TRUE(summary["cells"][0]["test_loss"]["mean"].is_null());
  EXPECT_TRUE(fs::exists(dir / "curves_dmu.dat"));
  fs::remove_all(dir);
}

TEST(Reports, GnuplotColumnsFollowThresholds) {
  ExperimentSpec spec = small_spec();
  spec.thresholds = {0.5, 0.25};
  const ExperimentResult res = run_experiment(spec, synthetic_trainer);
  const fs::path dir = scratch("gnuplot");
  emit_reports(res, dir, EmitOptions{true});
  std::istringstream in(read_file(dir / "curves_rnn.dat"));
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "# epoch 0.5 0.25");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, res.epochs);
  fs::remove_all(dir);
}

TEST(Reports, LossStatsHandValues) {
  const LossStats s = loss_stats({1.0, 2.0, 3.0, 4.0});
  EXPECT_EQ(s.count, 4u);
  EXPECT_EQ(s.best, 1.0);
  EXPECT_EQ(s.mean, 2.5);
  EXPECT_DOUBLE_EQ(s.std_dev, std::sqrt(1.25));
  EXPECT_TRUE(std::isnan(loss_stats({}).mean));
}

TEST(Reports, RealFormatting) {
  EXPECT_EQ(format_real(0.1), "0.10000000000000001");
  EXPECT_EQ(format_real(2.0), "2");
  EXPECT_EQ(format_real(NAN), "nan");
  EXPECT_EQ(format_real(-kInf), "-inf");
  EXPECT_EQ(std::strtod(format_real(1.0 / 3.0).c_str(), nullptr), 1.0 / 3.0);
}

// Spec parsing --------------------------------------------------------------

TEST(Spec, ParseArm) {
  const Arm a = parse_arm("gru:3,2");
  EXPECT_EQ(a.kind, CellKind::gru);
  EXPECT_EQ(a.arch, (std::vector<std::size_t>{3, 2}));
  EXPECT_EQ(a.label, "gru");
  EXPECT_TRUE(a.scaling);
  const Arm n = parse_arm("dmu:5,5:nos");
  EXPECT_FALSE(n.scaling);
  EXPECT_EQ(n.label, "dmu-nos");
  for (const char* bad : {"dmu", "cnn:3", "dmu:", "dmu:3,,2", "dmu:0,3", "rnn:3:nos", "dmu:3:x"}) {
    EXPECT_THROW(parse_arm(bad), std::invalid_argument) << bad;
  }
}

TEST(Spec, ValidateRejectsBadSpecs) {
  ExperimentSpec s = small_spec();
  s.thresholds = {1e-2, 1e-2};
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = small_spec();
  s.runs = 0;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = small_spec();
  s.arms.push_back(parse_arm("dmu:2,2"));
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = small_spec();
  s.arms.clear();
  EXPECT_THROW(s.validate(), std::invalid_argument);
  EXPECT_THROW(run_experiment(s, oracle_trainer), std::invalid_argument);
}

TEST(Spec, JsonRoundTrip) {
  ExperimentSpec s = small_spec(TaskKind::tempord);
  s.arms.push_back(parse_arm("dmu:5,6:nos"));
  s.thresholds = {0.1, 0.01};
  s.train.optimizer.clip_norm = 2.5;
  s.train.scaling.p = 3.0;
  s.output_dir = "out/x";
  const auto j = experiment_to_json(s);
  const ExperimentSpec back = experiment_from_json(j);
  EXPECT_EQ(experiment_to_json(back), j);
  EXPECT_EQ(back.arms[2].label, "dmu-nos");
  EXPECT_FALSE(back.arms[2].scaling);
  EXPECT_EQ(back.train.optimizer.clip_norm, 2.5);
  EXPECT_EQ(back.task.tempord.t3_max, s.task.tempord.t3_max);
}

TEST(Spec, LoadsCommentedConfigFile) {
  const fs::path dir = scratch("config");
  std::ofstream(dir / "c.json") << R"({
    // desk-scale smoke test
    "task": {"kind": "noiseseq", "scale": "desk"},
    "arms": [{"cell": "lstm", "arch": [2, 2]}],
    "runs": 2,
    "train": {"max_epochs": 7, "optimizer": {"kind": "sgd", "learning_rate": 0.5}}
  })";
  const ExperimentSpec s = load_experiment_spec(dir / "c.json");
  EXPECT_EQ(s.task.kind, TaskKind::noiseseq);
  EXPECT_EQ(s.task.noiseseq.n, 10u);
  EXPECT_EQ(s.runs, 2u);
  EXPECT_EQ(s.train.max_epochs, 7u);
  EXPECT_EQ(s.train.optimizer.kind, OptimizerKind::sgd);
  EXPECT_EQ(s.thresholds.size(), 5u);
  std::ofstream(dir / "bad.json") << R"({"arms": [{"cell": "cnn", "arch": [2]}]})";
  EXPECT_THROW(load_experiment_spec(dir / "bad.json"), std::invalid_argument);
  fs::remove_all(dir);
}

TEST(Spec, WorkerResolution) {
  EXPECT_EQ(resolve_workers(3), 3u);
  ::setenv("DMU_WORKERS", "5", 1);
  EXPECT_EQ(resolve_workers(0), 5u);
  ::unsetenv("DMU_WORKERS");
  EXPECT_GE(resolve_workers(0), 1u);
}

// CLI -----------------------------------------------------------------------

struct CliResult {
  int code;
  std::string out, err;
};

CliResult cli(std::vector<std::string> args) {
  args.insert(args.begin(), "dmu");
  std::vector<char*> argv;
  for (std::string& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  const int code = cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

TEST(Cli, CountWeightsReferenceArchitectures) {
  EXPECT_EQ(cli({"count-weights", "--task", "adding", "--cell", "dmu", "--arch", "5,5"}).out,
            "106\n");
  EXPECT_EQ(cli({"count-weights", "--task", "tempord", "--cell", "dmu", "--arch", "5,6"}).out,
            "203\n");
  EXPECT_EQ(cli({"count-weights", "--task", "noiseseq", "--cell", "dmu", "--arch", "5,4"}).out,
            "573\n");
  const CliResult table = cli({"count-weights"});
  EXPECT_EQ(table.code, 0);
  EXPECT_NE(table.out.find("573"), std::string::npos);
}

TEST(Cli, HelpAndUsageErrors) {
  const CliResult help = cli({"experiment", "--help"});
  EXPECT_EQ(help.code, 0);
  EXPECT_NE(help.out.find("Usage"), std::string::npos);
  EXPECT_EQ(cli({"count-weights", "--cell", "cnn", "--arch", "2"}).code, 2);
  EXPECT_EQ(cli({"train", "--cell", "cnn"}).code, 2);
  const CliResult bad = cli({"train", "--frobnicate"});
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.err.find("Usage"), std::string::npos);
  EXPECT_EQ(cli({}).code, 2);
  EXPECT_EQ(cli({"check-scaling"}).code, 2);
}

TEST(Cli, CheckScalingPrintsChain) {
  const CliResult r = cli({"check-scaling", "--norms", "2,1"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("ratio 2\n"), std::string::npos);
  const auto pos = r.out.find("S_next ");
  ASSERT_NE(pos, std::string::npos);
  EXPECT_NEAR(std::strtod(r.out.c_str() + pos + 7, nullptr), std::pow(2.0, -1.0 / 1.2), 1e-12);
}

TEST(Cli, TrainWithoutScalingWritesHistory) {
  const fs::path dir = scratch("cli_train");
  const std::string hist = (dir / "h.csv").string();
  const CliResult r = cli({"train", "--task", "adding", "--scale", "desk", "--no-scaling",
                           "--epochs", "3", "--samples", "32", "--validation", "16",
                           "--test-samples", "16", "--history", hist, "--save",
                           (dir / "p.json").string(), "--quiet"});
  EXPECT_EQ(r.code, 0) << r.err;
  const auto rows = read_csv(hist);
  ASSERT_EQ(rows.size(), 3u);
  for (const auto& row : rows) EXPECT_EQ(row.at("scale_S"), "1");
  EXPECT_TRUE(fs::exists(dir / "p.json"));
  fs::remove_all(dir);
}

TEST(Cli, ExperimentWritesCheckableReports) {
  const fs::path dir = scratch("cli_exp");
  const CliResult r = cli({"experiment", "--task", "adding", "--scale", "desk", "--arm",
                           "dmu:5,5", "--arm", "dmu:5,5:nos", "--runs", "2", "--epochs", "3",
                           "--samples", "32", "--validation", "16", "--test-samples", "16",
                           "--out", dir.string(), "--quiet", "--gnuplot"});
  EXPECT_EQ(r.code, 0) << r.err;
  const auto problems = testkit::check_reports(dir);
  EXPECT_TRUE(problems.empty()) << problems.front();
  EXPECT_TRUE(fs::exists(dir / "curves_dmu-nos.dat"));
  for (const auto& row : read_csv(dir / "runs.csv")) {
    if (row.at("cell") == "dmu-nos") EXPECT_EQ(row.at("scale_S"), "1");
  }
  fs::remove_all(dir);
}

TEST(Cli, GenDataEmitsJsonLines) {
  const CliResult r = cli({"gen-data", "--task", "tempord", "--scale", "desk", "--count", "4"});
  EXPECT_EQ(r.code, 0);
  std::istringstream in(r.out);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_LT(j["target"].get<std::size_t>(), 8u);
    ++n;
  }
  EXPECT_EQ(n, 4u);
  EXPECT_EQ(r.out, cli({"gen-data", "--task", "tempord", "--scale", "desk", "--count", "4"}).out);
}

}  // namespace
