// SPDX-License-Identifier: Apache-2.0
//
// Multi-seed experiments. Every (arm, run) pair trains independently; the
// results are joined into per-threshold cumulative success curves: for a
// loss threshold and epoch e, the number of runs whose validation loss has
// reached the threshold in or before epoch e.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "dmu/training.hpp"

namespace dmu {

/// One model family under comparison.
struct Arm {
  std::string label;  // column value in the reports, e.g. "dmu", "dmu-nos"
  CellKind kind = CellKind::dmu;
  std::vector<std::size_t> arch;
  bool scaling = true;  // DMU only; false is the "without S" ablation
};

/// Parses "kind:w1,w2[,...][:nos]", e.g. "dmu:5,5", "gru:3,2", "dmu:5,5:nos".
/// Throws std::invalid_argument on malformed input.
Arm parse_arm(std::string_view text);

struct ExperimentSpec {
  TaskSpec task;
  std::vector<Arm> arms;
  std::size_t runs = 51;
  std::vector<double> thresholds{1e-2, 1e-3, 1e-4, 1e-5, 1e-6};
  TrainConfig train;
  std::uint64_t master_seed = 0;
  /// 0 picks DMU_WORKERS from the environment, else the hardware thread count.
  std::size_t workers = 0;
  std::filesystem::path output_dir;

  void validate() const;
};

ExperimentSpec experiment_from_json(const nlohmann::json& doc);
nlohmann::json experiment_to_json(const ExperimentSpec& spec);
ExperimentSpec load_experiment_spec(const std::filesystem::path& path);

/// Worker count after applying the DMU_WORKERS fallback.
std::size_t resolve_workers(std::size_t requested);

/// Seeds for run `run` of an experiment. The data seed and the model seed
/// are shared by all arms, so arms see the same data and the "without S"
/// ablation starts from the same weights as its DMU counterpart.
struct RunSeeds {
  std::uint64_t run = 0;
  std::uint64_t data = 0;
  std::uint64_t model = 0;
};
RunSeeds run_seeds(std::uint64_t master_seed, std::size_t run);

struct RunRecord {
  std::size_t arm = 0;
  std::size_t run_id = 0;
  RunSeeds seeds;
  RunReport report;
  std::vector<std::optional<std::size_t>> first_reach;  // per threshold
  std::string error;  // set when the run threw
};

struct ThresholdCurve {
  std::string cell;
  double threshold = 0.0;
  std::vector<std::size_t> counts;  // counts[e - 1] for epoch e
};

struct ExperimentResult {
  ExperimentSpec spec;
  std::vector<RunRecord> runs;  // ordered by (arm, run_id)
  std::vector<ThresholdCurve> curves;
  std::size_t epochs = 0;  // curve length
};

/// Trains one run. Replaceable for testing the aggregation.
using Trainer = std::function<RunReport(const Arm&, const RunSeeds&, const ExperimentSpec&)>;

RunReport default_trainer(const Arm& arm, const RunSeeds& seeds, const ExperimentSpec& spec);

/// First epoch whose validation loss is <= threshold. Diverged runs never
/// reach anything.
std::optional<std::size_t> first_reach(const RunReport& report, double threshold);

std::vector<ThresholdCurve> threshold_curves(const ExperimentSpec& spec,
                                             const std::vector<RunRecord>& runs,
                                             std::size_t epochs);

ExperimentResult run_experiment(const ExperimentSpec& spec, const Trainer& trainer = default_trainer,
                                const std::function<void(const RunRecord&)>& on_run = {});

struct LossStats {
  std::size_t count = 0;
  double best = 0.0;
  double mean = 0.0;
  double std_dev = 0.0;  // population
};
LossStats loss_stats(const std::vector<double>& values);

nlohmann::json summary_json(const ExperimentResult& result);

struct EmitOptions {
  bool gnuplot = false;
};

/// Writes runs.csv, curves.csv, final.csv, summary.json and metadata.json
/// (the only file carrying a timestamp) into `dir`.
void emit_reports(const ExperimentResult& result, const std::filesystem::path& dir,
                  const EmitOptions& options = {});

/// %.17g; "nan"/"inf" for non-finite values.
std::string format_real(double v);

}  // namespace dmu
