// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "dmu/cells.hpp"
#include "dmu/scaling.hpp"
#include "dmu/tasks.hpp"

namespace dmu {

enum class OptimizerKind { adam, sgd };

std::string_view to_string(OptimizerKind kind);
std::optional<OptimizerKind> parse_optimizer_kind(std::string_view name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global gradient-norm clip; off when empty.
  std::optional<double> clip_norm;
};

struct OptimizerState {
  OptimizerConfig config;
  std::vector<ad::Matrix> first_moment;
  std::vector<ad::Matrix> second_moment;
  std::uint64_t steps = 0;

  explicit OptimizerState(OptimizerConfig cfg = {}) : config(cfg) {}
};

/// Rescales grads in place so their joint Frobenius norm is at most max_norm.
/// Returns the norm before clipping.
double clip_gradients(std::span<ad::Matrix> grads, double max_norm);

/// Adam with bias correction.
void adam_step(OptimizerState& opt, std::span<Parameter* const> params,
               std::span<const ad::Matrix> grads);
void sgd_step(OptimizerState& opt, std::span<Parameter* const> params,
              std::span<const ad::Matrix> grads);
/// Clips (if configured) and dispatches on opt.config.kind.
void optimizer_step(OptimizerState& opt, std::span<Parameter* const> params,
                    std::vector<ad::Matrix> grads);

struct TrainConfig {
  SplitSizes sizes;
  std::size_t max_epochs = 300;
  double stop_threshold = 1e-6;
  /// Epochs without validation improvement before stopping; 0 disables.
  /// The synthetic tasks stop on stop_threshold only.
  std::size_t patience = 0;
  std::uint64_t seed = 0;  // data seed
  OptimizerConfig optimizer;
  ScaleConfig scaling;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double scale_S = 1.0;
  double wall_time = 0.0;  // seconds
  bool diverged = false;
};

enum class RunStatus { reached_threshold, budget_exhausted, no_improvement, diverged, failed };
std::string_view to_string(RunStatus status);

struct RunReport {
  std::vector<EpochRecord> history;
  RunStatus status = RunStatus::budget_exhausted;
  double test_loss = 0.0;
  std::uint64_t minibatches = 0;
};

/// Loss at the final step of every sequence in the batch.
ad::Var batch_loss(ad::Var output, const Batch& batch, LossKind kind);

/// One pass over `train`. Per minibatch: unroll, loss, backward, gradient-norm
/// capture, optimizer step, scale update. val_loss is left NaN.
EpochRecord train_epoch(SequenceModel& model, ScaleController& controller,
                        OptimizerState& optimizer, const Dataset& train, LossKind loss);

/// Sample-weighted mean loss, no parameter updates.
double evaluate(const SequenceModel& model, const Dataset& data, LossKind loss, double scale);

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains until validation loss <= stop_threshold or max_epochs, then
/// evaluates on the test set. Divergence is reported, not thrown.
RunReport run_until_stop(SequenceModel& model, const Split& split, const TrainConfig& config,
                         const EpochCallback& on_epoch = {});
RunReport run_until_stop(SequenceModel& model, const TaskSpec& task, const TrainConfig& config,
                         const EpochCallback& on_epoch = {});

}  // namespace dmu
