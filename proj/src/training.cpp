// SPDX-License-Identifier: Apache-2.0
#include "dmu/training.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace dmu {

using ad::Matrix;

std::string_view to_string(OptimizerKind kind) {
  return kind == OptimizerKind::adam ? "adam" : "sgd";
}

std::optional<OptimizerKind> parse_optimizer_kind(std::string_view name) {
  if (name == "adam") return OptimizerKind::adam;
  if (name == "sgd") return OptimizerKind::sgd;
  return std::nullopt;
}

std::string_view to_string(RunStatus status) {
  switch (status) {
    case RunStatus::reached_threshold: return "reached";
    case RunStatus::budget_exhausted: return "budget";
    case RunStatus::no_improvement: return "stalled";
    case RunStatus::diverged: return "diverged";
    case RunStatus::failed: return "failed";
  }
  return "?";
}

// Optimizers --------------------------------------------------------------

namespace {

void check_grads(std::span<Parameter* const> params, std::span<const Matrix> grads) {
  if (params.size() != grads.size()) {
    throw ad::DimensionError("optimizer: " + std::to_string(grads.size()) +
                             " gradients for " + std::to_string(params.size()) +
                             " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->value.same_shape(grads[i])) {
      throw ad::DimensionError("optimizer: gradient shape " + grads[i].shape_string() +
                               " does not match parameter '" + params[i]->name + "'");
    }
  }
}

bool all_finite(std::span<Parameter* const> params) {
  for (const Parameter* p : params) {
    for (double v : p->value.data()) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

}  // namespace

double clip_gradients(std::span<Matrix> grads, double max_norm) {
  double sq = 0.0;
  for (const Matrix& g : grads) {
    for (double v : g.data()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double f = max_norm / norm;
    for (Matrix& g : grads) {
      for (double& v : g.data()) v *= f;
    }
  }
  return norm;
}

void adam_step(OptimizerState& opt, std::span<Parameter* const> params,
               std::span<const Matrix> grads) {
  check_grads(params, grads);
  if (opt.first_moment.size() != params.size()) {
    opt.first_moment.clear();
    opt.second_moment.clear();
    for (const Parameter* p : params) {
      opt.first_moment.emplace_back(p->value.rows(), p->value.cols());
      opt.second_moment.emplace_back(p->value.rows(), p->value.cols());
    }
  }
  const OptimizerConfig& c = opt.config;
  ++opt.steps;
  const double t = static_cast<double>(opt.steps);
  const double correction1 = 1.0 - std::pow(c.beta1, t);
  const double correction2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& w = params[i]->value;
    Matrix& m = opt.first_moment[i];
    Matrix& v = opt.second_moment[i];
    const Matrix& g = grads[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
      const double m_hat = m[j] / correction1;
      const double v_hat = v[j] / correction2;
      w[j] -= c.learning_rate * m_hat / (std::sqrt(v_hat) + c.eps);
    }
  }
}

void sgd_step(OptimizerState& opt, std::span<Parameter* const> params,
              std::span<const Matrix> grads) {
  check_grads(params, grads);
  ++opt.steps;
  const double lr = opt.config.learning_rate;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& w = params[i]->value;
    for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr * grads[i][j];
  }
}

void optimizer_step(OptimizerState& opt, std::span<Parameter* const> params,
                    std::vector<Matrix> grads) {
  if (opt.config.clip_norm) clip_gradients(grads, *opt.config.clip_norm);
  if (opt.config.kind == OptimizerKind::adam) {
    adam_step(opt, params, grads);
  } else {
    sgd_step(opt, params, grads);
  }
}

// Training ----------------------------------------------------------------

void TrainConfig::validate() const {
  if (sizes.batch_size == 0 || sizes.train_per_epoch == 0 || sizes.validation == 0 ||
      sizes.test == 0) {
    throw std::invalid_argument("train config: sizes must be positive");
  }
  if (!(stop_threshold > 0.0)) {
    throw std::invalid_argument("train config: stop_threshold must be > 0");
  }
  if (!(optimizer.learning_rate >= 0.0)) {
    throw std::invalid_argument("train config: learning rate must be >= 0");
  }
}

ad::Var batch_loss(ad::Var output, const Batch& batch, LossKind kind) {
  if (kind == LossKind::mse) {
    return ad::mse_loss(output, output.tape()->leaf(batch.targets));
  }
  return ad::cross_entropy_loss(output, batch.classes);
}

EpochRecord train_epoch(SequenceModel& model, ScaleController& controller,
                        OptimizerState& optimizer, const Dataset& train, LossKind loss) {
  const auto start = std::chrono::steady_clock::now();
  EpochRecord rec;
  rec.val_loss = std::numeric_limits<double>::quiet_NaN();
  ParameterRefs params = model.parameters();
  double total = 0.0;
  std::size_t seen = 0;
  for (const Batch& batch : train) {
    ad::Tape tape;
    auto fwd = model.forward(tape, batch.steps, controller.scale());
    ad::Var l = batch_loss(fwd.output, batch, loss);
    const double value = l.value()[0];
    if (!std::isfinite(value)) {
      rec.diverged = true;
      break;
    }
    tape.backward(l);
    EpisodeGradLog log;
    if (model.uses_memory_scaling()) log = capture_norms(tape, fwd.scaled);
    optimizer_step(optimizer, params, gradients(tape, fwd.bound));
    controller.update(log);
    total += value * static_cast<double>(batch.size());
    seen += batch.size();
    if (!all_finite(params)) {
      rec.diverged = true;
      break;
    }
  }
  rec.train_loss = seen > 0 ? total / static_cast<double>(seen) : 0.0;
  if (rec.diverged) rec.train_loss = std::numeric_limits<double>::quiet_NaN();
  rec.scale_S = controller.scale();
  rec.wall_time =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rec;
}

double evaluate(const SequenceModel& model, const Dataset& data, LossKind loss, double scale) {
  double total = 0.0;
  std::size_t seen = 0;
  for (const Batch& batch : data) {
    ad::Tape tape;
    auto fwd = model.forward(tape, batch.steps, scale);
    total += batch_loss(fwd.output, batch, loss).value()[0] * static_cast<double>(batch.size());
    seen += batch.size();
  }
  if (seen == 0) throw std::invalid_argument("evaluate: empty dataset");
  return total / static_cast<double>(seen);
}

RunReport run_until_stop(SequenceModel& model, const Split& split, const TrainConfig& config,
                         const EpochCallback& on_epoch) {
  config.validate();
  const LossKind loss = split.generator().spec().loss();
  ScaleConfig scaling = config.scaling;
  scaling.enabled = scaling.enabled && model.uses_memory_scaling();
  ScaleController controller(scaling);
  OptimizerState optimizer(config.optimizer);

  RunReport report;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    EpochRecord rec = train_epoch(model, controller, optimizer, split.train_epoch(epoch), loss);
    rec.epoch = epoch;
    if (!rec.diverged) {
      rec.val_loss = evaluate(model, split.validation(), loss, controller.scale());
      rec.diverged = !std::isfinite(rec.val_loss);
    }
    report.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (rec.diverged) {
      report.status = RunStatus::diverged;
      break;
    }
    if (rec.val_loss <= config.stop_threshold) {
      report.status = RunStatus::reached_threshold;
      break;
    }
    if (rec.val_loss < best_val) {
      best_val = rec.val_loss;
      since_best = 0;
    } else if (config.patience > 0 && ++since_best >= config.patience) {
      report.status = RunStatus::no_improvement;
      break;
    }
  }
  report.minibatches = controller.episodes_completed();
  report.test_loss = report.status == RunStatus::diverged
                         ? std::numeric_limits<double>::quiet_NaN()
                         : evaluate(model, split.test(), loss, controller.scale());
  return report;
}

RunReport run_until_stop(SequenceModel& model, const TaskSpec& task, const TrainConfig& config,
                         const EpochCallback& on_epoch) {
  const Split split = make_split(task, config.sizes, config.seed);
  return run_until_stop(model, split, config, on_epoch);
}

}  // namespace dmu
