// SPDX-License-Identifier: Apache-2.0
#include "dmu/scaling.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dmu {

namespace {

// log(sum_i exp(x_i))
double log_sum_exp(std::span<const double> xs) {
  const double mx = *std::max_element(xs.begin(), xs.end());
  double acc = 0.0;
  for (double x : xs) acc += std::exp(x - mx);
  return mx + std::log(acc);
}

std::vector<double> floored(std::span<const double> norms, double floor) {
  std::vector<double> out(norms.begin(), norms.end());
  for (double& n : out) n = std::max(n, floor);
  return out;
}

void check_chain_args(std::span<const double> norms, double p) {
  if (norms.size() < 2) {
    throw std::invalid_argument("scaling update needs at least two gradient norms");
  }
  if (!(p >= 1.0)) throw std::invalid_argument("scaling exponent p must be >= 1");
}

}  // namespace

EpisodeGradLog capture_norms(const ad::Tape& tape, std::span<const ad::Var> scaled) {
  EpisodeGradLog log;
  log.norms.reserve(scaled.size());
  for (const ad::Var& v : scaled) log.norms.push_back(ad::frobenius_norm(tape.read_adjoint(v)));
  return log;
}

namespace {

double log_growth_ratio(std::span<const double> norms, double p, double norm_floor) {
  check_chain_args(norms, p);
  const std::vector<double> n = floored(norms, norm_floor);
  const std::size_t m = n.size() - 1;
  std::vector<double> older(m), newer(m);
  for (std::size_t t = 1; t <= m; ++t) {
    older[t - 1] = p * std::log(n[t - 1]);
    newer[t - 1] = p * std::log(n[t]);
  }
  return log_sum_exp(older) - log_sum_exp(newer);
}

double blend(double scale, std::uint64_t k, double factor) {
  const double kd = static_cast<double>(k);
  return std::min(scale * (kd - 1.0) / kd + scale * (1.0 / kd) * factor, 1.0);
}

}  // namespace

double growth_ratio(std::span<const double> norms, double p, double norm_floor) {
  return std::exp(log_growth_ratio(norms, p, norm_floor));
}

double next_scale(double scale, std::uint64_t k, double ratio, double p, double epsilon) {
  return blend(scale, k, std::pow(ratio, -1.0 / (p * (1.0 + epsilon))));
}

ScalingChain interpolation_chain(std::span<const double> norms, double p, double epsilon,
                                 std::uint64_t k, double norm_floor) {
  check_chain_args(norms, p);
  if (k == 0) throw std::invalid_argument("episode index k starts at 1");
  const std::vector<double> n = floored(norms, norm_floor);
  const std::size_t m = n.size() - 1;

  ScalingChain c;
  double mean_ratio = 0.0;
  std::vector<double> log_ratio_p(m);
  for (std::size_t t = 1; t <= m; ++t) {
    mean_ratio += n[t - 1] / n[t];
    log_ratio_p[t - 1] = p * (std::log(n[t - 1]) - std::log(n[t]));
  }
  mean_ratio /= static_cast<double>(m);
  c.s0 = 1.0 / mean_ratio;
  const double log_power_mean = log_sum_exp(log_ratio_p) - std::log(static_cast<double>(m));
  c.s1 = std::exp(-log_power_mean / p);
  const double log_r = log_growth_ratio(n, p, norm_floor);
  c.s2 = std::exp(-log_r / p);
  c.s3 = std::exp(-log_r / (p * (1.0 + epsilon)));
  const double kd = static_cast<double>(k);
  c.s4 = (kd - 1.0) / kd + c.s3 / kd;
  return c;
}

ScaleController::ScaleController(ScaleConfig config) : config_(config) {
  if (!(config_.p >= 1.0)) throw std::invalid_argument("scaling exponent p must be >= 1");
  if (!(config_.epsilon > 0.0)) throw std::invalid_argument("scaling epsilon must be > 0");
  if (!(config_.norm_floor > 0.0)) throw std::invalid_argument("norm floor must be > 0");
}

ScaleUpdate ScaleController::update(const EpisodeGradLog& log) {
  const std::uint64_t k = k_++;
  if (!config_.enabled) return ScaleUpdate::disabled;
  if (log.norms.size() < 2) return ScaleUpdate::skipped_short;
  const bool any_signal = std::any_of(log.norms.begin(), log.norms.end(),
                                      [&](double v) { return v >= config_.norm_floor; });
  if (!any_signal) return ScaleUpdate::skipped_no_signal;
  const double log_ratio = log_growth_ratio(log.norms, config_.p, config_.norm_floor);
  scale_ = blend(scale_, k, std::exp(-log_ratio / (config_.p * (1.0 + config_.epsilon))));
  return ScaleUpdate::applied;
}

ScaleController update_scale(ScaleController controller, const EpisodeGradLog& log) {
  controller.update(log);
  return controller;
}

}  // namespace dmu
