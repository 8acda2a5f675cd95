// SPDX-License-Identifier: Apache-2.0
//
// Memory-scaling controller for the DMU block.
//
// After each episode k the gradient norms |g_t| = |dL_k / d(S_k h_t)| are read
// off the tape and the scale is updated with
//
//   R       = sum_t |g_{t-1}|^p / sum_t |g_t|^p
//   S_{k+1} = min{ S_k (k-1)/k + S_k (1/k) R^(-1 / (p (1 + eps))), 1 }
//
// R > 1 means gradients grow going back in time (exploding) and S shrinks;
// R < 1 (vanishing) grows S up to the ceiling of 1.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dmu/autodiff.hpp"

namespace dmu {

struct ScaleConfig {
  double p = 1.0;
  double epsilon = 0.2;
  double norm_floor = 1e-12;
  /// false pins S to 1 ("DMU without S").
  bool enabled = true;
};

/// |g_t| for consecutive scaled-memory nodes of one episode, oldest first.
struct EpisodeGradLog {
  std::vector<double> norms;
};

/// Frobenius norm (over batch x d) of the adjoint at each scaled node.
/// Throws ad::TapeError if the tape has not been differentiated.
EpisodeGradLog capture_norms(const ad::Tape& tape, std::span<const ad::Var> scaled);

enum class ScaleUpdate {
  applied,
  skipped_short,      // fewer than two norms
  skipped_no_signal,  // every norm below the floor
  disabled,
};

class ScaleController {
 public:
  explicit ScaleController(ScaleConfig config = {});

  double scale() const { return scale_; }
  /// Index of the next episode; starts at 1.
  std::uint64_t k() const { return k_; }
  std::uint64_t episodes_completed() const { return k_ - 1; }
  const ScaleConfig& config() const { return config_; }

  /// Applies the clipped update for episode k and advances k. Skipped
  /// episodes still advance k.
  ScaleUpdate update(const EpisodeGradLog& log);

 private:
  ScaleConfig config_;
  double scale_ = 1.0;
  std::uint64_t k_ = 1;
};

/// Value-returning form of ScaleController::update.
ScaleController update_scale(ScaleController controller, const EpisodeGradLog& log);

/// Closed-form update, without bookkeeping: the value S_{k+1} for a given
/// growth ratio R.
double next_scale(double scale, std::uint64_t k, double ratio, double p, double epsilon);

/// sum |g_{t-1}|^p / sum |g_t|^p over consecutive pairs, norms floored first.
/// Evaluated in log space so large p does not overflow.
double growth_ratio(std::span<const double> norms, double p, double norm_floor = 1e-12);

/// Multiplicative factors S_{k+1} / S_k of the successive refinements of the
/// update rule, for one episode's norms:
///   s0  inverse of the plain average ratio |g_{t-1}| / |g_t|
///   s1  power mean of the ratios with exponent p, inverted
///   s2  |g_t|^p-weighted average, i.e. R^(-1/p)
///   s3  R^(-1/(p(1+eps)))
///   s4  (k-1)/k + s3/k  (averaging over episodes)
struct ScalingChain {
  double s0 = 1.0;
  double s1 = 1.0;
  double s2 = 1.0;
  double s3 = 1.0;
  double s4 = 1.0;
};

/// Throws std::invalid_argument for fewer than two norms or p < 1.
ScalingChain interpolation_chain(std::span<const double> norms, double p, double epsilon,
                                 std::uint64_t k = 1, double norm_floor = 1e-12);

}  // namespace dmu
