// SPDX-License-Identifier: Apache-2.0
//
// Recurrent blocks: the Deep Memory Update module and the RNN / LSTM / GRU
// baselines, plus the sequence model that puts a linear readout on top.
//
// DMU step, for memory width d:
//
//   u_t        = [x_t ; S * h_{t-1}]
//   (z_t, c_t) = FNN(u_t)          hidden layers tanh, output layer linear (2d)
//   h_t        = h_{t-1} o sigmoid(z_t) + tanh(c_t) o (1 - sigmoid(z_t))
//
// The hidden-layer nonlinearity of the FNN is tanh.

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string_view>
#include <variant>
#include <vector>

#include "dmu/autodiff.hpp"
#include "dmu/parameter.hpp"
#include "dmu/rng.hpp"

namespace dmu {

enum class CellKind { dmu, rnn, lstm, gru };

std::string_view to_string(CellKind kind);
std::optional<CellKind> parse_cell_kind(std::string_view name);

/// Memory-cell activation f. Only tanh for now.
enum class Activation { tanh };

/// Uniform Glorot: U(-a, a), a = sqrt(6 / (rows + cols)).
ad::Matrix glorot_uniform(std::size_t rows, std::size_t cols, Rng& rng);

struct DmuSpec {
  std::size_t input_width = 0;
  std::vector<std::size_t> fnn_hidden;
  std::size_t memory_width = 0;
  double z_bias_offset = 3.0;
  Activation f = Activation::tanh;

  /// Throws std::invalid_argument on zero widths or an empty hidden list.
  void validate() const;
};

struct DmuStep {
  ad::Var h;
  ad::Var scaled_prev;  // S * h_{t-1}, as consumed by the FNN
  ad::Var z;
  ad::Var candidate;
};

struct DmuUnroll {
  std::vector<ad::Var> states;  // h_1 .. h_T
  std::vector<ad::Var> scaled;  // S*h_0 .. S*h_{T-1}
};

class DmuModel {
 public:
  /// Glorot weights, zero biases, then z_bias_offset added to the biases of
  /// the first d output units (the ones producing z_t).
  static DmuModel init(const DmuSpec& spec, Rng& rng);

  const DmuSpec& spec() const { return spec_; }
  ParameterList& parameters() { return params_; }
  const ParameterList& parameters() const { return params_; }

  /// `bound` is parameters().bind(tape).
  DmuStep step(std::span<const ad::Var> bound, ad::Var h_prev, ad::Var x, double scale) const;

  /// Runs the recurrence over xs from h0 (zeros when not given).
  DmuUnroll unroll(ad::Tape& tape, std::span<const ad::Var> bound,
                   std::span<const ad::Var> xs, double scale,
                   std::optional<ad::Var> h0 = std::nullopt) const;

 private:
  DmuSpec spec_;
  ParameterList params_;  // per FNN layer: weight (in x out), bias (1 x out)
};

// Baselines ---------------------------------------------------------------

struct CellSpec {
  CellKind kind = CellKind::rnn;
  std::vector<std::size_t> layer_widths;
  std::size_t input_width = 0;

  void validate() const;
};

/// h = tanh([x ; h] W + b)
struct RnnWeights {
  ad::Var weight;
  ad::Var bias;
};
ad::Var rnn_step(const RnnWeights& w, ad::Var h, ad::Var x);

/// Gate columns of W are ordered input, forget, candidate, output.
struct LstmWeights {
  ad::Var weight;  // (in + h) x 4h
  ad::Var bias;    // 1 x 4h
};
struct LstmState {
  ad::Var h;
  ad::Var c;
};
LstmState lstm_step(const LstmWeights& w, const LstmState& state, ad::Var x);

/// z = sig([x;h]Wz + bz), r = sig([x;h]Wr + br), n = tanh([x; r o h]Wn + bn),
/// h' = (1 - z) o n + z o h. gate_weight holds [Wz | Wr].
struct GruWeights {
  ad::Var gate_weight;       // (in + h) x 2h
  ad::Var gate_bias;         // 1 x 2h
  ad::Var candidate_weight;  // (in + h) x h
  ad::Var candidate_bias;    // 1 x h
};
ad::Var gru_step(const GruWeights& w, ad::Var h, ad::Var x);

/// Stack of RNN, LSTM or GRU layers; layer i feeds layer i+1.
class RecurrentStack {
 public:
  struct LayerState {
    ad::Var h;
    ad::Var c;  // LSTM only
  };
  using State = std::vector<LayerState>;

  static RecurrentStack init(const CellSpec& spec, Rng& rng);

  const CellSpec& spec() const { return spec_; }
  ParameterList& parameters() { return params_; }
  const ParameterList& parameters() const { return params_; }

  State initial_state(ad::Tape& tape, std::size_t batch) const;
  State step(std::span<const ad::Var> bound, const State& state, ad::Var x) const;
  /// Top-layer output for every step.
  std::vector<ad::Var> unroll(ad::Tape& tape, std::span<const ad::Var> bound,
                              std::span<const ad::Var> xs) const;

 private:
  std::size_t params_per_layer() const;

  CellSpec spec_;
  ParameterList params_;
};

// Whole model -------------------------------------------------------------

/// `arch` follows the usual notation: for DMU the FNN hidden widths followed
/// by the memory width d ((5,5) is one hidden layer of 5 and d = 5); for
/// the baselines the layer widths.
struct ModelSpec {
  CellKind kind = CellKind::dmu;
  std::vector<std::size_t> arch;
  std::size_t input_width = 0;
  std::size_t output_width = 0;
  double z_bias_offset = 3.0;

  void validate() const;
  DmuSpec dmu_spec() const;
  CellSpec cell_spec() const;
  std::size_t block_output_width() const;
};

/// Recurrent block followed by a linear readout applied at the final step.
class SequenceModel {
 public:
  struct Forward {
    ad::Var output;                // batch x output_width, final step
    std::vector<ad::Var> scaled;   // DMU only: S*h_0 .. S*h_T (last one virtual)
    std::vector<ad::Var> bound;    // aligned with parameters()
  };

  static SequenceModel init(const ModelSpec& spec, Rng& rng);

  const ModelSpec& spec() const { return spec_; }
  bool uses_memory_scaling() const { return spec_.kind == CellKind::dmu; }

  ParameterRefs parameters();
  std::vector<const Parameter*> parameters() const;
  std::size_t weight_count() const;

  /// xs[t] is batch x input_width. `scale` is ignored by baseline blocks.
  Forward forward(ad::Tape& tape, std::span<const ad::Matrix> xs, double scale) const;

  const DmuModel* dmu() const { return std::get_if<DmuModel>(&block_); }
  DmuModel* dmu() { return std::get_if<DmuModel>(&block_); }

 private:
  ModelSpec spec_;
  std::variant<DmuModel, RecurrentStack> block_;
  ParameterList readout_;
};

/// Trainable scalars of block + readout, biases included.
std::size_t count_weights(const ModelSpec& spec);

}  // namespace dmu
