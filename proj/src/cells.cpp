// SPDX-License-Identifier: Apache-2.0
#include "dmu/cells.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace dmu {

using ad::Matrix;
using ad::Var;

std::string_view to_string(CellKind kind) {
  switch (kind) {
    case CellKind::dmu: return "dmu";
    case CellKind::rnn: return "rnn";
    case CellKind::lstm: return "lstm";
    case CellKind::gru: return "gru";
  }
  return "?";
}

std::optional<CellKind> parse_cell_kind(std::string_view name) {
  for (CellKind k : {CellKind::dmu, CellKind::rnn, CellKind::lstm, CellKind::gru}) {
    if (name == to_string(k)) return k;
  }
  return std::nullopt;
}

Matrix glorot_uniform(std::size_t rows, std::size_t cols, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Matrix m(rows, cols);
  for (double& v : m.data()) v = rng.uniform(-limit, limit);
  return m;
}

namespace {

void require_positive(std::size_t v, const char* what) {
  if (v == 0) throw std::invalid_argument(std::string(what) + " must be positive");
}

Var dense(Var in, Var weight, Var bias) { return ad::add_bias(ad::matmul(in, weight), bias); }

Var zeros(ad::Tape& tape, std::size_t rows, std::size_t cols) {
  return tape.leaf(Matrix(rows, cols));
}

}  // namespace

// DMU ---------------------------------------------------------------------

void DmuSpec::validate() const {
  require_positive(input_width, "DMU input width");
  require_positive(memory_width, "DMU memory width");
  if (fnn_hidden.empty()) {
    throw std::invalid_argument("DMU FNN needs at least one hidden layer");
  }
  for (std::size_t w : fnn_hidden) require_positive(w, "DMU FNN hidden width");
}

DmuModel DmuModel::init(const DmuSpec& spec, Rng& rng) {
  spec.validate();
  DmuModel model;
  model.spec_ = spec;
  const std::size_t d = spec.memory_width;
  std::size_t fan_in = spec.input_width + d;
  std::vector<std::size_t> widths = spec.fnn_hidden;
  widths.push_back(2 * d);
  for (std::size_t l = 0; l < widths.size(); ++l) {
    const std::string prefix = "dmu.fnn" + std::to_string(l);
    model.params_.add(prefix + ".weight", glorot_uniform(fan_in, widths[l], rng));
    Matrix bias(1, widths[l]);
    if (l + 1 == widths.size()) {
      for (std::size_t i = 0; i < d; ++i) bias[i] += spec.z_bias_offset;
    }
    model.params_.add(prefix + ".bias", std::move(bias));
    fan_in = widths[l];
  }
  return model;
}

DmuStep DmuModel::step(std::span<const Var> bound, Var h_prev, Var x, double scale) const {
  const std::size_t d = spec_.memory_width;
  if (bound.size() != params_.size()) {
    throw ad::DimensionError("DMU step: expected " + std::to_string(params_.size()) +
                             " bound parameters, got " + std::to_string(bound.size()));
  }
  if (x.cols() != spec_.input_width || h_prev.cols() != d || x.rows() != h_prev.rows()) {
    throw ad::DimensionError("DMU step: input " + x.value().shape_string() + " / state " +
                             h_prev.value().shape_string() + " do not fit n=" +
                             std::to_string(spec_.input_width) + ", d=" + std::to_string(d));
  }
  DmuStep out;
  out.scaled_prev = ad::scale(h_prev, scale);
  Var a = ad::concat(x, out.scaled_prev);
  const std::size_t layers = bound.size() / 2;
  for (std::size_t l = 0; l + 1 < layers; ++l) {
    a = ad::tanh(dense(a, bound[2 * l], bound[2 * l + 1]));
  }
  a = dense(a, bound[2 * layers - 2], bound[2 * layers - 1]);
  out.z = ad::slice_cols(a, 0, d);
  out.candidate = ad::slice_cols(a, d, d);
  Var keep = ad::sigmoid(out.z);
  Var proposal = ad::tanh(out.candidate);
  out.h = ad::add(ad::hadamard(h_prev, keep), ad::hadamard(proposal, ad::one_minus(keep)));
  return out;
}

DmuUnroll DmuModel::unroll(ad::Tape& tape, std::span<const Var> bound,
                           std::span<const Var> xs, double scale,
                           std::optional<Var> h0) const {
  if (xs.empty()) throw std::invalid_argument("DMU unroll: empty input sequence");
  Var h = h0 ? *h0 : zeros(tape, xs.front().rows(), spec_.memory_width);
  DmuUnroll out;
  out.states.reserve(xs.size());
  out.scaled.reserve(xs.size());
  for (Var x : xs) {
    DmuStep s = step(bound, h, x, scale);
    out.scaled.push_back(s.scaled_prev);
    out.states.push_back(s.h);
    h = s.h;
  }
  return out;
}

// Baselines ---------------------------------------------------------------

Var rnn_step(const RnnWeights& w, Var h, Var x) {
  return ad::tanh(dense(ad::concat(x, h), w.weight, w.bias));
}

LstmState lstm_step(const LstmWeights& w, const LstmState& state, Var x) {
  const std::size_t n = state.h.cols();
  Var gates = dense(ad::concat(x, state.h), w.weight, w.bias);
  Var in_gate = ad::sigmoid(ad::slice_cols(gates, 0, n));
  Var forget_gate = ad::sigmoid(ad::slice_cols(gates, n, n));
  Var candidate = ad::tanh(ad::slice_cols(gates, 2 * n, n));
  Var out_gate = ad::sigmoid(ad::slice_cols(gates, 3 * n, n));
  Var c = ad::add(ad::hadamard(forget_gate, state.c), ad::hadamard(in_gate, candidate));
  return LstmState{ad::hadamard(out_gate, ad::tanh(c)), c};
}

Var gru_step(const GruWeights& w, Var h, Var x) {
  const std::size_t n = h.cols();
  Var gates = ad::sigmoid(dense(ad::concat(x, h), w.gate_weight, w.gate_bias));
  Var update = ad::slice_cols(gates, 0, n);
  Var reset = ad::slice_cols(gates, n, n);
  Var candidate =
      ad::tanh(dense(ad::concat(x, ad::hadamard(reset, h)), w.candidate_weight,
                     w.candidate_bias));
  return ad::add(ad::hadamard(ad::one_minus(update), candidate), ad::hadamard(update, h));
}

void CellSpec::validate() const {
  if (kind == CellKind::dmu) throw std::invalid_argument("CellSpec is for baseline cells");
  require_positive(input_width, "cell input width");
  if (layer_widths.empty()) throw std::invalid_argument("cell stack needs at least one layer");
  for (std::size_t w : layer_widths) require_positive(w, "cell layer width");
}

std::size_t RecurrentStack::params_per_layer() const {
  return spec_.kind == CellKind::gru ? 4 : 2;
}

RecurrentStack RecurrentStack::init(const CellSpec& spec, Rng& rng) {
  spec.validate();
  RecurrentStack stack;
  stack.spec_ = spec;
  std::size_t in = spec.input_width;
  for (std::size_t l = 0; l < spec.layer_widths.size(); ++l) {
    const std::size_t h = spec.layer_widths[l];
    const std::string prefix = std::string(to_string(spec.kind)) + std::to_string(l);
    switch (spec.kind) {
      case CellKind::rnn:
        stack.params_.add(prefix + ".weight", glorot_uniform(in + h, h, rng));
        stack.params_.add(prefix + ".bias", Matrix(1, h));
        break;
      case CellKind::lstm:
        stack.params_.add(prefix + ".weight", glorot_uniform(in + h, 4 * h, rng));
        stack.params_.add(prefix + ".bias", Matrix(1, 4 * h));
        break;
      case CellKind::gru:
        stack.params_.add(prefix + ".gate_weight", glorot_uniform(in + h, 2 * h, rng));
        stack.params_.add(prefix + ".gate_bias", Matrix(1, 2 * h));
        stack.params_.add(prefix + ".candidate_weight", glorot_uniform(in + h, h, rng));
        stack.params_.add(prefix + ".candidate_bias", Matrix(1, h));
        break;
      case CellKind::dmu:
        break;
    }
    in = h;
  }
  return stack;
}

RecurrentStack::State RecurrentStack::initial_state(ad::Tape& tape, std::size_t batch) const {
  State state;
  for (std::size_t w : spec_.layer_widths) {
    LayerState s;
    s.h = zeros(tape, batch, w);
    if (spec_.kind == CellKind::lstm) s.c = zeros(tape, batch, w);
    state.push_back(s);
  }
  return state;
}

RecurrentStack::State RecurrentStack::step(std::span<const Var> bound, const State& state,
                                           Var x) const {
  const std::size_t per = params_per_layer();
  if (bound.size() != params_.size() || state.size() != spec_.layer_widths.size()) {
    throw ad::DimensionError("recurrent stack: bound parameters or state do not fit the model");
  }
  State next;
  next.reserve(state.size());
  Var in = x;
  for (std::size_t l = 0; l < state.size(); ++l) {
    const Var* p = bound.data() + l * per;
    LayerState s;
    switch (spec_.kind) {
      case CellKind::rnn: s.h = rnn_step(RnnWeights{p[0], p[1]}, state[l].h, in); break;
      case CellKind::lstm: {
        LstmState ls = lstm_step(LstmWeights{p[0], p[1]}, LstmState{state[l].h, state[l].c}, in);
        s.h = ls.h;
        s.c = ls.c;
        break;
      }
      case CellKind::gru:
        s.h = gru_step(GruWeights{p[0], p[1], p[2], p[3]}, state[l].h, in);
        break;
      case CellKind::dmu: break;
    }
    next.push_back(s);
    in = s.h;
  }
  return next;
}

std::vector<Var> RecurrentStack::unroll(ad::Tape& tape, std::span<const Var> bound,
                                        std::span<const Var> xs) const {
  if (xs.empty()) throw std::invalid_argument("recurrent unroll: empty input sequence");
  State state = initial_state(tape, xs.front().rows());
  std::vector<Var> outputs;
  outputs.reserve(xs.size());
  for (Var x : xs) {
    state = step(bound, state, x);
    outputs.push_back(state.back().h);
  }
  return outputs;
}

// Sequence model ----------------------------------------------------------

void ModelSpec::validate() const {
  require_positive(input_width, "model input width");
  require_positive(output_width, "model output width");
  if (kind == CellKind::dmu) {
    if (arch.size() < 2) {
      throw std::invalid_argument(
          "DMU architecture needs FNN hidden widths and a memory width, e.g. 5,5");
    }
    dmu_spec().validate();
  } else {
    cell_spec().validate();
  }
}

DmuSpec ModelSpec::dmu_spec() const {
  DmuSpec s;
  s.input_width = input_width;
  if (!arch.empty()) {
    s.fnn_hidden.assign(arch.begin(), arch.end() - 1);
    s.memory_width = arch.back();
  }
  s.z_bias_offset = z_bias_offset;
  return s;
}

CellSpec ModelSpec::cell_spec() const { return CellSpec{kind, arch, input_width}; }

std::size_t ModelSpec::block_output_width() const { return arch.empty() ? 0 : arch.back(); }

SequenceModel SequenceModel::init(const ModelSpec& spec, Rng& rng) {
  spec.validate();
  SequenceModel model;
  model.spec_ = spec;
  if (spec.kind == CellKind::dmu) {
    model.block_ = DmuModel::init(spec.dmu_spec(), rng);
  } else {
    model.block_ = RecurrentStack::init(spec.cell_spec(), rng);
  }
  const std::size_t width = spec.block_output_width();
  model.readout_.add("readout.weight", glorot_uniform(width, spec.output_width, rng));
  model.readout_.add("readout.bias", Matrix(1, spec.output_width));
  return model;
}

ParameterRefs SequenceModel::parameters() {
  ParameterRefs refs;
  ParameterList& block =
      std::visit([](auto& b) -> ParameterList& { return b.parameters(); }, block_);
  for (auto& p : block) refs.push_back(&p);
  for (auto& p : readout_) refs.push_back(&p);
  return refs;
}

std::vector<const Parameter*> SequenceModel::parameters() const {
  std::vector<const Parameter*> refs;
  const ParameterList& block =
      std::visit([](const auto& b) -> const ParameterList& { return b.parameters(); }, block_);
  for (const auto& p : block) refs.push_back(&p);
  for (const auto& p : readout_) refs.push_back(&p);
  return refs;
}

std::size_t SequenceModel::weight_count() const {
  std::size_t n = 0;
  for (const Parameter* p : parameters()) n += p->value.size();
  return n;
}

SequenceModel::Forward SequenceModel::forward(ad::Tape& tape, std::span<const Matrix> xs,
                                              double scale) const {
  if (xs.empty()) throw std::invalid_argument("forward: empty input sequence");
  Forward out;
  std::vector<Var> inputs;
  inputs.reserve(xs.size());
  for (const Matrix& x : xs) {
    if (x.cols() != spec_.input_width || x.rows() != xs.front().rows()) {
      throw ad::DimensionError("forward: input step " + x.shape_string() +
                               " does not match input width " +
                               std::to_string(spec_.input_width));
    }
    inputs.push_back(tape.leaf(x));
  }

  Var top;
  if (const auto* dmu_block = std::get_if<DmuModel>(&block_)) {
    out.bound = dmu_block->parameters().bind(tape);
    DmuUnroll u = dmu_block->unroll(tape, out.bound, inputs, scale);
    out.scaled = std::move(u.scaled);
    // The last state is never fed back, so give it its own S*h node: the
    // readout sees (S*h_T)/S, whose adjoint is dL/d(S*h_T).
    Var virtual_scaled = ad::scale(u.states.back(), scale);
    out.scaled.push_back(virtual_scaled);
    top = scale == 1.0 ? virtual_scaled : ad::scale(virtual_scaled, 1.0 / scale);
  } else {
    const auto& stack = std::get<RecurrentStack>(block_);
    out.bound = stack.parameters().bind(tape);
    top = stack.unroll(tape, out.bound, inputs).back();
  }
  std::vector<Var> readout = readout_.bind(tape);
  out.bound.insert(out.bound.end(), readout.begin(), readout.end());
  out.output = dense(top, readout[0], readout[1]);
  return out;
}

std::size_t count_weights(const ModelSpec& spec) {
  spec.validate();
  const std::size_t n = spec.input_width;
  std::size_t total = 0;
  if (spec.kind == CellKind::dmu) {
    const DmuSpec dmu = spec.dmu_spec();
    std::size_t fan_in = n + dmu.memory_width;
    for (std::size_t w : dmu.fnn_hidden) {
      total += fan_in * w + w;
      fan_in = w;
    }
    total += fan_in * 2 * dmu.memory_width + 2 * dmu.memory_width;
  } else {
    const std::size_t gates =
        spec.kind == CellKind::lstm ? 4 : (spec.kind == CellKind::gru ? 3 : 1);
    std::size_t in = n;
    for (std::size_t h : spec.arch) {
      total += gates * ((in + h) * h + h);
      in = h;
    }
  }
  total += spec.block_output_width() * spec.output_width + spec.output_width;
  return total;
}

}  // namespace dmu
