// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <vector>

#include "dmu/cells.hpp"
#include "support/cell_oracles.hpp"
#include "support/gradcheck.hpp"

namespace {

using namespace dmu;
using ad::Matrix;
using ad::Tape;
using ad::Var;
using testkit::random_matrix;
using testkit::scalar_dmu_step;
using testkit::make_dmu;
using testkit::one_step;
using testkit::max_abs_diff;
using testkit::model_gradcheck;

// Initialization -------------------------------------------------------------

TEST(DmuInit, ZBiasOffsetLandsOnFirstHalfOfOutputBiases) {
  const DmuModel model = make_dmu(3, {5}, 4, 3.0, 1);
  const Matrix& out_bias = model.parameters()[3].value;
  ASSERT_EQ(out_bias.cols(), 8u);
  double z_mean = 0.0, c_mean = 0.0;
  for (std::size_t i = 0; i < 4; ++i) z_mean += out_bias[i] / 4.0;
  for (std::size_t i = 4; i < 8; ++i) c_mean += out_bias[i] / 4.0;
  EXPECT_DOUBLE_EQ(z_mean, 3.0);
  EXPECT_DOUBLE_EQ(c_mean, 0.0);
}

TEST(DmuInit, ZeroOffsetGivesZeroBiases) {
  const DmuModel model = make_dmu(3, {5}, 4, 0.0, 1);
  for (const Parameter& p : model.parameters()) {
    if (p.name.ends_with(".bias")) EXPECT_EQ(p.value, Matrix(1, p.value.cols()));
  }
}

TEST(DmuInit, SameSeedSameParameters) {
  const DmuModel a = make_dmu(2, {5, 3}, 5, 3.0, 42), b = make_dmu(2, {5, 3}, 5, 3.0, 42);
  ASSERT_EQ(a.parameters().size(), b.parameters().size());
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    EXPECT_EQ(a.parameters()[i].value, b.parameters()[i].value);
  }
}

TEST(DmuInit, GlorotLimitRespected) {
  Rng rng(3);
  const Matrix w = glorot_uniform(7, 10, rng);
  const double limit = std::sqrt(6.0 / 17.0);
  for (double v : w.data()) EXPECT_LE(std::abs(v), limit);
}

TEST(DmuInit, OutputLayerIsTwiceMemoryWidth) {
  const DmuModel model = make_dmu(4, {6, 2}, 3, 3.0, 2);
  EXPECT_EQ(model.parameters().size(), 6u);
  EXPECT_EQ(model.parameters()[0].value.rows(), 4u + 3u);
  EXPECT_EQ(model.parameters()[4].value.cols(), 6u);
}

TEST(DmuInit, InvalidSpecsThrow) {
  DmuSpec spec;
  spec.input_width = 2;
  spec.memory_width = 3;
  EXPECT_THROW(spec.validate(), std::invalid_argument);
  spec.fnn_hidden = {0};
  EXPECT_THROW(spec.validate(), std::invalid_argument);
  ModelSpec ms{CellKind::dmu, {5}, 2, 1};
  EXPECT_THROW(ms.validate(), std::invalid_argument);
}

// Step ---------------------------------------------------------------------

TEST(DmuStep, VectorizedMatchesScalarLoop) {
  Rng rng(4);
  const DmuModel model = make_dmu(2, {5}, 5, 3.0, 5);
  const Matrix h_prev = random_matrix(4, 5, rng), x = random_matrix(4, 2, rng);
  EXPECT_LT(max_abs_diff(one_step(model, h_prev, x, 0.7), scalar_dmu_step(model, h_prev, x, 0.7)),
            1e-12);
}

TEST(DmuStep, RandomConfigurationsMatchScalarLoop) {
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t batch = 1 + rng.uniform_int(0, 7), d = 1 + rng.uniform_int(0, 7);
    const std::size_t n = 1 + rng.uniform_int(0, 5);
    std::vector<std::size_t> hidden(1 + rng.uniform_int(0, 2));
    for (auto& w : hidden) w = 1 + rng.uniform_int(0, 6);
    const DmuModel model = make_dmu(n, hidden, d, rng.uniform(-2, 5), rng.next_u64());
    const Matrix h_prev = random_matrix(batch, d, rng), x = random_matrix(batch, n, rng);
    const double scale = rng.uniform(0.05, 1.0);
    EXPECT_LT(max_abs_diff(one_step(model, h_prev, x, scale),
                           scalar_dmu_step(model, h_prev, x, scale)),
              1e-12)
        << "trial " << trial;
  }
}

TEST(DmuStep, HugeZBiasPreservesState) {
  Rng rng(7);
  const DmuModel model = make_dmu(2, {5}, 5, 1e3, 8);
  const Matrix h_prev = random_matrix(3, 5, rng), x = random_matrix(3, 2, rng);
  EXPECT_LT(max_abs_diff(one_step(model, h_prev, x, 1.0), h_prev), 1e-12);
}

TEST(DmuStep, ZeroGateAveragesStateAndProposal) {
  Rng rng(9);
  DmuModel model = make_dmu(2, {4}, 3, 0.0, 10);
  // Zero the z columns of the output layer so z = 0 exactly.
  Matrix& w = model.parameters()[2].value;
  for (std::size_t r = 0; r < w.rows(); ++r) {
    for (std::size_t c = 0; c < 3; ++c) w(r, c) = 0.0;
  }
  const Matrix h_prev = random_matrix(2, 3, rng), x = random_matrix(2, 2, rng);
  Tape tape;
  auto bound = model.parameters().bind(tape);
  DmuStep s = model.step(bound, tape.leaf(h_prev), tape.leaf(x), 1.0);
  const Matrix z = s.z.value(), cand = s.candidate.value(), h = s.h.value();
  for (std::size_t i = 0; i < h.size(); ++i) {
    EXPECT_EQ(z[i], 0.0);
    EXPECT_NEAR(h[i], 0.5 * h_prev[i] + 0.5 * std::tanh(cand[i]), 1e-15);
  }
}

TEST(DmuStep, LargerOffsetPreservesMore) {
  Rng rng(11);
  const Matrix h_prev = random_matrix(4, 5, rng), x = random_matrix(4, 2, rng);
  double previous = INFINITY;
  for (double offset : {3.0, 10.0, 20.0}) {
    const DmuModel model = make_dmu(2, {5}, 5, offset, 12);
    const double drift = max_abs_diff(one_step(model, h_prev, x, 1.0), h_prev);
    EXPECT_LT(drift, previous) << "offset " << offset;
    previous = drift;
  }
  EXPECT_LT(previous, 1e-6);
}

TEST(DmuStep, StateStaysInConvexHullOfPreviousAndProposal) {
  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const DmuModel model = make_dmu(3, {4}, 4, rng.uniform(-3, 3), rng.next_u64());
    const Matrix h_prev = random_matrix(2, 4, rng), x = random_matrix(2, 3, rng, -3, 3);
    Tape tape;
    auto bound = model.parameters().bind(tape);
    DmuStep s = model.step(bound, tape.leaf(h_prev), tape.leaf(x), rng.uniform(0.1, 1.0));
    const Matrix cand = s.candidate.value(), h = s.h.value();
    for (std::size_t i = 0; i < h.size(); ++i) {
      const double p = std::tanh(cand[i]);
      EXPECT_GE(h[i], std::min(h_prev[i], p) - 1e-15);
      EXPECT_LE(h[i], std::max(h_prev[i], p) + 1e-15);
    }
  }
}

TEST(DmuStep, ShapeErrors) {
  const DmuModel model = make_dmu(2, {5}, 3, 3.0, 1);
  Tape tape;
  auto bound = model.parameters().bind(tape);
  EXPECT_THROW(model.step(bound, tape.leaf(Matrix(1, 3)), tape.leaf(Matrix(1, 4)), 1.0),
               ad::DimensionError);
  EXPECT_THROW(model.step(bound, tape.leaf(Matrix(2, 3)), tape.leaf(Matrix(1, 2)), 1.0),
               ad::DimensionError);
}

// Unroll -------------------------------------------------------------------

TEST(DmuUnroll, LengthOneGivesOneState) {
  const DmuModel model = make_dmu(2, {5}, 5, 3.0, 1);
  Tape tape;
  auto bound = model.parameters().bind(tape);
  std::vector<Var> xs{tape.leaf(Matrix(3, 2, 0.5))};
  const DmuUnroll u = model.unroll(tape, bound, xs, 1.0);
  EXPECT_EQ(u.states.size(), 1u);
  EXPECT_EQ(u.scaled.size(), 1u);
  EXPECT_EQ(u.states[0].rows(), 3u);
}

TEST(DmuUnroll, EqualsRepeatedSteps) {
  Rng rng(14);
  const DmuModel model = make_dmu(2, {4, 3}, 3, 3.0, 15);
  std::vector<Matrix> xs;
  for (int t = 0; t < 6; ++t) xs.push_back(random_matrix(2, 2, rng));
  Tape tape;
  auto bound = model.parameters().bind(tape);
  std::vector<Var> leaves;
  for (const Matrix& x : xs) leaves.push_back(tape.leaf(x));
  const DmuUnroll u = model.unroll(tape, bound, leaves, 0.6);
  Matrix h(2, 3);
  for (std::size_t t = 0; t < xs.size(); ++t) {
    h = scalar_dmu_step(model, h, xs[t], 0.6);
    EXPECT_LT(max_abs_diff(u.states[t].value(), h), 1e-12);
  }
}

TEST(DmuUnroll, EmptySequenceThrows) {
  const DmuModel model = make_dmu(2, {5}, 5, 3.0, 1);
  Tape tape;
  auto bound = model.parameters().bind(tape);
  EXPECT_THROW(model.unroll(tape, bound, {}, 1.0), std::invalid_argument);
}

// Baseline gates -------------------------------------------------------------

TEST(Lstm, SaturatedForgetAndClosedInputKeepCellState) {
  Rng rng(16);
  const std::size_t n = 3, h = 2;
  Matrix w = random_matrix(n + h, 4 * h, rng);
  Matrix b(1, 4 * h);
  for (std::size_t i = 0; i < h; ++i) b[i] = -1e3;     // input gate
  for (std::size_t i = h; i < 2 * h; ++i) b[i] = 1e3;  // forget gate
  Tape tape;
  const Matrix c0 = random_matrix(2, h, rng);
  LstmState s{tape.leaf(random_matrix(2, h, rng)), tape.leaf(c0)};
  LstmState next = lstm_step(LstmWeights{tape.leaf(w), tape.leaf(b)}, s, tape.leaf(random_matrix(2, n, rng)));
  EXPECT_LT(max_abs_diff(next.c.value(), c0), 1e-12);
}

TEST(Gru, SaturatedUpdateGateKeepsState) {
  Rng rng(17);
  const std::size_t n = 3, h = 4;
  Matrix gb(1, 2 * h);
  for (std::size_t i = 0; i < h; ++i) gb[i] = 1e3;
  Tape tape;
  const Matrix h0 = random_matrix(2, h, rng);
  GruWeights w{tape.leaf(random_matrix(n + h, 2 * h, rng)), tape.leaf(gb),
               tape.leaf(random_matrix(n + h, h, rng)), tape.leaf(random_matrix(1, h, rng))};
  Var next = gru_step(w, tape.leaf(h0), tape.leaf(random_matrix(2, n, rng)));
  EXPECT_LT(max_abs_diff(next.value(), h0), 1e-12);
}

TEST(Gru, MatchesHandFormula) {
  Rng rng(18);
  const std::size_t n = 2, h = 3;
  const Matrix x = random_matrix(1, n, rng), h0 = random_matrix(1, h, rng);
  const Matrix gw = random_matrix(n + h, 2 * h, rng), gb = random_matrix(1, 2 * h, rng);
  const Matrix cw = random_matrix(n + h, h, rng), cb = random_matrix(1, h, rng);
  Tape tape;
  const Matrix got = gru_step(GruWeights{tape.leaf(gw), tape.leaf(gb), tape.leaf(cw), tape.leaf(cb)},
                              tape.leaf(h0), tape.leaf(x))
                         .value();
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  std::vector<double> u{x[0], x[1], h0[0], h0[1], h0[2]};
  std::vector<double> z(h), r(h);
  for (std::size_t j = 0; j < h; ++j) {
    double az = gb[j], ar = gb[h + j];
    for (std::size_t i = 0; i < n + h; ++i) {
      az += u[i] * gw(i, j);
      ar += u[i] * gw(i, h + j);
    }
    z[j] = sig(az);
    r[j] = sig(ar);
  }
  std::vector<double> v{x[0], x[1], r[0] * h0[0], r[1] * h0[1], r[2] * h0[2]};
  for (std::size_t j = 0; j < h; ++j) {
    double an = cb[j];
    for (std::size_t i = 0; i < n + h; ++i) an += v[i] * cw(i, j);
    EXPECT_NEAR(got[j], (1.0 - z[j]) * std::tanh(an) + z[j] * h0[j], 1e-14);
  }
}

TEST(Rnn, MatchesHandFormula) {
  Rng rng(19);
  const Matrix x = random_matrix(1, 2, rng), h0 = random_matrix(1, 2, rng);
  const Matrix w = random_matrix(4, 2, rng), b = random_matrix(1, 2, rng);
  Tape tape;
  const Matrix got = rnn_step(RnnWeights{tape.leaf(w), tape.leaf(b)}, tape.leaf(h0), tape.leaf(x)).value();
  const double u[4] = {x[0], x[1], h0[0], h0[1]};
  for (std::size_t j = 0; j < 2; ++j) {
    double a = b[j];
    for (std::size_t i = 0; i < 4; ++i) a += u[i] * w(i, j);
    EXPECT_NEAR(got[j], std::tanh(a), 1e-15);
  }
}

// Weight counts --------------------------------------------------------------

TEST(WeightCount, ReferenceDmuArchitectures) {
  EXPECT_EQ(count_weights(ModelSpec{CellKind::dmu, {5, 5}, 2, 1}), 106u);
  EXPECT_EQ(count_weights(ModelSpec{CellKind::dmu, {5, 6}, 8, 8}), 203u);
  EXPECT_EQ(count_weights(ModelSpec{CellKind::dmu, {5, 4}, 50, 50}), 573u);
}

TEST(WeightCount, HandFormulas) {
  // (2+5)*5+5 + 5*10+10 + 5*1+1
  EXPECT_EQ(count_weights(ModelSpec{CellKind::dmu, {5, 5}, 2, 1}),
            std::size_t{(2 + 5) * 5 + 5 + 5 * 10 + 10 + 5 * 1 + 1});
  // rnn (5,5): (2+5)*5+5 + (5+5)*5+5 + 5+1
  EXPECT_EQ(count_weights(ModelSpec{CellKind::rnn, {5, 5}, 2, 1}), 101u);
  // lstm (2,2): 4*((2+2)*2+2) * 2 + 2+1
  EXPECT_EQ(count_weights(ModelSpec{CellKind::lstm, {2, 2}, 2, 1}), 83u);
  // gru (3,2): 3*((2+3)*3+3) + 3*((3+2)*2+2) + 2+1
  EXPECT_EQ(count_weights(ModelSpec{CellKind::gru, {3, 2}, 2, 1}), 93u);
}

TEST(WeightCount, MatchesInstantiatedModels) {
  Rng rng(20);
  for (int trial = 0; trial < 40; ++trial) {
    const CellKind kind = static_cast<CellKind>(rng.uniform_int(0, 3));
    std::vector<std::size_t> arch(2 + rng.uniform_int(0, 1));
    for (auto& w : arch) w = 1 + rng.uniform_int(0, 6);
    const ModelSpec spec{kind, arch, 1 + rng.uniform_int(0, 9), 1 + rng.uniform_int(0, 9)};
    EXPECT_EQ(SequenceModel::init(spec, rng).weight_count(), count_weights(spec));
  }
}

// Gradients ------------------------------------------------------------------

TEST(Gradients, DmuUnrollMatchesFiniteDifferences) {
  EXPECT_LT(model_gradcheck(CellKind::dmu, {5, 4}, 21), 1e-4);
  EXPECT_LT(model_gradcheck(CellKind::dmu, {4, 3, 3}, 22), 1e-4);
}

TEST(Gradients, RnnUnrollMatchesFiniteDifferences) {
  EXPECT_LT(model_gradcheck(CellKind::rnn, {4, 3}, 23), 1e-4);
}

TEST(Gradients, LstmUnrollMatchesFiniteDifferences) {
  EXPECT_LT(model_gradcheck(CellKind::lstm, {3, 2}, 24, 10), 1e-4);
}

TEST(Gradients, GruUnrollMatchesFiniteDifferences) {
  EXPECT_LT(model_gradcheck(CellKind::gru, {3, 2}, 25, 10), 1e-4);
}

// Sequence model -------------------------------------------------------------

TEST(SequenceModel, RowsOfABatchAreIndependent) {
  Rng rng(26);
  for (CellKind kind : {CellKind::dmu, CellKind::rnn, CellKind::lstm, CellKind::gru}) {
    const SequenceModel model = SequenceModel::init(ModelSpec{kind, {4, 3}, 2, 2}, rng);
    std::vector<Matrix> xs;
    for (int t = 0; t < 5; ++t) xs.push_back(random_matrix(3, 2, rng));
    Tape full;
    const Matrix batched = model.forward(full, xs, 0.9).output.value();
    for (std::size_t r = 0; r < 3; ++r) {
      std::vector<Matrix> row;
      for (const Matrix& x : xs) row.push_back(Matrix(1, 2, {x(r, 0), x(r, 1)}));
      Tape single;
      const Matrix out = model.forward(single, row, 0.9).output.value();
      for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(out[c], batched(r, c));
    }
  }
}

TEST(SequenceModel, ScaledHandlesIncludeVirtualLastNode) {
  Rng rng(27);
  const SequenceModel model = SequenceModel::init(ModelSpec{CellKind::dmu, {4, 3}, 2, 1}, rng);
  std::vector<Matrix> xs(7, Matrix(2, 2, 0.3));
  Tape tape;
  auto fwd = model.forward(tape, xs, 0.5);
  EXPECT_EQ(fwd.scaled.size(), 8u);
  EXPECT_EQ(fwd.bound.size(), model.parameters().size());
}

TEST(SequenceModel, DeterministicForward) {
  auto run = [] {
    Rng rng(28);
    const SequenceModel model = SequenceModel::init(ModelSpec{CellKind::gru, {3, 2}, 2, 1}, rng);
    Tape tape;
    std::vector<Matrix> xs(4, Matrix(1, 2, 0.25));
    return Matrix(model.forward(tape, xs, 1.0).output.value());
  };
  EXPECT_EQ(run(), run());
}

TEST(SequenceModel, InputWidthMismatchThrows) {
  Rng rng(29);
  const SequenceModel model = SequenceModel::init(ModelSpec{CellKind::rnn, {3}, 2, 1}, rng);
  Tape tape;
  std::vector<Matrix> xs{Matrix(1, 3)};
  EXPECT_THROW(model.forward(tape, xs, 1.0), ad::DimensionError);
  EXPECT_THROW(model.forward(tape, std::vector<Matrix>{}, 1.0), std::invalid_argument);
}

TEST(Parameters, SaveLoadRoundTrip) {
  Rng rng(30);
  SequenceModel a = SequenceModel::init(ModelSpec{CellKind::dmu, {5, 5}, 2, 1}, rng);
  SequenceModel b = SequenceModel::init(ModelSpec{CellKind::dmu, {5, 5}, 2, 1}, rng);
  const auto path = std::filesystem::temp_directory_path() / "dmu_params_roundtrip.json";
  save_parameters(path, std::as_const(a).parameters());
  load_parameters(path, b.parameters());
  const auto pa = std::as_const(a).parameters(), pb = std::as_const(b).parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value, pb[i]->value);

  SequenceModel c = SequenceModel::init(ModelSpec{CellKind::dmu, {5, 6}, 2, 1}, rng);
  EXPECT_THROW(load_parameters(path, c.parameters()), ad::DimensionError);
  std::filesystem::remove(path);
}

TEST(Parameters, DuplicateNamesRejected) {
  ParameterList list;
  list.add("w", Matrix(1, 1));
  EXPECT_THROW(list.add("w", Matrix(1, 1)), std::invalid_argument);
}

TEST(CellKindNames, RoundTrip) {
  for (CellKind k : {CellKind::dmu, CellKind::rnn, CellKind::lstm, CellKind::gru}) {
    EXPECT_EQ(parse_cell_kind(to_string(k)), k);
  }
  EXPECT_FALSE(parse_cell_kind("transformer"));
}

}  // namespace
