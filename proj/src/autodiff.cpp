// SPDX-License-Identifier: Apache-2.0
#include "dmu/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace dmu::ad {

Var Tape::leaf(Matrix value) { return record(std::move(value), nullptr); }

Var Tape::record(Matrix value, Backward backward) {
  if (backward_done_) {
    throw TapeError("cannot record on a tape that has already been differentiated");
  }
  nodes_.push_back(Node{std::move(value), Matrix{}, std::move(backward)});
  return Var(this, nodes_.size() - 1);
}

void Tape::check_owned(Var v) const {
  if (v.tape_ != this || v.id_ >= nodes_.size()) {
    throw TapeError("variable does not belong to this tape");
  }
}

void Tape::backward(Var loss) {
  check_owned(loss);
  if (backward_done_) {
    throw TapeError("backward() called twice without reset()");
  }
  const Matrix& root = nodes_[loss.id_].value;
  if (root.rows() != 1 || root.cols() != 1) {
    throw TapeError("backward() root must be a scalar, got " + root.shape_string());
  }
  for (auto& node : nodes_) node.adjoint = Matrix(node.value.rows(), node.value.cols());
  nodes_[loss.id_].adjoint[0] = 1.0;
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    if (nodes_[i].backward) nodes_[i].backward(*this, i);
  }
  backward_done_ = true;
}

void Tape::reset() {
  for (auto& node : nodes_) node.adjoint = Matrix{};
  backward_done_ = false;
}

Matrix Tape::read_adjoint(Var node) const {
  check_owned(node);
  if (!backward_done_) throw TapeError("read_adjoint() called before backward()");
  return nodes_[node.id_].adjoint;
}

namespace {

Tape& same_tape(Var a, Var b, const char* op) {
  if (!a.valid() || a.tape() != b.tape()) {
    throw TapeError(std::string(op) + ": operands live on different tapes");
  }
  return *a.tape();
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_string() +
                         " vs " + b.shape_string());
  }
}

}  // namespace

double stable_sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

Var matmul(Var a, Var b) {
  Tape& tape = same_tape(a, b, "matmul");
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions disagree " + av.shape_string() +
                         " * " + bv.shape_string());
  }
  Matrix out(av.rows(), bv.cols());
  // Plain i-k-j loop; keep the per-element summation order fixed.
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += av(i, p) * bv(p, j);
      out(i, j) = acc;
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), [ia, ib](Tape& t, std::size_t self) {
    const Matrix& g = t.adjoint(self);
    const Matrix& av = t.value(ia);
    const Matrix& bv = t.value(ib);
    Matrix& ga = t.adjoint_mut(ia);
    const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += g(i, j) * bv(p, j);
        ga(i, p) += acc;
      }
    }
    Matrix& gb = t.adjoint_mut(ib);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = av(i, p);
        for (std::size_t j = 0; j < n; ++j) gb(p, j) += aip * g(i, j);
      }
    }
  });
}

Var add(Var a, Var b) {
  Tape& tape = same_tape(a, b, "add");
  require_same_shape(a.value(), b.value(), "add");
  Matrix out = a.value();
  out += b.value();
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), [ia, ib](Tape& t, std::size_t self) {
    const Matrix& g = t.adjoint(self);
    t.adjoint_mut(ia) += g;
    t.adjoint_mut(ib) += g;
  });
}

Var sub(Var a, Var b) {
  Tape& tape = same_tape(a, b, "sub");
  require_same_shape(a.value(), b.value(), "sub");
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  Matrix out(av.rows(), av.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), [ia, ib](Tape& t, std::size_t self) {
    const Matrix& g = t.adjoint(self);
    Matrix& ga = t.adjoint_mut(ia);
    Matrix& gb = t.adjoint_mut(ib);
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i];
      gb[i] -= g[i];
    }
  });
}

Var hadamard(Var a, Var b) {
  Tape& tape = same_tape(a, b, "hadamard");
  require_same_shape(a.value(), b.value(), "hadamard");
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  Matrix out(av.rows(), av.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), [ia, ib](Tape& t, std::size_t self) {
    const Matrix& g = t.adjoint(self);
    const Matrix& av = t.value(ia);
    const Matrix& bv = t.value(ib);
    // ia == ib (x * x) accumulates both contributions, as it should.
    for (std::size_t i = 0; i < g.size(); ++i) {
      t.adjoint_mut(ia)[i] += g[i] * bv[i];
      t.adjoint_mut(ib)[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double factor) {
  const Matrix& av = a.value();
  Matrix out(av.rows(), av.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * av[i];
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(out), [ia, factor](Tape& t, std::size_t self) {
    const Matrix& g = t.adjoint(self);
    Matrix& ga = t.adjoint_mut(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
  });
}

Var add_bias(Var a, Var bias) {
  Tape& tape = same_tape(a, bias, "add_bias");
  const Matrix& av = a.value();
  const Matrix& bv = bias.value();
  if (bv.rows() != 1 || bv.cols() != av.cols()) {
    throw DimensionError("add_bias: bias " + bv.shape_string() + " does not fit " +
                         av.shape_string());
  }
  Matrix out = av;
  for (std::size_t r = 0; r < av.rows(); ++r) {
    for (std::size_t c = 0; c < av.cols(); ++c) out(r, c) += bv[c];
  }
  const std::size_t ia = a.id(), ib = bias.id();
  return tape.record(std::move(out), [ia, ib](Tape& t, std::size_t self) {
    const Matrix& g = t.adjoint(self);
    t.adjoint_mut(ia) += g;
    Matrix& gb = t.adjoint_mut(ib);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      for (std::size_t c = 0; c < g.cols(); ++c) gb[c] += g(r, c);
    }
  });
}

Var one_minus(Var a) {
  const Matrix& av = a.value();
  Matrix out(av.rows(), av.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 - av[i];
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(out), [ia](Tape& t, std::size_t self) {
    const Matrix& g = t.adjoint(self);
    Matrix& ga = t.adjoint_mut(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] -= g[i];
  });
}

Var sigmoid(Var a) {
  const Matrix& av = a.value();
  Matrix out(av.rows(), av.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(av[i]);
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(out), [ia](Tape& t, std::size_t self) {
    const Matrix& g = t.adjoint(self);
    const Matrix& y = t.value(self);
    Matrix& ga = t.adjoint_mut(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Var tanh(Var a) {
  const Matrix& av = a.value();
  Matrix out(av.rows(), av.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(av[i]);
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(out), [ia](Tape& t, std::size_t self) {
    const Matrix& g = t.adjoint(self);
    const Matrix& y = t.value(self);
    Matrix& ga = t.adjoint_mut(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

Var concat(Var a, Var b) {
  Tape& tape = same_tape(a, b, "concat");
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.rows() != bv.rows()) {
    throw DimensionError("concat: row counts differ " + av.shape_string() + " vs " +
                         bv.shape_string());
  }
  const std::size_t p = av.cols(), q = bv.cols();
  Matrix out(av.rows(), p + q);
  for (std::size_t r = 0; r < av.rows(); ++r) {
    for (std::size_t c = 0; c < p; ++c) out(r, c) = av(r, c);
    for (std::size_t c = 0; c < q; ++c) out(r, p + c) = bv(r, c);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), [ia, ib, p, q](Tape& t, std::size_t self) {
    const Matrix& g = t.adjoint(self);
    Matrix& ga = t.adjoint_mut(ia);
    Matrix& gb = t.adjoint_mut(ib);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      for (std::size_t c = 0; c < p; ++c) ga(r, c) += g(r, c);
      for (std::size_t c = 0; c < q; ++c) gb(r, c) += g(r, p + c);
    }
  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  const Matrix& av = a.value();
  if (begin + count > av.cols()) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") exceeds " + av.shape_string());
  }
  Matrix out(av.rows(), count);
  for (std::size_t r = 0; r < av.rows(); ++r) {
    for (std::size_t c = 0; c < count; ++c) out(r, c) = av(r, begin + c);
  }
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(out), [ia, begin, count](Tape& t, std::size_t self) {
    const Matrix& g = t.adjoint(self);
    Matrix& ga = t.adjoint_mut(ia);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      for (std::size_t c = 0; c < count; ++c) ga(r, begin + c) += g(r, c);
    }
  });
}

Var sum(Var a) {
  double acc = 0.0;
  for (double v : a.value().data()) acc += v;
  const std::size_t ia = a.id();
  return a.tape()->record(Matrix(1, 1, acc), [ia](Tape& t, std::size_t self) {
    const double g = t.adjoint(self)[0];
    for (double& v : t.adjoint_mut(ia).data()) v += g;
  });
}

Var mse_loss(Var pred, Var target) {
  Tape& tape = same_tape(pred, target, "mse_loss");
  require_same_shape(pred.value(), target.value(), "mse_loss");
  const Matrix& pv = pred.value();
  const Matrix& tv = target.value();
  const std::size_t n = pv.size();
  if (n == 0) throw DimensionError("mse_loss: empty operands");
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = pv[i] - tv[i];
    acc += d * d;
  }
  const std::size_t ip = pred.id(), it = target.id();
  return tape.record(Matrix(1, 1, acc / static_cast<double>(n)),
                     [ip, it, n](Tape& t, std::size_t self) {
                       const double g = t.adjoint(self)[0] * 2.0 / static_cast<double>(n);
                       const Matrix& pv = t.value(ip);
                       const Matrix& tv = t.value(it);
                       for (std::size_t i = 0; i < n; ++i) {
                         const double d = g * (pv[i] - tv[i]);
                         t.adjoint_mut(ip)[i] += d;
                         t.adjoint_mut(it)[i] -= d;
                       }
                     });
}

Var cross_entropy_loss(Var logits, std::span<const std::size_t> classes) {
  const Matrix& lv = logits.value();
  const std::size_t m = lv.rows(), k = lv.cols();
  if (classes.size() != m) {
    throw DimensionError("cross_entropy_loss: " + std::to_string(classes.size()) +
                         " labels for " + std::to_string(m) + " rows");
  }
  if (m == 0 || k == 0) throw DimensionError("cross_entropy_loss: empty logits");
  Matrix softmax(m, k);
  double total = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    if (classes[r] >= k) {
      throw std::out_of_range("cross_entropy_loss: class index " +
                              std::to_string(classes[r]) + " out of range for " +
                              std::to_string(k) + " classes");
    }
    double mx = lv(r, 0);
    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, lv(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += std::exp(lv(r, c) - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < k; ++c) softmax(r, c) = std::exp(lv(r, c) - lse);
    total += lse - lv(r, classes[r]);
  }
  std::vector<std::size_t> labels(classes.begin(), classes.end());
  const std::size_t il = logits.id();
  return logits.tape()->record(
      Matrix(1, 1, total / static_cast<double>(m)),
      [il, softmax = std::move(softmax), labels = std::move(labels)](Tape& t,
                                                                      std::size_t self) {
        const double g = t.adjoint(self)[0] / static_cast<double>(softmax.rows());
        Matrix& gl = t.adjoint_mut(il);
        for (std::size_t r = 0; r < softmax.rows(); ++r) {
          for (std::size_t c = 0; c < softmax.cols(); ++c) {
            const double onehot = c == labels[r] ? 1.0 : 0.0;
            gl(r, c) += g * (softmax(r, c) - onehot);
          }
        }
      });
}

}  // namespace dmu::ad
