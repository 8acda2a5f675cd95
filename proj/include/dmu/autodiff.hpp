// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode differentiation over (batch x features) matrices.
// A Tape is built for one episode, differentiated once and thrown away.

#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "dmu/matrix.hpp"

namespace dmu::ad {

/// Misuse of the tape protocol (double backward, early adjoint read, ...).
class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive. value() refers into the tape and is invalidated by
/// the next record on it; copy the Matrix to keep it.
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }

  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Propagates the node's adjoint into its inputs.
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf node. Parameters and inputs are both leaves; their adjoints are
  /// read back after backward().
  Var leaf(Matrix value);

  /// Interior node with a custom backward rule.
  Var record(Matrix value, Backward backward);

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  std::size_t size() const { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse.
  void backward(Var loss);
  bool has_gradients() const { return backward_done_; }

  /// Zeroes all adjoints and re-arms backward().
  void reset();

  /// Copy of the adjoint of `node`. Throws before backward().
  Matrix read_adjoint(Var node) const;

  // Used by backward rules.
  const Matrix& adjoint(std::size_t id) const { return nodes_[id].adjoint; }
  Matrix& adjoint_mut(std::size_t id) { return nodes_[id].adjoint; }

 private:
  struct Node {
    Matrix value;
    Matrix adjoint;
    Backward backward;
  };

  void check_owned(Var v) const;

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }

// Elementwise and linear algebra. All operands must live on the same tape.

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var scale(Var a, double factor);
/// a (m x n) plus row vector b (1 x n) added to every row.
Var add_bias(Var a, Var bias);
/// 1 - a, elementwise.
Var one_minus(Var a);
Var sigmoid(Var a);
Var tanh(Var a);
/// Joins along the feature axis: (m x p) ++ (m x q) -> (m x (p+q)).
Var concat(Var a, Var b);
/// Columns [begin, begin + count).
Var slice_cols(Var a, std::size_t begin, std::size_t count);
Var sum(Var a);

/// Mean over all elements of (pred - target)^2.
Var mse_loss(Var pred, Var target);
/// Mean over rows of -log softmax(logits)[row, classes[row]].
Var cross_entropy_loss(Var logits, std::span<const std::size_t> classes);

/// Numerically stable logistic function used by sigmoid().
double stable_sigmoid(double z);

}  // namespace dmu::ad
