#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "homodistil/errors.hpp"

namespace homodistil::ad {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic, Eigen::RowMajor>;

using Index = Eigen::Index;

template <typename Scalar>
class Tape;

/// One value in the computation graph. Leaves are parameters or constants;
/// interior nodes carry a pullback that pushes `grad` into `inputs`.
template <typename Scalar>
struct Node {
  Matrix<Scalar> value;
  Matrix<Scalar> grad;  // empty until something is accumulated
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> pullback;

  template <typename Derived>
  void accumulate(const Eigen::MatrixBase<Derived>& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

template <typename Scalar>
inline void check_finite(const Matrix<Scalar>& m, const char* op) {
  if (!m.allFinite()) {
    throw NumericError(std::string("non-finite value (NaN/Inf) produced by ") + op);
  }
}

template <typename Scalar>
inline void check_nonempty(Index rows, Index cols, const char* op) {
  if (rows <= 0 || cols <= 0) {
    throw DimensionError(std::string(op) + ": zero-size dimension " + std::to_string(rows) + "x" +
                         std::to_string(cols));
  }
}

/// Handle to a graph node. Copies share the node; use `detach_copy` for a
/// deep copy of the value.
template <typename Scalar>
class Var {
 public:
  using MatrixType = Matrix<Scalar>;

  Var() = default;

  explicit Var(MatrixType value, bool requires_grad = false) : node_(std::make_shared<Node<Scalar>>()) {
    check_nonempty<Scalar>(value.rows(), value.cols(), "leaf");
    check_finite<Scalar>(value, "leaf");
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  explicit Var(std::shared_ptr<Node<Scalar>> node) : node_(std::move(node)) {}

  static Var parameter(MatrixType value) { return Var(std::move(value), true); }
  static Var constant(MatrixType value) { return Var(std::move(value), false); }

  static Var scalar(Scalar v) {
    MatrixType m(1, 1);
    m(0, 0) = v;
    return Var(std::move(m));
  }

  explicit operator bool() const { return static_cast<bool>(node_); }

  const MatrixType& value() const { return node_->value; }
  /// In-place access for optimizers and mask application. Must not be
  /// called while a tape still references this node.
  MatrixType& mutable_value() { return node_->value; }

  bool has_grad() const { return node_->grad.size() != 0; }
  const MatrixType& grad() const { return node_->grad; }
  MatrixType& mutable_grad() {
    if (node_->grad.size() == 0) node_->grad = MatrixType::Zero(rows(), cols());
    return node_->grad;
  }
  void zero_grad() { node_->grad.resize(0, 0); }

  bool requires_grad() const { return node_->requires_grad; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }

  Scalar item() const {
    if (size() != 1) throw ContractError("item() on a non-scalar tensor");
    return node_->value(0, 0);
  }

  /// Fresh leaf holding a copy of the value, same requires_grad flag.
  Var detach_copy() const { return Var(node_->value, node_->requires_grad); }

  /// Non-differentiable view of the value (a new constant leaf).
  Var detached() const { return Var(node_->value, false); }

  const std::shared_ptr<Node<Scalar>>& node() const { return node_; }
  bool same_node(const Var& other) const { return node_ == other.node_; }

 private:
  friend class Tape<Scalar>;
  std::shared_ptr<Node<Scalar>> node_;
};

/// Ordered record of the interior nodes created while the tape is active.
/// Creation order is a topological order, so backward walks it in reverse.
template <typename Scalar>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::shared_ptr<Node<Scalar>> node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  /// Accumulates d(root)/d(leaf) into every reachable leaf with
  /// requires_grad. Interior gradients are reset first so repeated calls on
  /// the same tape add exactly one more copy of the gradient to leaves.
  void backward(const Var<Scalar>& root) {
    if (root.rows() != 1 || root.cols() != 1) {
      throw ContractError("backward: root must be a scalar, got " + std::to_string(root.rows()) + "x" +
                          std::to_string(root.cols()));
    }
    if (!root.requires_grad()) return;
    for (auto& n : nodes_) n->grad.resize(0, 0);
    root.node_->accumulate(Matrix<Scalar>::Ones(1, 1));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<Scalar>& n = **it;
      if (n.grad.size() == 0 || !n.pullback) continue;
      n.pullback(n);
    }
  }

  static Tape*& active() {
    thread_local Tape* current = nullptr;
    return current;
  }

 private:
  std::vector<std::shared_ptr<Node<Scalar>>> nodes_;
};

/// RAII guard that makes `tape` the recording target on this thread. Ops
/// evaluated with no active tape produce constants.
template <typename Scalar>
class Recording {
 public:
  explicit Recording(Tape<Scalar>& tape) : previous_(Tape<Scalar>::active()) { Tape<Scalar>::active() = &tape; }
  ~Recording() { Tape<Scalar>::active() = previous_; }
  Recording(const Recording&) = delete;
  Recording& operator=(const Recording&) = delete;

 private:
  Tape<Scalar>* previous_;
};

/// Turns recording off for the enclosed scope.
template <typename Scalar>
class NoGrad {
 public:
  NoGrad() : previous_(Tape<Scalar>::active()) { Tape<Scalar>::active() = nullptr; }
  ~NoGrad() { Tape<Scalar>::active() = previous_; }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  Tape<Scalar>* previous_;
};

namespace detail {

/// Builds an op result. The pullback is attached only when a tape is active
/// and some input requires a gradient.
template <typename Scalar>
Var<Scalar> make_result(const char* op, Matrix<Scalar> value, std::vector<std::shared_ptr<Node<Scalar>>> inputs,
                        std::function<void(Node<Scalar>&)> pullback) {
  check_finite<Scalar>(value, op);
  auto node = std::make_shared<Node<Scalar>>();
  node->value = std::move(value);
  node->is_leaf = false;
  Tape<Scalar>* tape = Tape<Scalar>::active();
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in->requires_grad;
  if (tape != nullptr && needs) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->pullback = std::move(pullback);
    tape->record(node);
  }
  return Var<Scalar>(std::move(node));
}

template <typename Scalar, typename Derived>
inline void push(Node<Scalar>& input, const Eigen::MatrixBase<Derived>& g) {
  if (input.requires_grad) input.accumulate(g);
}

}  // namespace detail

using Tensor = Var<double>;
using MatrixD = Matrix<double>;
using RowVectorD = RowVector<double>;

}  // namespace homodistil::ad
