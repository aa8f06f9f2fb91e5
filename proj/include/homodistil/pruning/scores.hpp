#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "homodistil/errors.hpp"

// Scalar-generic importance arithmetic over Eigen expressions. Nothing here
// knows about models; pruning.hpp wires these into the training state.

namespace homodistil::pruning {

namespace detail {
template <typename A, typename B>
void require_same_shape(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": parameter/gradient shapes differ");
  }
}
}  // namespace detail

/// First-order estimate of the loss change from zeroing each parameter:
/// |theta_j * dL/dtheta_j|.
template <typename P, typename G>
auto sensitivity(const Eigen::MatrixBase<P>& params, const Eigen::MatrixBase<G>& grads) {
  detail::require_same_shape(params, grads, "sensitivity");
  return params.cwiseProduct(grads).cwiseAbs().eval();
}

/// |theta_j|
template <typename P>
auto magnitude(const Eigen::MatrixBase<P>& params) {
  return params.cwiseAbs().eval();
}

/// theta_j * dL/dtheta_j, sign kept.
template <typename P, typename G>
auto movement(const Eigen::MatrixBase<P>& params, const Eigen::MatrixBase<G>& grads) {
  detail::require_same_shape(params, grads, "movement");
  return params.cwiseProduct(grads).eval();
}

/// PLATON-style score: smoothed sensitivity times its smoothed uncertainty.
template <typename I, typename U>
auto platon_scores(const Eigen::MatrixBase<I>& smoothed, const Eigen::MatrixBase<U>& uncertainty) {
  detail::require_same_shape(smoothed, uncertainty, "platon_scores");
  return smoothed.cwiseProduct(uncertainty).eval();
}

/// buffer <- beta * buffer + (1 - beta) * fresh, with beta in [0, 1).
template <typename B, typename F>
void ema_update(Eigen::MatrixBase<B>& buffer, const Eigen::MatrixBase<F>& fresh, double beta) {
  if (!(beta >= 0.0 && beta < 1.0)) throw ContractError("ema_update: decay must lie in [0, 1)");
  detail::require_same_shape(buffer, fresh, "ema_update");
  using Scalar = typename B::Scalar;
  buffer = Scalar(beta) * buffer + Scalar(1.0 - beta) * fresh;
}

/// L1 norm of every column: one importance value per output neuron.
template <typename S>
auto column_importance(const Eigen::MatrixBase<S>& scores) {
  return scores.cwiseAbs().colwise().sum().eval();
}

/// Signed column sums, used by the movement scorer whose scores carry sign.
template <typename S>
auto signed_column_importance(const Eigen::MatrixBase<S>& scores) {
  return scores.colwise().sum().eval();
}

/// Number of columns to keep for fraction r of `width`: ceil(r * width),
/// never below 1. A relative slack of 1e-12 absorbs rounding in r so that
/// e.g. r = 0.5 on width 16 keeps exactly 8.
inline Eigen::Index kept_count(double r, Eigen::Index width) {
  if (width <= 0) throw ContractError("kept_count: empty group");
  const double raw = r * static_cast<double>(width);
  auto keep = static_cast<Eigen::Index>(std::ceil(raw - 1e-12 * static_cast<double>(width)));
  return std::clamp<Eigen::Index>(keep, 1, width);
}

/// 0/1 row with ones at the `keep` largest entries of `importance`. Ties go
/// to the lower column index. When `eligible` is given, only columns with a
/// nonzero entry there may be selected (if there are at least `keep` of
/// them).
template <typename V>
Eigen::Matrix<double, 1, Eigen::Dynamic> top_columns(const Eigen::MatrixBase<V>& importance, Eigen::Index keep,
                                                     const Eigen::Matrix<double, 1, Eigen::Dynamic>* eligible = nullptr) {
  const Eigen::Index n = importance.size();
  if (n == 0) throw ContractError("top_columns: empty group");
  if (keep < 0 || keep > n) throw ContractError("top_columns: keep count out of range");
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  const bool restrict = eligible != nullptr && (eligible->array() != 0.0).count() >= keep;
  auto rank = [&](Eigen::Index i) { return restrict && (*eligible)(i) == 0.0 ? 0 : 1; };
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    if (rank(a) != rank(b)) return rank(a) > rank(b);
    return importance(a) > importance(b);
  });
  Eigen::Matrix<double, 1, Eigen::Dynamic> mask = Eigen::Matrix<double, 1, Eigen::Dynamic>::Zero(n);
  for (Eigen::Index i = 0; i < keep; ++i) mask(order[static_cast<std::size_t>(i)]) = 1.0;
  return mask;
}

}  // namespace homodistil::pruning
