#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "homodistil/numerics/tensor.hpp"

// Differentiable operations over Var. Every op validates shapes, rejects
// zero-size operands and non-finite results, and records a pullback when a
// tape is active. Broadcasting exists only for bias rows (add_row).

namespace homodistil::ad {

namespace detail {

inline std::string shape_str(Index r, Index c) { return std::to_string(r) + "x" + std::to_string(c); }

template <typename Scalar>
void require_same_shape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.rows(), a.cols()) + " vs " +
                         shape_str(b.rows(), b.cols()));
  }
}

template <typename Scalar>
Matrix<Scalar> softmax_rows(const Matrix<Scalar>& x) {
  Matrix<Scalar> y = (x.colwise() - x.rowwise().maxCoeff()).array().exp().matrix();
  y.array().colwise() /= y.rowwise().sum().array();
  return y;
}

template <typename Scalar>
Matrix<Scalar> log_softmax_rows(const Matrix<Scalar>& x) {
  Matrix<Scalar> shifted = x.colwise() - x.rowwise().maxCoeff();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> lse = shifted.array().exp().rowwise().sum().log().matrix();
  shifted.colwise() -= lse;
  return shifted;
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions disagree " + detail::shape_str(a.rows(), a.cols()) + " x " +
                         detail::shape_str(b.rows(), b.cols()));
  }
  Matrix<Scalar> out = a.value() * b.value();
  return detail::make_result<Scalar>("matmul", std::move(out), {a.node(), b.node()}, [](Node<Scalar>& self) {
    auto& lhs = *self.inputs[0];
    auto& rhs = *self.inputs[1];
    if (lhs.requires_grad) lhs.accumulate(self.grad * rhs.value.transpose());
    if (rhs.requires_grad) rhs.accumulate(lhs.value.transpose() * self.grad);
  });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "add");
  return detail::make_result<Scalar>("add", a.value() + b.value(), {a.node(), b.node()}, [](Node<Scalar>& self) {
    detail::push(*self.inputs[0], self.grad);
    detail::push(*self.inputs[1], self.grad);
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "sub");
  return detail::make_result<Scalar>("sub", a.value() - b.value(), {a.node(), b.node()}, [](Node<Scalar>& self) {
    detail::push(*self.inputs[0], self.grad);
    detail::push(*self.inputs[1], -self.grad);
  });
}

/// Elementwise product.
template <typename Scalar>
Var<Scalar> hadamard(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "hadamard");
  Matrix<Scalar> out = a.value().cwiseProduct(b.value());
  return detail::make_result<Scalar>("hadamard", std::move(out), {a.node(), b.node()}, [](Node<Scalar>& self) {
    auto& lhs = *self.inputs[0];
    auto& rhs = *self.inputs[1];
    if (lhs.requires_grad) lhs.accumulate(self.grad.cwiseProduct(rhs.value));
    if (rhs.requires_grad) rhs.accumulate(self.grad.cwiseProduct(lhs.value));
  });
}

/// x + 1·bias, where bias is a single row broadcast over the rows of x.
template <typename Scalar>
Var<Scalar> add_row(const Var<Scalar>& x, const Var<Scalar>& bias) {
  if (bias.rows() != 1 || bias.cols() != x.cols()) {
    throw DimensionError("add_row: bias " + detail::shape_str(bias.rows(), bias.cols()) + " does not match " +
                         detail::shape_str(x.rows(), x.cols()));
  }
  Matrix<Scalar> out = x.value().rowwise() + bias.value().row(0);
  return detail::make_result<Scalar>("add_row", std::move(out), {x.node(), bias.node()}, [](Node<Scalar>& self) {
    detail::push(*self.inputs[0], self.grad);
    detail::push(*self.inputs[1], self.grad.colwise().sum());
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& x, Scalar factor) {
  return detail::make_result<Scalar>("scale", x.value() * factor, {x.node()},
                                     [factor](Node<Scalar>& self) { detail::push(*self.inputs[0], self.grad * factor); });
}

template <typename Scalar>
Var<Scalar> transpose(const Var<Scalar>& x) {
  Matrix<Scalar> out = x.value().transpose();
  return detail::make_result<Scalar>("transpose", std::move(out), {x.node()}, [](Node<Scalar>& self) {
    detail::push(*self.inputs[0], self.grad.transpose());
  });
}

template <typename Scalar>
Var<Scalar> exp(const Var<Scalar>& x) {
  Matrix<Scalar> out = x.value().array().exp().matrix();
  return detail::make_result<Scalar>("exp", std::move(out), {x.node()}, [](Node<Scalar>& self) {
    detail::push(*self.inputs[0], self.grad.cwiseProduct(self.value));
  });
}

/// Softmax along `axis` (1: across each row, 0: down each column), shifted
/// by the max for stability.
template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& x, int axis = 1) {
  if (axis != 0 && axis != 1) throw DimensionError("softmax: axis must be 0 or 1");
  Matrix<Scalar> out = axis == 1 ? detail::softmax_rows<Scalar>(x.value())
                                 : Matrix<Scalar>(detail::softmax_rows<Scalar>(x.value().transpose()).transpose());
  return detail::make_result<Scalar>("softmax", std::move(out), {x.node()}, [axis](Node<Scalar>& self) {
    const auto& y = self.value;
    const auto& g = self.grad;
    if (axis == 1) {
      Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dot = g.cwiseProduct(y).rowwise().sum();
      detail::push(*self.inputs[0], y.cwiseProduct(Matrix<Scalar>(g.colwise() - dot)));
    } else {
      RowVector<Scalar> dot = g.cwiseProduct(y).colwise().sum();
      detail::push(*self.inputs[0], y.cwiseProduct(Matrix<Scalar>(g.rowwise() - dot)));
    }
  });
}

/// Row-wise log-softmax.
template <typename Scalar>
Var<Scalar> log_softmax(const Var<Scalar>& x) {
  Matrix<Scalar> out = detail::log_softmax_rows<Scalar>(x.value());
  return detail::make_result<Scalar>("log_softmax", std::move(out), {x.node()}, [](Node<Scalar>& self) {
    Matrix<Scalar> probs = self.value.array().exp().matrix();
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> total = self.grad.rowwise().sum();
    detail::push(*self.inputs[0], self.grad - Matrix<Scalar>(probs.array().colwise() * total.array()));
  });
}

/// Exact (erf-based) GELU.
template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& x) {
  const Scalar inv_sqrt2 = Scalar(1) / std::sqrt(Scalar(2));
  Matrix<Scalar> out = x.value().unaryExpr([inv_sqrt2](Scalar v) {
    return Scalar(0.5) * v * (Scalar(1) + std::erf(v * inv_sqrt2));
  });
  return detail::make_result<Scalar>("gelu", std::move(out), {x.node()}, [inv_sqrt2](Node<Scalar>& self) {
    const Scalar inv_sqrt_2pi = Scalar(1) / std::sqrt(Scalar(2) * std::numbers::pi_v<Scalar>);
    Matrix<Scalar> deriv = self.inputs[0]->value.unaryExpr([&](Scalar v) {
      return Scalar(0.5) * (Scalar(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(Scalar(-0.5) * v * v);
    });
    detail::push(*self.inputs[0], self.grad.cwiseProduct(deriv));
  });
}

/// Row-wise layer normalization. With `live` (a 0/1 row over the columns),
/// statistics use only the live columns and dead columns output `beta`, so a
/// zero-masked model normalizes exactly like its physically narrowed
/// counterpart.
template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta, Scalar eps,
                       const RowVector<Scalar>* live = nullptr) {
  const Index d = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d) {
    throw DimensionError("layer_norm: gamma/beta must be 1x" + std::to_string(d));
  }
  if (live != nullptr && live->cols() != d) throw DimensionError("layer_norm: live mask width mismatch");
  RowVector<Scalar> keep = live != nullptr ? *live : RowVector<Scalar>::Ones(d);
  const Scalar count = keep.sum();
  if (count <= 0) throw DimensionError("layer_norm: no live columns");

  const Matrix<Scalar>& xv = x.value();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> mean = (xv * keep.transpose()) / count;
  Matrix<Scalar> centered = (xv.colwise() - mean).array().rowwise() * keep.array();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> var = centered.array().square().rowwise().sum() / count;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rstd = (var.array() + eps).rsqrt();
  Matrix<Scalar> xhat = centered.array().colwise() * rstd.array();
  Matrix<Scalar> out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();

  return detail::make_result<Scalar>(
      "layer_norm", std::move(out), {x.node(), gamma.node(), beta.node()},
      [xhat = std::move(xhat), rstd = std::move(rstd), keep = std::move(keep), count](Node<Scalar>& self) {
        const auto& g = self.grad;
        auto& xin = *self.inputs[0];
        auto& gam = *self.inputs[1];
        auto& bet = *self.inputs[2];
        if (gam.requires_grad) gam.accumulate(g.cwiseProduct(xhat).colwise().sum());
        if (bet.requires_grad) bet.accumulate(g.colwise().sum());
        if (xin.requires_grad) {
          Matrix<Scalar> dxhat = (g.array().rowwise() * (gam.value.row(0).array() * keep.array())).matrix();
          Eigen::Matrix<Scalar, Eigen::Dynamic, 1> m1 = dxhat.rowwise().sum() / count;
          Eigen::Matrix<Scalar, Eigen::Dynamic, 1> m2 = dxhat.cwiseProduct(xhat).rowwise().sum() / count;
          Matrix<Scalar> dx = dxhat.colwise() - m1;
          dx -= Matrix<Scalar>(xhat.array().colwise() * m2.array());
          dx = (dx.array().colwise() * rstd.array()).rowwise() * keep.array();
          xin.accumulate(dx);
        }
      });
}

/// Embedding-style lookup: row i of the result is row ids[i] of `table`.
template <typename Scalar>
Var<Scalar> gather_rows(const Var<Scalar>& table, std::span<const Index> ids) {
  check_nonempty<Scalar>(static_cast<Index>(ids.size()), table.cols(), "gather_rows");
  Matrix<Scalar> out(static_cast<Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows()) {
      throw DimensionError("gather_rows: index " + std::to_string(ids[i]) + " out of range [0, " +
                           std::to_string(table.rows()) + ")");
    }
    out.row(static_cast<Index>(i)) = table.value().row(ids[i]);
  }
  std::vector<Index> idx(ids.begin(), ids.end());
  return detail::make_result<Scalar>("gather_rows", std::move(out), {table.node()},
                                     [idx = std::move(idx)](Node<Scalar>& self) {
                                       auto& tab = *self.inputs[0];
                                       if (!tab.requires_grad) return;
                                       Matrix<Scalar> g = Matrix<Scalar>::Zero(tab.value.rows(), tab.value.cols());
                                       for (std::size_t i = 0; i < idx.size(); ++i) {
                                         g.row(idx[i]) += self.grad.row(static_cast<Index>(i));
                                       }
                                       tab.accumulate(g);
                                     });
}

template <typename Scalar>
Var<Scalar> slice_rows(const Var<Scalar>& x, Index start, Index count) {
  if (start < 0 || count <= 0 || start + count > x.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(start) + ", +" + std::to_string(count) + ") out of " +
                         std::to_string(x.rows()));
  }
  Matrix<Scalar> out = x.value().middleRows(start, count);
  return detail::make_result<Scalar>("slice_rows", std::move(out), {x.node()}, [start, count](Node<Scalar>& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    Matrix<Scalar> g = Matrix<Scalar>::Zero(in.value.rows(), in.value.cols());
    g.middleRows(start, count) = self.grad;
    in.accumulate(g);
  });
}

template <typename Scalar>
Var<Scalar> slice_cols(const Var<Scalar>& x, Index start, Index count) {
  if (start < 0 || count <= 0 || start + count > x.cols()) {
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", +" + std::to_string(count) + ") out of " +
                         std::to_string(x.cols()));
  }
  Matrix<Scalar> out = x.value().middleCols(start, count);
  return detail::make_result<Scalar>("slice_cols", std::move(out), {x.node()}, [start, count](Node<Scalar>& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    Matrix<Scalar> g = Matrix<Scalar>::Zero(in.value.rows(), in.value.cols());
    g.middleCols(start, count) = self.grad;
    in.accumulate(g);
  });
}

template <typename Scalar>
Var<Scalar> concat_rows(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  Index rows = 0;
  const Index cols = parts.front().cols();
  std::vector<std::shared_ptr<Node<Scalar>>> inputs;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw DimensionError("concat_rows: column count mismatch");
    rows += p.rows();
    inputs.push_back(p.node());
  }
  Matrix<Scalar> out(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return detail::make_result<Scalar>("concat_rows", std::move(out), std::move(inputs), [](Node<Scalar>& self) {
    Index offset = 0;
    for (auto& in : self.inputs) {
      const Index r = in->value.rows();
      if (in->requires_grad) in->accumulate(self.grad.middleRows(offset, r));
      offset += r;
    }
  });
}

template <typename Scalar>
Var<Scalar> concat_cols(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  Index cols = 0;
  const Index rows = parts.front().rows();
  std::vector<std::shared_ptr<Node<Scalar>>> inputs;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw DimensionError("concat_cols: row count mismatch");
    cols += p.cols();
    inputs.push_back(p.node());
  }
  Matrix<Scalar> out(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return detail::make_result<Scalar>("concat_cols", std::move(out), std::move(inputs), [](Node<Scalar>& self) {
    Index offset = 0;
    for (auto& in : self.inputs) {
      const Index c = in->value.cols();
      if (in->requires_grad) in->accumulate(self.grad.middleCols(offset, c));
      offset += c;
    }
  });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  Matrix<Scalar> out(1, 1);
  out(0, 0) = x.value().sum();
  return detail::make_result<Scalar>("sum", std::move(out), {x.node()}, [](Node<Scalar>& self) {
    auto& in = *self.inputs[0];
    detail::push(in, Matrix<Scalar>::Constant(in.value.rows(), in.value.cols(), self.grad(0, 0)));
  });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& x) {
  return scale(sum(x), Scalar(1) / static_cast<Scalar>(x.size()));
}

/// Mean squared error: mean over all elements of (a - b)^2.
template <typename Scalar>
Var<Scalar> mse(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "mse");
  Matrix<Scalar> out(1, 1);
  const Scalar n = static_cast<Scalar>(a.size());
  out(0, 0) = (a.value() - b.value()).squaredNorm() / n;
  return detail::make_result<Scalar>("mse", std::move(out), {a.node(), b.node()}, [n](Node<Scalar>& self) {
    auto& lhs = *self.inputs[0];
    auto& rhs = *self.inputs[1];
    Matrix<Scalar> diff = (lhs.value - rhs.value) * (Scalar(2) * self.grad(0, 0) / n);
    if (lhs.requires_grad) lhs.accumulate(diff);
    if (rhs.requires_grad) rhs.accumulate(-diff);
  });
}

/// Mean over `rows` of -log softmax(logits[row])[target].
template <typename Scalar>
Var<Scalar> cross_entropy(const Var<Scalar>& logits, std::span<const Index> rows, std::span<const Index> targets) {
  if (rows.size() != targets.size()) throw DimensionError("cross_entropy: rows/targets length mismatch");
  if (rows.empty()) throw ContractError("cross_entropy: no target positions");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= logits.rows() || targets[i] < 0 || targets[i] >= logits.cols()) {
      throw DimensionError("cross_entropy: position or target out of range");
    }
  }
  const Scalar n = static_cast<Scalar>(rows.size());
  Matrix<Scalar> out = Matrix<Scalar>::Zero(1, 1);
  Matrix<Scalar> picked(static_cast<Index>(rows.size()), logits.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) picked.row(static_cast<Index>(i)) = logits.value().row(rows[i]);
  Matrix<Scalar> logp = detail::log_softmax_rows<Scalar>(picked);
  for (std::size_t i = 0; i < rows.size(); ++i) out(0, 0) -= logp(static_cast<Index>(i), targets[i]);
  out(0, 0) /= n;
  std::vector<Index> r(rows.begin(), rows.end());
  std::vector<Index> t(targets.begin(), targets.end());
  return detail::make_result<Scalar>(
      "cross_entropy", std::move(out), {logits.node()},
      [logp = std::move(logp), r = std::move(r), t = std::move(t), n](Node<Scalar>& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        Matrix<Scalar> g = Matrix<Scalar>::Zero(in.value.rows(), in.value.cols());
        const Scalar w = self.grad(0, 0) / n;
        for (std::size_t i = 0; i < r.size(); ++i) {
          g.row(r[i]) += logp.row(static_cast<Index>(i)).array().exp().matrix() * w;
          g(r[i], t[i]) -= w;
        }
        in.accumulate(g);
      });
}

/// Mean over rows of KL(softmax(p_logits/T) || softmax(q_logits/T)).
template <typename Scalar>
Var<Scalar> kl_divergence(const Var<Scalar>& p_logits, const Var<Scalar>& q_logits, Scalar temperature) {
  detail::require_same_shape(p_logits, q_logits, "kl_divergence");
  if (!(temperature > 0)) throw ContractError("kl_divergence: temperature must be positive");
  Matrix<Scalar> logp = detail::log_softmax_rows<Scalar>(p_logits.value() / temperature);
  Matrix<Scalar> logq = detail::log_softmax_rows<Scalar>(q_logits.value() / temperature);
  Matrix<Scalar> p = logp.array().exp().matrix();
  Matrix<Scalar> logratio = logp - logq;
  const Scalar n = static_cast<Scalar>(p_logits.rows());
  Matrix<Scalar> out(1, 1);
  out(0, 0) = p.cwiseProduct(logratio).sum() / n;
  return detail::make_result<Scalar>(
      "kl_divergence", std::move(out), {p_logits.node(), q_logits.node()},
      [p = std::move(p), logq = std::move(logq), logratio = std::move(logratio), n, temperature](Node<Scalar>& self) {
        const Scalar w = self.grad(0, 0) / (n * temperature);
        auto& pin = *self.inputs[0];
        auto& qin = *self.inputs[1];
        if (pin.requires_grad) {
          Eigen::Matrix<Scalar, Eigen::Dynamic, 1> expect = p.cwiseProduct(logratio).rowwise().sum();
          Matrix<Scalar> centered = logratio.colwise() - expect;
          pin.accumulate(p.cwiseProduct(centered) * w);
        }
        if (qin.requires_grad) {
          qin.accumulate((logq.array().exp().matrix() - p) * w);
        }
      });
}

// Operator sugar for the common binary ops.
template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) {
  return add(a, b);
}
template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) {
  return sub(a, b);
}
template <typename Scalar>
Var<Scalar> operator*(const Var<Scalar>& a, Scalar s) {
  return scale(a, s);
}

}  // namespace homodistil::ad
