#pragma once

// Central finite-difference oracle used by the gradient tests. It only ever
// evaluates the forward function, so it stays independent of every
// pullback it checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "homodistil/numerics/tensor.hpp"

namespace homodistil::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  int checked = 0;
};

/// Relative error with an absolute floor so entries whose true gradient is
/// ~0 are judged on absolute agreement.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

template <typename Scalar>
Scalar central_difference(const std::function<Scalar()>& loss, ad::Var<Scalar>& param, ad::Index r, ad::Index c,
                          Scalar h = Scalar(1e-5)) {
  Scalar& slot = param.mutable_value()(r, c);
  const Scalar saved = slot;
  slot = saved + h;
  const Scalar up = loss();
  slot = saved - h;
  const Scalar down = loss();
  slot = saved;
  return (up - down) / (Scalar(2) * h);
}

/// Five-point stencil: truncation error O(h^4), so a larger step keeps
/// cancellation error small on entries with tiny gradients.
template <typename Scalar>
Scalar five_point_difference(const std::function<Scalar()>& loss, ad::Var<Scalar>& param, ad::Index r, ad::Index c,
                             Scalar h) {
  Scalar& slot = param.mutable_value()(r, c);
  const Scalar saved = slot;
  auto at = [&](Scalar offset) {
    slot = saved + offset;
    return loss();
  };
  const Scalar value = (at(-2 * h) - Scalar(8) * at(-h) + Scalar(8) * at(h) - at(2 * h)) / (Scalar(12) * h);
  slot = saved;
  return value;
}

/// Compares the analytic gradient already stored in each param against
/// central differences of `loss` at every entry (or `samples` random entries
/// when samples > 0).
template <typename Scalar>
GradCheckResult check_gradients(const std::function<Scalar()>& loss, std::vector<ad::Var<Scalar>> params,
                                int samples = 0, unsigned seed = 1, Scalar h = Scalar(1e-5),
                                bool five_point = false) {
  GradCheckResult result;
  std::mt19937 rng(seed);
  auto check_one = [&](ad::Var<Scalar>& p, ad::Index r, ad::Index c) {
    const double analytic = p.has_grad() ? static_cast<double>(p.grad()(r, c)) : 0.0;
    const double numeric = static_cast<double>(five_point ? five_point_difference<Scalar>(loss, p, r, c, h)
                                                          : central_difference<Scalar>(loss, p, r, c, h));
    result.max_rel_error = std::max(result.max_rel_error, relative_error(analytic, numeric));
    ++result.checked;
  };
  if (samples <= 0) {
    for (auto& p : params) {
      for (ad::Index r = 0; r < p.rows(); ++r) {
        for (ad::Index c = 0; c < p.cols(); ++c) check_one(p, r, c);
      }
    }
    return result;
  }
  std::uniform_int_distribution<std::size_t> pick_param(0, params.size() - 1);
  for (int s = 0; s < samples; ++s) {
    auto& p = params[pick_param(rng)];
    std::uniform_int_distribution<ad::Index> pr(0, p.rows() - 1);
    std::uniform_int_distribution<ad::Index> pc(0, p.cols() - 1);
    const ad::Index r = pr(rng);
    const ad::Index c = pc(rng);
    check_one(p, r, c);
  }
  return result;
}

template <typename Scalar>
ad::Matrix<Scalar> random_matrix(ad::Index rows, ad::Index cols, std::mt19937& rng, Scalar spread = Scalar(1)) {
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  ad::Matrix<Scalar> m(rows, cols);
  for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(dist(rng)) * spread;
  return m;
}

}  // namespace homodistil::testing
