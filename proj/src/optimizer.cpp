#include "homodistil/optimizer.hpp"

#include <cmath>

namespace homodistil {

double LinearWarmupDecay::at(Index step) const {
  const double t = static_cast<double>(step);
  const double total_d = static_cast<double>(total);
  const double warmup = warmup_fraction * total_d;
  if (t < warmup) return peak * t / warmup;
  if (t >= total_d) return 0.0;
  return peak * (total_d - t) / (total_d - warmup);
}

bool decays(ParamRole role) {
  switch (role) {
    case ParamRole::TokenEmbedding:
    case ParamRole::PositionEmbedding:
    case ParamRole::Query:
    case ParamRole::Key:
    case ParamRole::Value:
    case ParamRole::AttentionOutput:
    case ParamRole::FfnInput:
    case ParamRole::FfnOutput:
    case ParamRole::HiddenProjection:
    case ParamRole::EmbeddingProjection:
      return true;
    default:
      return false;
  }
}

double Adam::step(std::span<const ParamRef> params, double learning_rate) {
  double norm_sq = 0.0;
  for (const auto& p : params) {
    if (p.tensor.has_grad()) norm_sq += p.tensor.grad().squaredNorm();
  }
  const double norm = std::sqrt(norm_sq);
  const double clip = (config_.grad_clip > 0.0 && norm > config_.grad_clip) ? config_.grad_clip / norm : 1.0;

  ++steps_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  for (const auto& p : params) {
    Tensor t = p.tensor;
    auto [it, inserted] = moments_.try_emplace(p.name);
    Moments& mom = it->second;
    if (inserted || mom.first.rows() != t.rows() || mom.first.cols() != t.cols()) {
      mom.first = MatrixD::Zero(t.rows(), t.cols());
      mom.second = MatrixD::Zero(t.rows(), t.cols());
    }
    if (t.has_grad()) {
      const MatrixD g = t.grad() * clip;
      mom.first = config_.beta1 * mom.first + (1.0 - config_.beta1) * g;
      mom.second = config_.beta2 * mom.second + (1.0 - config_.beta2) * g.cwiseAbs2();
    } else {
      mom.first *= config_.beta1;
      mom.second *= config_.beta2;
    }
    MatrixD& w = t.mutable_value();
    MatrixD update = (mom.first / c1).array() / ((mom.second / c2).array().sqrt() + config_.eps);
    if (decays(p.role) && config_.weight_decay != 0.0) update += config_.weight_decay * w;
    w -= learning_rate * update;
  }
  return norm;
}

}  // namespace homodistil
