#include "homodistil/losses.hpp"

#include <cmath>
#include <random>

namespace homodistil {

void LossWeights::validate() const {
  if (kd < 0 || hidden < 0 || embedding < 0 || attention < 0) {
    throw ConfigError("loss weights must be nonnegative");
  }
  if (!(temperature > 0)) throw ConfigError("distillation temperature must be positive");
}

ProjectionSet ProjectionSet::initialize(Index student_dim, Index teacher_dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto draw = [&] {
    MatrixD m(student_dim, teacher_dim);
    for (Index i = 0; i < m.size(); ++i) {
      double z = normal(rng);
      while (std::abs(z) > 2.0) z = normal(rng);
      m.data()[i] = 0.02 * z;
    }
    return Tensor::parameter(std::move(m));
  };
  ProjectionSet p;
  p.hidden = draw();
  p.embedding = draw();
  return p;
}

ProjectionSet ProjectionSet::identity(Index dim) {
  return {Tensor::parameter(MatrixD::Identity(dim, dim)), Tensor::parameter(MatrixD::Identity(dim, dim))};
}

ProjectionSet ProjectionSet::clone() const { return {hidden.detach_copy(), embedding.detach_copy()}; }

std::vector<ParamRef> ProjectionSet::parameters() const {
  return {{"projection.hidden", hidden, ParamRole::HiddenProjection, -1},
          {"projection.embedding", embedding, ParamRole::EmbeddingProjection, -1}};
}

MaskedPositions MaskedPositions::from_labels(const TokenMatrix& labels) {
  MaskedPositions p;
  for (Index b = 0; b < labels.rows(); ++b) {
    for (Index t = 0; t < labels.cols(); ++t) {
      if (labels(b, t) == kIgnoreLabel) continue;
      p.rows.push_back(b * labels.cols() + t);
      p.targets.push_back(labels(b, t));
    }
  }
  return p;
}

Tensor mlm_loss(const Tensor& logits, const MaskedPositions& positions) {
  if (positions.empty()) throw ContractError("mlm_loss: no masked positions");
  return ad::cross_entropy(logits, std::span<const Index>(positions.rows), std::span<const Index>(positions.targets));
}

Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_logits, double temperature,
               std::span<const Index> rows, KlDirection direction) {
  if (student_logits.rows() != teacher_logits.rows() || student_logits.cols() != teacher_logits.cols()) {
    throw DimensionError("kd_loss: student and teacher logits differ in shape");
  }
  if (rows.empty()) throw ContractError("kd_loss: no positions");
  Tensor s = ad::gather_rows(student_logits, rows);
  Tensor t = ad::gather_rows(teacher_logits, rows);
  Tensor kl = direction == KlDirection::TeacherToStudent ? ad::kl_divergence(t, s, temperature)
                                                         : ad::kl_divergence(s, t, temperature);
  return ad::scale(kl, temperature * temperature);
}

Tensor hidden_loss(std::span<const Tensor> teacher, std::span<const Tensor> student, const Tensor& projection) {
  if (teacher.size() != student.size()) {
    throw DimensionError("hidden_loss: teacher has " + std::to_string(teacher.size()) + " layers, student " +
                         std::to_string(student.size()));
  }
  if (teacher.empty()) throw DimensionError("hidden_loss: no layers");
  Tensor total;
  for (std::size_t k = 0; k < teacher.size(); ++k) {
    Tensor term = ad::mse(teacher[k], ad::matmul(student[k], projection));
    total = total ? ad::add(total, term) : term;
  }
  return total;
}

Tensor embedding_loss(const Tensor& teacher, const Tensor& student, const Tensor& projection) {
  return ad::mse(teacher, ad::matmul(student, projection));
}

Tensor attention_loss(std::span<const Tensor> teacher, std::span<const Tensor> student) {
  if (teacher.size() != student.size()) throw DimensionError("attention_loss: layer count mismatch");
  if (teacher.empty()) throw DimensionError("attention_loss: no layers");
  Tensor total;
  for (std::size_t k = 0; k < teacher.size(); ++k) {
    Tensor term = ad::mse(teacher[k], student[k]);
    total = total ? ad::add(total, term) : term;
  }
  return total;
}

LossBundle total_loss(double l_mlm, double d_kl, double l_hidn, double l_emb, double l_attn, const LossWeights& w) {
  LossBundle b{l_mlm, d_kl, l_hidn, l_emb, l_attn, 0.0};
  b.l_total = l_mlm + w.kd * d_kl + w.hidden * l_hidn + w.embedding * l_emb + w.attention * l_attn;
  return b;
}

LossTerms distillation_losses(const ForwardOutput& teacher, const ForwardOutput& student,
                              const ProjectionSet& projections, const MaskedPositions& positions,
                              const LossWeights& weights) {
  LossTerms terms;
  terms.mlm = mlm_loss(student.logits, positions);
  terms.kd = kd_loss(student.logits, teacher.logits, weights.temperature, std::span<const Index>(positions.rows),
                     weights.direction);
  terms.hidden = hidden_loss(teacher.hidden_states, student.hidden_states, projections.hidden);
  terms.embedding = embedding_loss(teacher.embedding_output, student.embedding_output, projections.embedding);
  terms.attention = attention_loss(teacher.attention_maps, student.attention_maps);

  Tensor total = terms.mlm;
  auto add_weighted = [&](const Tensor& term, double alpha) {
    if (alpha != 0.0) total = ad::add(total, ad::scale(term, alpha));
  };
  add_weighted(terms.kd, weights.kd);
  add_weighted(terms.hidden, weights.hidden);
  add_weighted(terms.embedding, weights.embedding);
  add_weighted(terms.attention, weights.attention);
  terms.total = total;
  terms.values = total_loss(terms.mlm.item(), terms.kd.item(), terms.hidden.item(), terms.embedding.item(),
                            terms.attention.item(), weights);
  return terms;
}

}  // namespace homodistil
