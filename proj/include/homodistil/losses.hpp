#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "homodistil/model.hpp"

namespace homodistil {

/// Which distribution weights the log-ratio in the prediction-discrepancy
/// term. TeacherToStudent is KL(teacher || student).
enum class KlDirection { TeacherToStudent, StudentToTeacher };

struct LossWeights {
  double kd = 1.0;         // alpha_1
  double hidden = 1.0;     // alpha_2
  double embedding = 1.0;  // alpha_3
  double attention = 1.0;  // alpha_4
  double temperature = 2.0;
  KlDirection direction = KlDirection::TeacherToStudent;

  void validate() const;
};

/// Learnable maps from the student's hidden width to the teacher's. One
/// hidden projection is shared by every layer.
struct ProjectionSet {
  Tensor hidden;     // d_s x d_t
  Tensor embedding;  // d_s x d_t

  static ProjectionSet initialize(Index student_dim, Index teacher_dim, std::uint64_t seed);
  static ProjectionSet identity(Index dim);
  ProjectionSet clone() const;
  std::vector<ParamRef> parameters() const;
};

struct LossBundle {
  double l_mlm = 0.0;
  double d_kl = 0.0;
  double l_hidn = 0.0;
  double l_emb = 0.0;
  double l_attn = 0.0;
  double l_total = 0.0;
};

/// Flattened (row, target) pairs for the positions that carry an MLM label.
struct MaskedPositions {
  std::vector<Index> rows;
  std::vector<Index> targets;

  static MaskedPositions from_labels(const TokenMatrix& labels);
  bool empty() const { return rows.empty(); }
};

/// Mean cross-entropy over labelled positions. Throws ContractError when
/// nothing is labelled.
Tensor mlm_loss(const Tensor& logits, const MaskedPositions& positions);

/// T^2 * mean over `rows` of the KL divergence between temperature-softened
/// teacher and student distributions, in the requested direction.
Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_logits, double temperature,
               std::span<const Index> rows, KlDirection direction = KlDirection::TeacherToStudent);

/// Sum over layers of MSE(H_t^k, H_s^k W).
Tensor hidden_loss(std::span<const Tensor> teacher, std::span<const Tensor> student, const Tensor& projection);

/// MSE(E_t, E_s W).
Tensor embedding_loss(const Tensor& teacher, const Tensor& student, const Tensor& projection);

/// Sum over layers of MSE between head-averaged attention maps.
Tensor attention_loss(std::span<const Tensor> teacher, std::span<const Tensor> student);

/// l_total = l_mlm + a1 d_kl + a2 l_hidn + a3 l_emb + a4 l_attn.
LossBundle total_loss(double l_mlm, double d_kl, double l_hidn, double l_emb, double l_attn, const LossWeights& w);

/// Differentiable terms together with their scalar values.
struct LossTerms {
  Tensor mlm, kd, hidden, embedding, attention;
  Tensor total;  // only terms with nonzero weight enter the graph
  LossBundle values;
};

/// Every term between a (constant) teacher pass and a student pass on the
/// same batch.
LossTerms distillation_losses(const ForwardOutput& teacher, const ForwardOutput& student,
                              const ProjectionSet& projections, const MaskedPositions& positions,
                              const LossWeights& weights);

}  // namespace homodistil
