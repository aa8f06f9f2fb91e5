#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "homodistil/data.hpp"
#include "homodistil/losses.hpp"
#include "homodistil/model.hpp"
#include "homodistil/optimizer.hpp"
#include "homodistil/pruning.hpp"

namespace homodistil {

struct TrainConfig {
  double learning_rate = 5e-4;
  double warmup_fraction = 0.1;
  Index iterations = 400;  // T
  Index batch_size = 16;
  double mask_prob = 0.15;
  AdamConfig adam;
  std::uint64_t seed = 0;
  LossWeights weights;
  /// base.total is overwritten with `iterations`.
  pruning::GroupSchedules schedule;
  pruning::ScorerKind scorer = pruning::ScorerKind::Sensitivity;
  double beta_ema = 0.85;
  double beta_uncertainty = 0.85;
  bool monotone_masks = false;
  Index prune_interval = 1;
  bool log_wallclock = false;

  /// Throws ConfigError on out-of-range values.
  void validate() const;
  pruning::GroupSchedules resolved_schedule() const;
};

struct MetricsRecord {
  Index iteration = 0;
  LossBundle losses;
  double learning_rate = 0.0;
  double grad_norm = 0.0;
  /// Keep-fraction and live width of every group during this iteration's
  /// forward pass.
  std::map<pruning::GroupId, double> ratios;
  std::map<pruning::GroupId, Index> kept;
  std::optional<double> wall_seconds;

  nlohmann::json to_json() const;
};

using MetricsSink = std::function<void(const MetricsRecord&)>;

/// Mutable state of one distillation run. The teacher is never written.
struct DistillState {
  TrainConfig config;
  TransformerModel teacher;
  TransformerModel student;
  ProjectionSet projections;
  Adam optimizer;
  pruning::ImportanceState importance;
  pruning::MaskSet masks;
  std::map<pruning::GroupId, Index> widths;  // original group widths
  Index step = 0;

  /// Student and projection parameters, in a fixed order.
  std::vector<ParamRef> trainable() const;
};

/// Clones the teacher into the student, starts the projections at identity
/// and all masks at one.
DistillState make_distill_state(const TransformerModel& teacher, const TrainConfig& config);

/// Scores the cloned student on `batch` and masks it to r(0). Used when the
/// schedule starts below 1 (single-shot pruning at initialization).
void initial_prune(DistillState& state, const data::MLMBatch& batch);

/// One iteration: loss at the current parameters, Adam update, importance
/// update from the same gradients, masks rebuilt for the next iteration's
/// keep-fraction and applied. Throws DivergenceError on a non-finite loss.
MetricsRecord train_step(DistillState& state, const data::MLMBatch& batch);

struct DistillResult {
  DistillState state;
  std::vector<MetricsRecord> log;
};

/// Runs all T iterations on batches drawn from `dataset`.
DistillResult distill(const TransformerModel& teacher, const TrainConfig& config, const data::Dataset& dataset,
                      const data::Vocabulary& vocab, const MetricsSink& sink = {});

/// MLM-only training of a freshly initialized model (no pruning, no
/// teacher). Uses learning_rate, warmup, iterations, batch and Adam fields.
TransformerModel pretrain_teacher(const ModelConfig& model_config, const TrainConfig& config,
                                  const data::Dataset& dataset, const data::Vocabulary& vocab,
                                  const MetricsSink& sink = {});

/// Token-level mean MLM loss over the given batches.
double evaluate_mlm(const TransformerModel& model, std::span<const data::MLMBatch> batches);

/// Mean temperature-scaled KL between teacher and student over every
/// non-padded position of the batches.
double evaluate_kl(const TransformerModel& teacher, const TransformerModel& student,
                   std::span<const data::MLMBatch> batches, double temperature);

/// Derived rng streams of a run.
namespace streams {
inline constexpr std::uint64_t kTrainBatches = 1;
inline constexpr std::uint64_t kInitialScoring = 2;
inline constexpr std::uint64_t kHeldout = 3;
inline constexpr std::uint64_t kModelInit = 4;
}  // namespace streams

}  // namespace homodistil
