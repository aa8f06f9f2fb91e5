#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "homodistil/data.hpp"
#include "homodistil/model.hpp"
#include "homodistil/pruning.hpp"
#include "homodistil/trainer.hpp"

namespace homodistil {

/// Physically deletes the masked columns and coupled rows of a zero-masked
/// model. Throws IntegrityError if any masked entry is nonzero. Query/key and
/// value heads keep their original boundaries, so heads may shrink unevenly.
TransformerModel compact_model(const TransformerModel& masked, const pruning::MaskSet& masks);

/// One distillation run of a schedule comparison.
struct ScheduleRun {
  std::string run_id;
  double end_fraction = 0.0;  // t_f / T
  std::vector<MetricsRecord> log;
  double heldout_mlm = 0.0;
};

struct ScheduleComparison {
  std::vector<ScheduleRun> runs;

  /// Single-shot initial D_KL exceeds the maximum D_KL over the first 10% of
  /// iterations of every iterative run, and every iterative run starts at
  /// D_KL <= 1e-6.
  bool ordering_holds() const;
  const ScheduleRun& run(const std::string& id) const;
};

/// Distills the same teacher once per end fraction (0 is single-shot) with
/// otherwise identical configuration and seed.
ScheduleComparison compare_schedules(const TransformerModel& teacher, const TrainConfig& config,
                                     const std::vector<double>& end_fractions, const data::Dataset& dataset,
                                     const data::Vocabulary& vocab);

/// Writes `curves.csv` (run_id,iteration,d_kl,r_t) and `summary.csv`.
void write_comparison_csv(const ScheduleComparison& comparison, const std::filesystem::path& dir);

/// Identifier of a comparison run for end fraction f: "single_shot" for 0,
/// otherwise "tf_<f>" with two decimals.
std::string schedule_run_id(double end_fraction);

}  // namespace homodistil
