#pragma once

#include <compare>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "homodistil/losses.hpp"
#include "homodistil/model.hpp"
#include "homodistil/optimizer.hpp"
#include "homodistil/pruning/scores.hpp"

namespace homodistil::pruning {

// ---------------------------------------------------------------------------
// Coupling groups
//
// A group is a set of matrix dimensions that must share one keep/drop mask:
//   Hidden       the residual stream: embedding columns, every attention and
//                FFN output column, every layernorm/bias entry on it, and the
//                input rows of Q/K/V/FFN-in and both distillation projections
//   QueryKey(l)  query and key columns (and biases) of layer l
//   ValueOutput(l)  value columns of layer l and the matching output rows
//   FfnInner(l)  FFN-input columns of layer l and the matching output rows
// ---------------------------------------------------------------------------

enum class GroupKind { Hidden, QueryKey, ValueOutput, FfnInner };

struct GroupId {
  GroupKind kind = GroupKind::Hidden;
  int layer = -1;

  auto operator<=>(const GroupId&) const = default;
  std::string name() const;
  static GroupId parse(const std::string& name);
};

struct Coupling {
  std::optional<GroupId> rows;
  std::optional<GroupId> cols;
};

/// Which groups index the rows and columns of a parameter.
Coupling coupling_for(ParamRole role, int layer);

/// Whether the parameter's per-column importance is scored into its column
/// group. True for every 2-D model weight matrix.
bool is_scored(ParamRole role);

/// All groups of a model with `num_layers` layers, in a fixed order.
std::vector<GroupId> coupling_groups(Index num_layers);

/// Width of each group in the given (uncompacted) model.
std::map<GroupId, Index> group_widths(const TransformerModel& model);

// ---------------------------------------------------------------------------
// Sparsity schedule
// ---------------------------------------------------------------------------

/// Cubic keep-fraction schedule: 1 before start, r_f + (1 - r_f)(1 - s)^3
/// on [start, end) with s the progress fraction, r_f from end on.
/// start == end is allowed and yields a step from 1 to r_f at `end`
/// (start = end = 0 is single-shot pruning at initialization).
struct SparsitySchedule {
  Index start = 0;   // t_i
  Index end = 1;     // t_f
  double final_ratio = 1.0;  // r_f
  Index total = 1;   // T

  void validate() const;
};

/// r(t); throws ContractError for t outside [0, total).
double compute_schedule(Index t, const SparsitySchedule& schedule);

/// Keep-fraction after the last step, r_f.
inline double terminal_ratio(const SparsitySchedule& s) { return s.final_ratio; }

/// Per-group schedules. With `per_group` set, the end point differs by
/// matrix type: output-side groups (hidden) finish at 0.5 T, query/key and
/// FFN-input groups at 0.9 T, value groups at 0.7 T.
struct GroupSchedules {
  SparsitySchedule base;
  bool per_group = false;
  double hidden_end_fraction = 0.5;
  double query_key_end_fraction = 0.9;
  double ffn_end_fraction = 0.9;
  double value_end_fraction = 0.7;

  SparsitySchedule for_group(GroupKind kind) const;
  /// Keep-fraction per group at t (t == total gives the terminal ratio).
  std::map<GroupId, double> ratios(Index t, const std::vector<GroupId>& groups) const;
};

// ---------------------------------------------------------------------------
// Importance
// ---------------------------------------------------------------------------

enum class ScorerKind { Sensitivity, Magnitude, Movement, Platon };

const char* to_string(ScorerKind kind);
ScorerKind parse_scorer(const std::string& name);

/// Per-parameter EMA score buffers for every scored matrix.
struct ImportanceState {
  ScorerKind kind = ScorerKind::Sensitivity;
  double beta_ema = 0.85;
  double beta_uncertainty = 0.85;  // PLATON only
  std::map<std::string, MatrixD> score_ema;
  std::map<std::string, MatrixD> uncertainty_ema;  // PLATON only
  long updates = 0;

  /// Folds the instantaneous scores of every scored parameter (value and
  /// current gradient) into the EMA buffers.
  void update(std::span<const ParamRef> params);

  /// Score matrix that column importance is computed from.
  MatrixD effective_scores(const std::string& name) const;
};

/// Instantaneous per-parameter scores for `kind`. For PLATON this also
/// advances the state's buffers for `name` and returns I_bar * U_bar.
MatrixD alternative_scores(ScorerKind kind, const MatrixD& params, const MatrixD& grads, ImportanceState& state,
                           const std::string& name);

// ---------------------------------------------------------------------------
// Masks
// ---------------------------------------------------------------------------

struct MaskSet {
  std::map<GroupId, RowVectorD> masks;  // 0/1 per column of the group
  std::map<GroupId, Index> original_width;

  static MaskSet all_ones(const TransformerModel& model);
  Index kept(const GroupId& g) const;
  bool all_ones() const;
};

/// Group importance: the sum of column importance over the member matrices.
std::map<GroupId, RowVectorD> group_importance(const ImportanceState& state, std::span<const ParamRef> params);

/// Keeps ceil(r * width) highest-importance columns per group, ties to the
/// lower index. With `previous` (monotone mode) only still-live columns are
/// eligible.
MaskSet build_masks(const std::map<GroupId, RowVectorD>& importance, const std::map<GroupId, double>& ratios,
                    const std::map<GroupId, Index>& original_width, const MaskSet* previous = nullptr);

/// Elementwise 0/1 mask of a parameter under a group mask set.
MatrixD element_mask(const ParamRef& param, const MaskSet& masks);

/// Zeroes masked columns and every coupled row/entry downstream (including
/// projection rows), masked optimizer moments when given, and updates the
/// model's live hidden set.
void apply_masks(TransformerModel& model, ProjectionSet& projections, const MaskSet& masks, Adam* optimizer = nullptr);

/// Zeroes gradient entries of masked parameters (hard zeroing).
void mask_gradients(std::span<const ParamRef> params, const MaskSet& masks);

}  // namespace homodistil::pruning
