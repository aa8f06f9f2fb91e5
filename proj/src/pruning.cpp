#include "homodistil/pruning.hpp"

#include <cmath>

namespace homodistil::pruning {

std::string GroupId::name() const {
  switch (kind) {
    case GroupKind::Hidden: return "hidden";
    case GroupKind::QueryKey: return "qk." + std::to_string(layer);
    case GroupKind::ValueOutput: return "vo." + std::to_string(layer);
    case GroupKind::FfnInner: return "ffn." + std::to_string(layer);
  }
  return "?";
}

GroupId GroupId::parse(const std::string& name) {
  if (name == "hidden") return {GroupKind::Hidden, -1};
  const auto dot = name.find('.');
  if (dot == std::string::npos) throw InputError("unknown coupling group '" + name + "'");
  const std::string kind = name.substr(0, dot);
  int layer = 0;
  try {
    layer = std::stoi(name.substr(dot + 1));
  } catch (const std::exception&) {
    throw InputError("bad layer index in coupling group '" + name + "'");
  }
  if (kind == "qk") return {GroupKind::QueryKey, layer};
  if (kind == "vo") return {GroupKind::ValueOutput, layer};
  if (kind == "ffn") return {GroupKind::FfnInner, layer};
  throw InputError("unknown coupling group '" + name + "'");
}

Coupling coupling_for(ParamRole role, int layer) {
  const GroupId hidden{GroupKind::Hidden, -1};
  const GroupId qk{GroupKind::QueryKey, layer};
  const GroupId vo{GroupKind::ValueOutput, layer};
  const GroupId ffn{GroupKind::FfnInner, layer};
  switch (role) {
    case ParamRole::TokenEmbedding:
    case ParamRole::PositionEmbedding:
    case ParamRole::EmbeddingNormScale:
    case ParamRole::EmbeddingNormShift:
    case ParamRole::AttentionOutputBias:
    case ParamRole::AttentionNormScale:
    case ParamRole::AttentionNormShift:
    case ParamRole::FfnOutputBias:
    case ParamRole::FfnNormScale:
    case ParamRole::FfnNormShift:
      return {std::nullopt, hidden};
    case ParamRole::Query:
    case ParamRole::Key:
      return {hidden, qk};
    case ParamRole::QueryBias:
    case ParamRole::KeyBias:
      return {std::nullopt, qk};
    case ParamRole::Value:
      return {hidden, vo};
    case ParamRole::ValueBias:
      return {std::nullopt, vo};
    case ParamRole::AttentionOutput:
      return {vo, hidden};
    case ParamRole::FfnInput:
      return {hidden, ffn};
    case ParamRole::FfnInputBias:
      return {std::nullopt, ffn};
    case ParamRole::FfnOutput:
      return {ffn, hidden};
    case ParamRole::HiddenProjection:
    case ParamRole::EmbeddingProjection:
      return {hidden, std::nullopt};
    case ParamRole::MlmBias:
      return {};
  }
  return {};
}

bool is_scored(ParamRole role) {
  switch (role) {
    case ParamRole::TokenEmbedding:
    case ParamRole::PositionEmbedding:
    case ParamRole::Query:
    case ParamRole::Key:
    case ParamRole::Value:
    case ParamRole::AttentionOutput:
    case ParamRole::FfnInput:
    case ParamRole::FfnOutput:
      return true;
    default:
      return false;
  }
}

std::vector<GroupId> coupling_groups(Index num_layers) {
  std::vector<GroupId> out{{GroupKind::Hidden, -1}};
  for (int l = 0; l < static_cast<int>(num_layers); ++l) {
    out.push_back({GroupKind::QueryKey, l});
    out.push_back({GroupKind::ValueOutput, l});
    out.push_back({GroupKind::FfnInner, l});
  }
  return out;
}

std::map<GroupId, Index> group_widths(const TransformerModel& model) {
  std::map<GroupId, Index> widths;
  widths[{GroupKind::Hidden, -1}] = model.config.hidden_dim;
  for (int l = 0; l < static_cast<int>(model.layers.size()); ++l) {
    const auto& layer = model.layers[static_cast<std::size_t>(l)];
    widths[{GroupKind::QueryKey, l}] = layer.wq.cols();
    widths[{GroupKind::ValueOutput, l}] = layer.wv.cols();
    widths[{GroupKind::FfnInner, l}] = layer.w_in.cols();
  }
  return widths;
}

// --- schedule ---------------------------------------------------------------

void SparsitySchedule::validate() const {
  if (total < 1) throw ConfigError("schedule: total iterations must be >= 1");
  if (start < 0 || start > end || end > total) {
    throw ConfigError("schedule: need 0 <= t_i <= t_f <= T, got t_i=" + std::to_string(start) +
                      " t_f=" + std::to_string(end) + " T=" + std::to_string(total));
  }
  if (!(final_ratio > 0.0 && final_ratio <= 1.0)) throw ConfigError("schedule: r_f must lie in (0, 1]");
}

double compute_schedule(Index t, const SparsitySchedule& s) {
  if (t < 0 || t >= s.total) {
    throw ContractError("compute_schedule: t=" + std::to_string(t) + " outside [0, " + std::to_string(s.total) + ")");
  }
  if (t < s.start) return 1.0;
  if (t >= s.end) return s.final_ratio;
  const double progress = static_cast<double>(t - s.start) / static_cast<double>(s.end - s.start);
  const double remaining = 1.0 - progress;
  return s.final_ratio + (1.0 - s.final_ratio) * remaining * remaining * remaining;
}

SparsitySchedule GroupSchedules::for_group(GroupKind kind) const {
  if (!per_group) return base;
  double fraction = value_end_fraction;
  switch (kind) {
    case GroupKind::Hidden: fraction = hidden_end_fraction; break;
    case GroupKind::QueryKey: fraction = query_key_end_fraction; break;
    case GroupKind::FfnInner: fraction = ffn_end_fraction; break;
    case GroupKind::ValueOutput: fraction = value_end_fraction; break;
  }
  SparsitySchedule s = base;
  s.end = std::max(s.start, static_cast<Index>(std::llround(fraction * static_cast<double>(s.total))));
  s.end = std::min(s.end, s.total);
  return s;
}

std::map<GroupId, double> GroupSchedules::ratios(Index t, const std::vector<GroupId>& groups) const {
  std::map<GroupId, double> out;
  for (const auto& g : groups) {
    const SparsitySchedule s = for_group(g.kind);
    out[g] = t >= s.total ? terminal_ratio(s) : compute_schedule(t, s);
  }
  return out;
}

// --- importance -------------------------------------------------------------

const char* to_string(ScorerKind kind) {
  switch (kind) {
    case ScorerKind::Sensitivity: return "sensitivity";
    case ScorerKind::Magnitude: return "magnitude";
    case ScorerKind::Movement: return "movement";
    case ScorerKind::Platon: return "platon";
  }
  return "?";
}

ScorerKind parse_scorer(const std::string& name) {
  if (name == "sensitivity") return ScorerKind::Sensitivity;
  if (name == "magnitude") return ScorerKind::Magnitude;
  if (name == "movement") return ScorerKind::Movement;
  if (name == "platon") return ScorerKind::Platon;
  throw ConfigError("unknown scorer '" + name + "' (expected sensitivity, magnitude, movement or platon)");
}

namespace {

MatrixD& buffer_for(std::map<std::string, MatrixD>& buffers, const std::string& name, Index rows, Index cols) {
  MatrixD& b = buffers[name];
  if (b.rows() != rows || b.cols() != cols) b = MatrixD::Zero(rows, cols);
  return b;
}

}  // namespace

MatrixD alternative_scores(ScorerKind kind, const MatrixD& params, const MatrixD& grads, ImportanceState& state,
                           const std::string& name) {
  switch (kind) {
    case ScorerKind::Sensitivity: return sensitivity(params, grads);
    case ScorerKind::Magnitude: return magnitude(params);
    case ScorerKind::Movement: return movement(params, grads);
    case ScorerKind::Platon: {
      const MatrixD instant = sensitivity(params, grads);
      MatrixD& smoothed = buffer_for(state.score_ema, name, params.rows(), params.cols());
      MatrixD& uncertainty = buffer_for(state.uncertainty_ema, name, params.rows(), params.cols());
      ema_update(smoothed, instant, state.beta_ema);
      ema_update(uncertainty, (instant - smoothed).cwiseAbs(), state.beta_uncertainty);
      return platon_scores(smoothed, uncertainty);
    }
  }
  throw ConfigError("unknown scorer");
}

void ImportanceState::update(std::span<const ParamRef> params) {
  for (const auto& p : params) {
    if (!is_scored(p.role)) continue;
    const MatrixD& w = p.tensor.value();
    const MatrixD g = p.tensor.has_grad() ? p.tensor.grad() : MatrixD::Zero(w.rows(), w.cols());
    if (kind == ScorerKind::Platon) {
      alternative_scores(kind, w, g, *this, p.name);
      continue;
    }
    const MatrixD instant = alternative_scores(kind, w, g, *this, p.name);
    MatrixD& buffer = buffer_for(score_ema, p.name, w.rows(), w.cols());
    ema_update(buffer, instant, beta_ema);
  }
  ++updates;
}

MatrixD ImportanceState::effective_scores(const std::string& name) const {
  auto it = score_ema.find(name);
  if (it == score_ema.end()) throw ContractError("no importance scores recorded for '" + name + "'");
  if (kind != ScorerKind::Platon) return it->second;
  return platon_scores(it->second, uncertainty_ema.at(name));
}

// --- masks ------------------------------------------------------------------

MaskSet MaskSet::all_ones(const TransformerModel& model) {
  MaskSet m;
  for (const auto& [g, w] : group_widths(model)) {
    m.masks[g] = RowVectorD::Ones(w);
    m.original_width[g] = w;
  }
  return m;
}

Index MaskSet::kept(const GroupId& g) const {
  auto it = masks.find(g);
  if (it == masks.end()) throw ContractError("mask set has no group " + g.name());
  return static_cast<Index>((it->second.array() != 0.0).count());
}

bool MaskSet::all_ones() const {
  for (const auto& [g, m] : masks) {
    if ((m.array() != 1.0).any()) return false;
  }
  return true;
}

std::map<GroupId, RowVectorD> group_importance(const ImportanceState& state, std::span<const ParamRef> params) {
  std::map<GroupId, RowVectorD> out;
  for (const auto& p : params) {
    if (!is_scored(p.role)) continue;
    const Coupling c = coupling_for(p.role, p.layer);
    if (!c.cols) continue;
    const MatrixD scores = state.effective_scores(p.name);
    RowVectorD n = state.kind == ScorerKind::Movement ? RowVectorD(signed_column_importance(scores))
                                                      : RowVectorD(column_importance(scores));
    auto [it, inserted] = out.try_emplace(*c.cols, n);
    if (!inserted) {
      if (it->second.size() != n.size()) throw DimensionError("group " + c.cols->name() + ": member widths differ");
      it->second += n;
    }
  }
  return out;
}

MaskSet build_masks(const std::map<GroupId, RowVectorD>& importance, const std::map<GroupId, double>& ratios,
                    const std::map<GroupId, Index>& original_width, const MaskSet* previous) {
  MaskSet out;
  out.original_width = original_width;
  for (const auto& [g, width] : original_width) {
    auto imp = importance.find(g);
    if (imp == importance.end() || imp->second.size() == 0) {
      throw ContractError("build_masks: group " + g.name() + " has no importance scores");
    }
    if (imp->second.size() != width) throw DimensionError("build_masks: group " + g.name() + " width mismatch");
    auto r = ratios.find(g);
    if (r == ratios.end()) throw ContractError("build_masks: no ratio for group " + g.name());
    if (!(r->second > 0.0 && r->second <= 1.0)) throw ContractError("build_masks: ratio must lie in (0, 1]");
    const Index keep = kept_count(r->second, width);
    const RowVectorD* eligible = nullptr;
    if (previous != nullptr) {
      auto prev = previous->masks.find(g);
      if (prev != previous->masks.end()) eligible = &prev->second;
    }
    out.masks[g] = top_columns(imp->second, keep, eligible);
  }
  return out;
}

MatrixD element_mask(const ParamRef& param, const MaskSet& masks) {
  const Coupling c = coupling_for(param.role, param.layer);
  const Index rows = param.tensor.rows();
  const Index cols = param.tensor.cols();
  Eigen::VectorXd row_mask = Eigen::VectorXd::Ones(rows);
  RowVectorD col_mask = RowVectorD::Ones(cols);
  if (c.rows) {
    const RowVectorD& m = masks.masks.at(*c.rows);
    if (m.size() != rows) throw DimensionError("mask for " + c.rows->name() + " does not fit rows of " + param.name);
    row_mask = m.transpose();
  }
  if (c.cols) {
    const RowVectorD& m = masks.masks.at(*c.cols);
    if (m.size() != cols) throw DimensionError("mask for " + c.cols->name() + " does not fit columns of " + param.name);
    col_mask = m;
  }
  return row_mask * col_mask;
}

namespace {

void apply_to(const ParamRef& p, const MaskSet& masks, Adam* optimizer) {
  const MatrixD mask = element_mask(p, masks);
  Tensor t = p.tensor;
  t.mutable_value().array() *= mask.array();
  if (optimizer != nullptr) {
    auto it = optimizer->moments().find(p.name);
    if (it != optimizer->moments().end() && it->second.first.rows() == mask.rows() &&
        it->second.first.cols() == mask.cols()) {
      it->second.first.array() *= mask.array();
      it->second.second.array() *= mask.array();
    }
  }
}

}  // namespace

void apply_masks(TransformerModel& model, ProjectionSet& projections, const MaskSet& masks, Adam* optimizer) {
  for (const auto& p : model.parameters()) apply_to(p, masks, optimizer);
  for (const auto& p : projections.parameters()) apply_to(p, masks, optimizer);
  model.hidden_live = masks.masks.at({GroupKind::Hidden, -1});
}

void mask_gradients(std::span<const ParamRef> params, const MaskSet& masks) {
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    Tensor t = p.tensor;
    t.mutable_grad().array() *= element_mask(p, masks).array();
  }
}

}  // namespace homodistil::pruning
