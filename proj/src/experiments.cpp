#include "homodistil/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace homodistil {

using pruning::GroupId;
using pruning::GroupKind;

namespace {

std::vector<Index> live_indices(const RowVectorD& mask) {
  std::vector<Index> idx;
  for (Index i = 0; i < mask.size(); ++i) {
    if (mask(i) != 0.0) idx.push_back(i);
  }
  return idx;
}

const RowVectorD& group_mask(const pruning::MaskSet& masks, const GroupId& g) {
  auto it = masks.masks.find(g);
  if (it == masks.masks.end()) throw ContractError("compact: mask set has no group " + g.name());
  return it->second;
}

Tensor take(const Tensor& t, const std::vector<Index>* rows, const std::vector<Index>* cols) {
  const MatrixD& v = t.value();
  MatrixD out;
  if (rows != nullptr && cols != nullptr) {
    out = v(*rows, *cols);
  } else if (rows != nullptr) {
    out = v(*rows, Eigen::all);
  } else if (cols != nullptr) {
    out = v(Eigen::all, *cols);
  } else {
    out = v;
  }
  return Tensor::parameter(std::move(out));
}

std::vector<Index> shrink_heads(const std::vector<Index>& widths, const std::vector<Index>& kept) {
  std::vector<Index> out;
  Index off = 0;
  for (Index w : widths) {
    out.push_back(std::count_if(kept.begin(), kept.end(), [&](Index i) { return i >= off && i < off + w; }));
    off += w;
  }
  return out;
}

std::string format_fraction(double f) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << f;
  return s.str();
}

}  // namespace

TransformerModel compact_model(const TransformerModel& masked, const pruning::MaskSet& masks) {
  for (const auto& p : masked.parameters()) {
    const MatrixD m = pruning::element_mask(p, masks);
    const MatrixD& v = p.tensor.value();
    for (Index i = 0; i < v.size(); ++i) {
      if (m.data()[i] == 0.0 && v.data()[i] != 0.0) {
        throw IntegrityError("parameter " + p.name + " holds a nonzero value at masked entry " + std::to_string(i));
      }
    }
  }

  const auto hidden = live_indices(group_mask(masks, GroupId{GroupKind::Hidden, -1}));
  TransformerModel c;
  c.config = masked.config;
  c.config.hidden_dim = static_cast<Index>(hidden.size());
  c.attention_scale = masked.attention_scale;
  c.token_embedding = take(masked.token_embedding, nullptr, &hidden);
  c.position_embedding = take(masked.position_embedding, nullptr, &hidden);
  c.emb_ln_gamma = take(masked.emb_ln_gamma, nullptr, &hidden);
  c.emb_ln_beta = take(masked.emb_ln_beta, nullptr, &hidden);
  for (std::size_t l = 0; l < masked.layers.size(); ++l) {
    const int li = static_cast<int>(l);
    const EncoderLayer& src = masked.layers[l];
    const auto qk = live_indices(group_mask(masks, {GroupKind::QueryKey, li}));
    const auto vo = live_indices(group_mask(masks, {GroupKind::ValueOutput, li}));
    const auto ffn = live_indices(group_mask(masks, {GroupKind::FfnInner, li}));
    EncoderLayer dst;
    dst.wq = take(src.wq, &hidden, &qk);
    dst.bq = take(src.bq, nullptr, &qk);
    dst.wk = take(src.wk, &hidden, &qk);
    dst.bk = take(src.bk, nullptr, &qk);
    dst.wv = take(src.wv, &hidden, &vo);
    dst.bv = take(src.bv, nullptr, &vo);
    dst.wo = take(src.wo, &vo, &hidden);
    dst.bo = take(src.bo, nullptr, &hidden);
    dst.ln1_gamma = take(src.ln1_gamma, nullptr, &hidden);
    dst.ln1_beta = take(src.ln1_beta, nullptr, &hidden);
    dst.w_in = take(src.w_in, &hidden, &ffn);
    dst.b_in = take(src.b_in, nullptr, &ffn);
    dst.w_out = take(src.w_out, &ffn, &hidden);
    dst.b_out = take(src.b_out, nullptr, &hidden);
    dst.ln2_gamma = take(src.ln2_gamma, nullptr, &hidden);
    dst.ln2_beta = take(src.ln2_beta, nullptr, &hidden);
    dst.heads.qk_widths = shrink_heads(src.heads.qk_widths, qk);
    dst.heads.v_widths = shrink_heads(src.heads.v_widths, vo);
    if (l == 0) c.config.ffn_dim = static_cast<Index>(ffn.size());
    c.layers.push_back(std::move(dst));
  }
  c.mlm_bias = take(masked.mlm_bias, nullptr, nullptr);
  c.hidden_live = RowVectorD::Ones(static_cast<Index>(hidden.size()));
  return c;
}

bool ScheduleComparison::ordering_holds() const {
  const ScheduleRun* single = nullptr;
  for (const auto& r : runs) {
    if (r.end_fraction == 0.0) single = &r;
  }
  if (single == nullptr || single->log.empty()) return false;
  const double initial_single = single->log.front().losses.d_kl;
  bool any_iterative = false;
  for (const auto& r : runs) {
    if (r.end_fraction == 0.0) continue;
    any_iterative = true;
    if (r.log.empty() || r.log.front().losses.d_kl > 1e-6) return false;
    const std::size_t window = std::max<std::size_t>(1, r.log.size() / 10);
    double early_max = 0.0;
    for (std::size_t i = 0; i < window; ++i) early_max = std::max(early_max, r.log[i].losses.d_kl);
    if (!(initial_single > early_max)) return false;
  }
  return any_iterative;
}

const ScheduleRun& ScheduleComparison::run(const std::string& id) const {
  for (const auto& r : runs) {
    if (r.run_id == id) return r;
  }
  throw ContractError("no schedule run '" + id + "'");
}

std::string schedule_run_id(double end_fraction) {
  return end_fraction == 0.0 ? "single_shot" : "tf_" + format_fraction(end_fraction);
}

ScheduleComparison compare_schedules(const TransformerModel& teacher, const TrainConfig& config,
                                     const std::vector<double>& end_fractions, const data::Dataset& dataset,
                                     const data::Vocabulary& vocab) {
  if (end_fractions.empty()) throw ConfigError("compare-schedules needs at least one end fraction");
  const auto heldout = dataset.heldout_batches(data::derive_seed(config.seed, streams::kHeldout), config.batch_size,
                                               vocab, config.mask_prob);
  ScheduleComparison out;
  for (double f : end_fractions) {
    if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("end fractions must lie in [0, 1]");
    TrainConfig c = config;
    c.schedule.per_group = false;
    c.schedule.base.start = 0;
    c.schedule.base.end = static_cast<Index>(std::llround(f * static_cast<double>(c.iterations)));
    DistillResult result = distill(teacher, c, dataset, vocab);
    ScheduleRun run;
    run.run_id = schedule_run_id(f);
    run.end_fraction = f;
    run.log = std::move(result.log);
    run.heldout_mlm = evaluate_mlm(result.state.student, heldout);
    out.runs.push_back(std::move(run));
  }
  return out;
}

void write_comparison_csv(const ScheduleComparison& comparison, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const GroupId hidden{GroupKind::Hidden, -1};
  std::ofstream curves(dir / "curves.csv");
  if (!curves) throw InputError("cannot write " + (dir / "curves.csv").string());
  curves << std::setprecision(17);
  curves << "run_id,iteration,d_kl,r_t\n";
  for (const auto& r : comparison.runs) {
    for (const auto& rec : r.log) {
      curves << r.run_id << ',' << rec.iteration << ',' << rec.losses.d_kl << ',' << rec.ratios.at(hidden) << '\n';
    }
  }

  std::ofstream summary(dir / "summary.csv");
  if (!summary) throw InputError("cannot write " + (dir / "summary.csv").string());
  summary << std::setprecision(17);
  summary << "run_id,end_fraction,initial_d_kl,max_d_kl_first_10pct,final_d_kl,heldout_mlm\n";
  for (const auto& r : comparison.runs) {
    const std::size_t window = std::max<std::size_t>(1, r.log.size() / 10);
    double early_max = 0.0;
    for (std::size_t i = 0; i < window && i < r.log.size(); ++i) early_max = std::max(early_max, r.log[i].losses.d_kl);
    summary << r.run_id << ',' << format_fraction(r.end_fraction) << ',' << (r.log.empty() ? 0.0 : r.log.front().losses.d_kl) << ','
            << early_max << ',' << (r.log.empty() ? 0.0 : r.log.back().losses.d_kl) << ',' << r.heldout_mlm << '\n';
  }
}

}  // namespace homodistil
