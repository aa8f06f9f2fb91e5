#include "homodistil/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

namespace homodistil {

using pruning::GroupId;

namespace {

std::string describe(const LossBundle& b) {
  std::ostringstream s;
  s << "l_mlm=" << b.l_mlm << " d_kl=" << b.d_kl << " l_hidn=" << b.l_hidn << " l_emb=" << b.l_emb
    << " l_attn=" << b.l_attn << " l_total=" << b.l_total;
  return s.str();
}

bool finite(const LossBundle& b) {
  return std::isfinite(b.l_mlm) && std::isfinite(b.d_kl) && std::isfinite(b.l_hidn) && std::isfinite(b.l_emb) &&
         std::isfinite(b.l_attn) && std::isfinite(b.l_total);
}

[[noreturn]] void diverged(Index step, const std::string& detail) {
  throw DivergenceError("NaN/Inf detected at iteration " + std::to_string(step) + ": " + detail);
}

void zero_grads(std::span<const ParamRef> params) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

/// Loss terms of the student against the teacher with gradients accumulated
/// into the trainable parameters.
LossTerms loss_and_gradients(DistillState& s, const data::MLMBatch& batch) {
  const MaskedPositions positions = MaskedPositions::from_labels(batch.labels);
  try {
    ForwardOutput teacher_out;
    {
      ad::NoGrad<double> no_grad;
      teacher_out = forward(s.teacher, batch.token_ids, batch.pad_mask);
    }
    ad::Tape<double> tape;
    ad::Recording<double> recording(tape);
    const ForwardOutput student_out = forward(s.student, batch.token_ids, batch.pad_mask);
    LossTerms terms = distillation_losses(teacher_out, student_out, s.projections, positions, s.config.weights);
    if (!finite(terms.values)) diverged(s.step, describe(terms.values));
    tape.backward(terms.total);
    return terms;
  } catch (const NumericError& e) {
    diverged(s.step, e.what());
  }
}

std::map<GroupId, double> ratios_at(const DistillState& s, Index t) {
  return s.config.resolved_schedule().ratios(t, pruning::coupling_groups(static_cast<Index>(s.student.layers.size())));
}

void rebuild_masks(DistillState& s, Index next_t) {
  const auto params = s.trainable();
  const auto importance = pruning::group_importance(s.importance, params);
  const auto ratios = ratios_at(s, next_t);
  s.masks = pruning::build_masks(importance, ratios, s.widths, s.config.monotone_masks ? &s.masks : nullptr);
  pruning::apply_masks(s.student, s.projections, s.masks, &s.optimizer);
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ConfigError("warmup_fraction must lie in [0, 1)");
  if (iterations < 1) throw ConfigError("iterations must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(mask_prob > 0.0 && mask_prob < 1.0)) throw ConfigError("mask_prob must lie in (0, 1)");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(adam.eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (adam.weight_decay < 0.0 || adam.grad_clip < 0.0) throw ConfigError("weight_decay and grad_clip must be >= 0");
  if (!(beta_ema >= 0.0 && beta_ema < 1.0)) throw ConfigError("beta_ema must lie in [0, 1)");
  if (!(beta_uncertainty >= 0.0 && beta_uncertainty < 1.0)) throw ConfigError("beta_uncertainty must lie in [0, 1)");
  if (prune_interval < 1) throw ConfigError("prune_interval must be >= 1");
  weights.validate();
  resolved_schedule().base.validate();
}

pruning::GroupSchedules TrainConfig::resolved_schedule() const {
  pruning::GroupSchedules s = schedule;
  s.base.total = iterations;
  return s;
}

nlohmann::json MetricsRecord::to_json() const {
  nlohmann::json j;
  j["iteration"] = iteration;
  j["l_mlm"] = losses.l_mlm;
  j["d_kl"] = losses.d_kl;
  j["l_hidn"] = losses.l_hidn;
  j["l_emb"] = losses.l_emb;
  j["l_attn"] = losses.l_attn;
  j["l_total"] = losses.l_total;
  j["lr"] = learning_rate;
  j["grad_norm"] = grad_norm;
  nlohmann::json r = nlohmann::json::object();
  for (const auto& [g, v] : ratios) r[g.name()] = v;
  nlohmann::json k = nlohmann::json::object();
  for (const auto& [g, v] : kept) k[g.name()] = v;
  j["r"] = r;
  j["kept"] = k;
  if (wall_seconds) j["wall_seconds"] = *wall_seconds;
  return j;
}

std::vector<ParamRef> DistillState::trainable() const {
  auto params = student.parameters();
  for (auto& p : projections.parameters()) params.push_back(std::move(p));
  return params;
}

DistillState make_distill_state(const TransformerModel& teacher, const TrainConfig& config) {
  config.validate();
  DistillState s{config,
                 teacher.clone(),
                 clone_model(teacher),
                 ProjectionSet::identity(teacher.config.hidden_dim),
                 Adam(config.adam),
                 pruning::ImportanceState{},
                 {},
                 {},
                 0};
  s.importance.kind = config.scorer;
  s.importance.beta_ema = config.beta_ema;
  s.importance.beta_uncertainty = config.beta_uncertainty;
  s.masks = pruning::MaskSet::all_ones(s.student);
  s.widths = pruning::group_widths(s.student);
  return s;
}

void initial_prune(DistillState& s, const data::MLMBatch& batch) {
  const auto params = s.trainable();
  loss_and_gradients(s, batch);
  s.importance.update(params);
  zero_grads(params);
  const auto ratios = ratios_at(s, 0);
  s.masks = pruning::build_masks(pruning::group_importance(s.importance, params), ratios, s.widths);
  pruning::apply_masks(s.student, s.projections, s.masks, &s.optimizer);
}

MetricsRecord train_step(DistillState& s, const data::MLMBatch& batch) {
  const Index T = s.config.iterations;
  if (s.step >= T) throw ContractError("train_step: all " + std::to_string(T) + " iterations already run");

  MetricsRecord rec;
  rec.iteration = s.step;
  rec.ratios = ratios_at(s, s.step);
  for (const auto& [g, m] : s.masks.masks) rec.kept[g] = s.masks.kept(g);

  const auto params = s.trainable();
  const LossTerms terms = loss_and_gradients(s, batch);
  rec.losses = terms.values;

  pruning::mask_gradients(params, s.masks);
  const LinearWarmupDecay lr{s.config.learning_rate, s.config.warmup_fraction, T};
  rec.learning_rate = lr.at(s.step);
  rec.grad_norm = s.optimizer.step(params, rec.learning_rate);
  if (!std::isfinite(rec.grad_norm)) diverged(s.step, "gradient norm " + std::to_string(rec.grad_norm));
  for (const auto& p : params) {
    if (!p.tensor.value().allFinite()) diverged(s.step, "parameter " + p.name + " after update");
  }

  s.importance.update(params);
  const Index next = s.step + 1;
  if (next % s.config.prune_interval == 0 || next == T) rebuild_masks(s, next);
  zero_grads(params);
  s.step = next;
  return rec;
}

DistillResult distill(const TransformerModel& teacher, const TrainConfig& config, const data::Dataset& dataset,
                      const data::Vocabulary& vocab, const MetricsSink& sink) {
  if (teacher.config.vocab_size != vocab.size()) {
    throw InputError("teacher vocabulary size " + std::to_string(teacher.config.vocab_size) +
                     " differs from the corpus vocabulary size " + std::to_string(vocab.size()));
  }
  DistillResult result{make_distill_state(teacher, config), {}};
  DistillState& s = result.state;
  const auto start = std::chrono::steady_clock::now();
  const std::uint64_t batch_seed = data::derive_seed(config.seed, streams::kTrainBatches);

  const auto initial = ratios_at(s, 0);
  if (std::any_of(initial.begin(), initial.end(), [](const auto& kv) { return kv.second < 1.0; })) {
    initial_prune(s, dataset.batch(data::derive_seed(config.seed, streams::kInitialScoring), 0, config.batch_size,
                                   vocab, config.mask_prob));
  }
  for (Index t = 0; t < config.iterations; ++t) {
    MetricsRecord rec = train_step(s, dataset.batch(batch_seed, t, config.batch_size, vocab, config.mask_prob));
    if (config.log_wallclock) {
      rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
    if (sink) sink(rec);
    result.log.push_back(std::move(rec));
  }
  return result;
}

TransformerModel pretrain_teacher(const ModelConfig& model_config, const TrainConfig& config,
                                  const data::Dataset& dataset, const data::Vocabulary& vocab,
                                  const MetricsSink& sink) {
  config.validate();
  if (model_config.vocab_size != vocab.size()) {
    throw ConfigError("model vocab_size " + std::to_string(model_config.vocab_size) +
                      " differs from the vocabulary size " + std::to_string(vocab.size()));
  }
  TransformerModel model =
      TransformerModel::initialize(model_config, data::derive_seed(config.seed, streams::kModelInit));
  Adam optimizer(config.adam);
  const LinearWarmupDecay lr{config.learning_rate, config.warmup_fraction, config.iterations};
  const std::uint64_t batch_seed = data::derive_seed(config.seed, streams::kTrainBatches);
  const auto params = model.parameters();
  const auto start = std::chrono::steady_clock::now();

  for (Index t = 0; t < config.iterations; ++t) {
    const data::MLMBatch batch = dataset.batch(batch_seed, t, config.batch_size, vocab, config.mask_prob);
    MetricsRecord rec;
    rec.iteration = t;
    try {
      ad::Tape<double> tape;
      ad::Recording<double> recording(tape);
      const ForwardOutput out = forward(model, batch.token_ids, batch.pad_mask);
      const Tensor loss = mlm_loss(out.logits, MaskedPositions::from_labels(batch.labels));
      rec.losses.l_mlm = loss.item();
      rec.losses.l_total = loss.item();
      if (!std::isfinite(rec.losses.l_mlm)) diverged(t, describe(rec.losses));
      tape.backward(loss);
    } catch (const NumericError& e) {
      diverged(t, e.what());
    }
    rec.learning_rate = lr.at(t);
    rec.grad_norm = optimizer.step(params, rec.learning_rate);
    zero_grads(params);
    if (config.log_wallclock) {
      rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
    if (sink) sink(rec);
  }
  return model;
}

double evaluate_mlm(const TransformerModel& model, std::span<const data::MLMBatch> batches) {
  ad::NoGrad<double> no_grad;
  double weighted = 0.0;
  double count = 0.0;
  for (const auto& batch : batches) {
    const MaskedPositions positions = MaskedPositions::from_labels(batch.labels);
    if (positions.empty()) continue;
    const ForwardOutput out = forward(model, batch.token_ids, batch.pad_mask);
    const double n = static_cast<double>(positions.rows.size());
    weighted += mlm_loss(out.logits, positions).item() * n;
    count += n;
  }
  if (count == 0.0) throw InputError("evaluate_mlm: no labelled positions");
  return weighted / count;
}

double evaluate_kl(const TransformerModel& teacher, const TransformerModel& student,
                   std::span<const data::MLMBatch> batches, double temperature) {
  ad::NoGrad<double> no_grad;
  double weighted = 0.0;
  double count = 0.0;
  for (const auto& batch : batches) {
    std::vector<Index> rows;
    for (Index b = 0; b < batch.pad_mask.rows(); ++b) {
      for (Index t = 0; t < batch.pad_mask.cols(); ++t) {
        if (!batch.pad_mask(b, t)) rows.push_back(b * batch.pad_mask.cols() + t);
      }
    }
    if (rows.empty()) continue;
    const ForwardOutput t_out = forward(teacher, batch.token_ids, batch.pad_mask);
    const ForwardOutput s_out = forward(student, batch.token_ids, batch.pad_mask);
    const double n = static_cast<double>(rows.size());
    weighted += kd_loss(s_out.logits, t_out.logits, temperature, rows).item() * n;
    count += n;
  }
  if (count == 0.0) throw InputError("evaluate_kl: no positions");
  return weighted / count;
}

}  // namespace homodistil
