#include "homodistil/model.hpp"

#include <cmath>
#include <numeric>
#include <random>

namespace homodistil {

namespace {

constexpr double kInitStd = 0.02;
// Large finite negative so padded keys vanish after the max-shifted exp.
constexpr double kMaskedScore = -1e30;

MatrixD truncated_normal(Index rows, Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  MatrixD m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) {
    double z = normal(rng);
    while (std::abs(z) > 2.0) z = normal(rng);
    m.data()[i] = z * kInitStd;
  }
  return m;
}

Tensor param(MatrixD m) { return Tensor::parameter(std::move(m)); }

Tensor copy_param(const Tensor& t) { return Tensor::parameter(t.value()); }

ModelConfig bert_like(Index hidden, Index ffn, Index heads) {
  ModelConfig c;
  c.vocab_size = 30522;
  c.max_seq_len = 512;
  c.num_layers = 12;
  c.hidden_dim = hidden;
  c.ffn_dim = ffn;
  c.num_heads = heads;
  return c;
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size <= 0 || max_seq_len <= 0 || num_layers <= 0 || hidden_dim <= 0 || ffn_dim <= 0 || num_heads <= 0) {
    throw ConfigError("model config: all sizes must be positive");
  }
  if (hidden_dim % num_heads != 0) {
    throw ConfigError("model config: hidden_dim " + std::to_string(hidden_dim) + " not divisible by num_heads " +
                      std::to_string(num_heads));
  }
  if (!(layernorm_eps > 0)) throw ConfigError("model config: layernorm_eps must be positive");
}

namespace presets {
ModelConfig bert_base() { return bert_like(768, 3072, 12); }
ModelConfig homobert_base() { return bert_like(576, 2304, 9); }
ModelConfig homobert_small() { return bert_like(256, 1024, 4); }
ModelConfig homobert_xsmall() { return bert_like(240, 960, 4); }
ModelConfig homobert_tiny() { return bert_like(224, 896, 4); }
}  // namespace presets

const char* to_string(ParamRole role) {
  switch (role) {
    case ParamRole::TokenEmbedding: return "token_embedding";
    case ParamRole::PositionEmbedding: return "position_embedding";
    case ParamRole::EmbeddingNormScale: return "embedding_norm_scale";
    case ParamRole::EmbeddingNormShift: return "embedding_norm_shift";
    case ParamRole::Query: return "query";
    case ParamRole::QueryBias: return "query_bias";
    case ParamRole::Key: return "key";
    case ParamRole::KeyBias: return "key_bias";
    case ParamRole::Value: return "value";
    case ParamRole::ValueBias: return "value_bias";
    case ParamRole::AttentionOutput: return "attention_output";
    case ParamRole::AttentionOutputBias: return "attention_output_bias";
    case ParamRole::AttentionNormScale: return "attention_norm_scale";
    case ParamRole::AttentionNormShift: return "attention_norm_shift";
    case ParamRole::FfnInput: return "ffn_input";
    case ParamRole::FfnInputBias: return "ffn_input_bias";
    case ParamRole::FfnOutput: return "ffn_output";
    case ParamRole::FfnOutputBias: return "ffn_output_bias";
    case ParamRole::FfnNormScale: return "ffn_norm_scale";
    case ParamRole::FfnNormShift: return "ffn_norm_shift";
    case ParamRole::MlmBias: return "mlm_bias";
    case ParamRole::HiddenProjection: return "hidden_projection";
    case ParamRole::EmbeddingProjection: return "embedding_projection";
  }
  return "unknown";
}

Index HeadLayout::qk_total() const { return std::accumulate(qk_widths.begin(), qk_widths.end(), Index{0}); }
Index HeadLayout::v_total() const { return std::accumulate(v_widths.begin(), v_widths.end(), Index{0}); }

TransformerModel TransformerModel::initialize(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const Index d = config.hidden_dim;
  const Index f = config.ffn_dim;

  TransformerModel m;
  m.config = config;
  m.token_embedding = param(truncated_normal(config.vocab_size, d, rng));
  m.position_embedding = param(truncated_normal(config.max_seq_len, d, rng));
  m.emb_ln_gamma = param(MatrixD::Ones(1, d));
  m.emb_ln_beta = param(MatrixD::Zero(1, d));
  for (Index l = 0; l < config.num_layers; ++l) {
    EncoderLayer layer;
    layer.wq = param(truncated_normal(d, d, rng));
    layer.bq = param(MatrixD::Zero(1, d));
    layer.wk = param(truncated_normal(d, d, rng));
    layer.bk = param(MatrixD::Zero(1, d));
    layer.wv = param(truncated_normal(d, d, rng));
    layer.bv = param(MatrixD::Zero(1, d));
    layer.wo = param(truncated_normal(d, d, rng));
    layer.bo = param(MatrixD::Zero(1, d));
    layer.ln1_gamma = param(MatrixD::Ones(1, d));
    layer.ln1_beta = param(MatrixD::Zero(1, d));
    layer.w_in = param(truncated_normal(d, f, rng));
    layer.b_in = param(MatrixD::Zero(1, f));
    layer.w_out = param(truncated_normal(f, d, rng));
    layer.b_out = param(MatrixD::Zero(1, d));
    layer.ln2_gamma = param(MatrixD::Ones(1, d));
    layer.ln2_beta = param(MatrixD::Zero(1, d));
    layer.heads.qk_widths.assign(static_cast<std::size_t>(config.num_heads), config.head_dim());
    layer.heads.v_widths.assign(static_cast<std::size_t>(config.num_heads), config.head_dim());
    m.layers.push_back(std::move(layer));
  }
  m.mlm_bias = param(MatrixD::Zero(1, config.vocab_size));
  m.attention_scale = 1.0 / std::sqrt(static_cast<double>(config.head_dim()));
  m.hidden_live = RowVectorD::Ones(d);
  return m;
}

TransformerModel TransformerModel::clone() const {
  TransformerModel m;
  m.config = config;
  m.token_embedding = copy_param(token_embedding);
  m.position_embedding = copy_param(position_embedding);
  m.emb_ln_gamma = copy_param(emb_ln_gamma);
  m.emb_ln_beta = copy_param(emb_ln_beta);
  for (const auto& src : layers) {
    EncoderLayer layer;
    layer.wq = copy_param(src.wq);
    layer.bq = copy_param(src.bq);
    layer.wk = copy_param(src.wk);
    layer.bk = copy_param(src.bk);
    layer.wv = copy_param(src.wv);
    layer.bv = copy_param(src.bv);
    layer.wo = copy_param(src.wo);
    layer.bo = copy_param(src.bo);
    layer.ln1_gamma = copy_param(src.ln1_gamma);
    layer.ln1_beta = copy_param(src.ln1_beta);
    layer.w_in = copy_param(src.w_in);
    layer.b_in = copy_param(src.b_in);
    layer.w_out = copy_param(src.w_out);
    layer.b_out = copy_param(src.b_out);
    layer.ln2_gamma = copy_param(src.ln2_gamma);
    layer.ln2_beta = copy_param(src.ln2_beta);
    layer.heads = src.heads;
    m.layers.push_back(std::move(layer));
  }
  m.mlm_bias = copy_param(mlm_bias);
  m.attention_scale = attention_scale;
  m.hidden_live = hidden_live;
  return m;
}

std::vector<ParamRef> TransformerModel::parameters() const {
  std::vector<ParamRef> out;
  out.push_back({"embeddings.token", token_embedding, ParamRole::TokenEmbedding, -1});
  out.push_back({"embeddings.position", position_embedding, ParamRole::PositionEmbedding, -1});
  out.push_back({"embeddings.norm.gamma", emb_ln_gamma, ParamRole::EmbeddingNormScale, -1});
  out.push_back({"embeddings.norm.beta", emb_ln_beta, ParamRole::EmbeddingNormShift, -1});
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& L = layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    const int li = static_cast<int>(l);
    out.push_back({p + "attention.query.weight", L.wq, ParamRole::Query, li});
    out.push_back({p + "attention.query.bias", L.bq, ParamRole::QueryBias, li});
    out.push_back({p + "attention.key.weight", L.wk, ParamRole::Key, li});
    out.push_back({p + "attention.key.bias", L.bk, ParamRole::KeyBias, li});
    out.push_back({p + "attention.value.weight", L.wv, ParamRole::Value, li});
    out.push_back({p + "attention.value.bias", L.bv, ParamRole::ValueBias, li});
    out.push_back({p + "attention.output.weight", L.wo, ParamRole::AttentionOutput, li});
    out.push_back({p + "attention.output.bias", L.bo, ParamRole::AttentionOutputBias, li});
    out.push_back({p + "attention.norm.gamma", L.ln1_gamma, ParamRole::AttentionNormScale, li});
    out.push_back({p + "attention.norm.beta", L.ln1_beta, ParamRole::AttentionNormShift, li});
    out.push_back({p + "ffn.input.weight", L.w_in, ParamRole::FfnInput, li});
    out.push_back({p + "ffn.input.bias", L.b_in, ParamRole::FfnInputBias, li});
    out.push_back({p + "ffn.output.weight", L.w_out, ParamRole::FfnOutput, li});
    out.push_back({p + "ffn.output.bias", L.b_out, ParamRole::FfnOutputBias, li});
    out.push_back({p + "ffn.norm.gamma", L.ln2_gamma, ParamRole::FfnNormScale, li});
    out.push_back({p + "ffn.norm.beta", L.ln2_beta, ParamRole::FfnNormShift, li});
  }
  out.push_back({"mlm.bias", mlm_bias, ParamRole::MlmBias, -1});
  return out;
}

bool TransformerModel::hidden_fully_live() const { return (hidden_live.array() != 0.0).all(); }

namespace {

/// Multi-head self-attention for one sequence block of rows.
struct AttentionResult {
  Tensor context;  // L x v_total
  Tensor probs;    // L x L, averaged over heads
};

AttentionResult attend(const Tensor& q, const Tensor& k, const Tensor& v, const HeadLayout& heads, double scale,
                       const Tensor* key_mask) {
  const Index len = q.rows();
  std::vector<Tensor> contexts;
  Tensor prob_sum;
  Index qk_off = 0;
  Index v_off = 0;
  for (std::size_t h = 0; h < heads.qk_widths.size(); ++h) {
    const Index qk_w = heads.qk_widths[h];
    const Index v_w = heads.v_widths[h];
    Tensor scores;
    if (qk_w > 0) {
      Tensor qh = ad::slice_cols(q, qk_off, qk_w);
      Tensor kh = ad::slice_cols(k, qk_off, qk_w);
      scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), scale);
    } else {
      // A head whose query/key columns were all pruned scores every key 0.
      scores = Tensor::constant(MatrixD::Zero(len, len));
    }
    if (key_mask != nullptr) scores = ad::add(scores, *key_mask);
    Tensor probs = ad::softmax(scores, 1);
    if (v_w > 0) contexts.push_back(ad::matmul(probs, ad::slice_cols(v, v_off, v_w)));
    prob_sum = prob_sum ? ad::add(prob_sum, probs) : probs;
    qk_off += qk_w;
    v_off += v_w;
  }
  if (contexts.empty()) throw DimensionError("attention: every value head is empty");
  AttentionResult r;
  r.context = ad::concat_cols(std::span<const Tensor>(contexts));
  r.probs = ad::scale(prob_sum, 1.0 / static_cast<double>(heads.qk_widths.size()));
  return r;
}

}  // namespace

ForwardOutput forward(const TransformerModel& model, const TokenMatrix& tokens, const PadMask& pad) {
  const ModelConfig& cfg = model.config;
  const Index batch = tokens.rows();
  const Index len = tokens.cols();
  if (batch <= 0 || len <= 0) throw InputError("forward: empty token batch");
  if (len > cfg.max_seq_len) {
    throw InputError("forward: sequence length " + std::to_string(len) + " exceeds max_seq_len " +
                     std::to_string(cfg.max_seq_len));
  }
  if (pad.size() != 0 && (pad.rows() != batch || pad.cols() != len)) throw InputError("forward: pad mask shape");

  std::vector<Index> ids(static_cast<std::size_t>(batch * len));
  std::vector<Index> pos(ids.size());
  for (Index b = 0; b < batch; ++b) {
    for (Index t = 0; t < len; ++t) {
      const std::int32_t id = tokens(b, t);
      if (id < 0 || id >= cfg.vocab_size) {
        throw InputError("forward: token id " + std::to_string(id) + " outside vocabulary of " +
                         std::to_string(cfg.vocab_size));
      }
      ids[static_cast<std::size_t>(b * len + t)] = id;
      pos[static_cast<std::size_t>(b * len + t)] = t;
    }
  }

  // Per-sequence additive key masks (only for sequences that have padding).
  std::vector<Tensor> key_masks(static_cast<std::size_t>(batch));
  if (pad.size() != 0) {
    for (Index b = 0; b < batch; ++b) {
      if (!pad.row(b).any()) continue;
      if (pad.row(b).all()) throw InputError("forward: sequence is entirely padding");
      MatrixD m = MatrixD::Zero(len, len);
      for (Index t = 0; t < len; ++t) {
        if (pad(b, t)) m.col(t).setConstant(kMaskedScore);
      }
      key_masks[static_cast<std::size_t>(b)] = Tensor::constant(std::move(m));
    }
  }

  const RowVectorD* live = model.hidden_fully_live() ? nullptr : &model.hidden_live;
  const double eps = cfg.layernorm_eps;

  ForwardOutput out;
  out.batch_size = batch;
  out.seq_len = len;
  Tensor x = ad::add(ad::gather_rows(model.token_embedding, std::span<const Index>(ids)),
                     ad::gather_rows(model.position_embedding, std::span<const Index>(pos)));
  Tensor h = ad::layer_norm(x, model.emb_ln_gamma, model.emb_ln_beta, eps, live);
  out.embedding_output = h;

  for (const auto& layer : model.layers) {
    Tensor q = ad::add_row(ad::matmul(h, layer.wq), layer.bq);
    Tensor k = ad::add_row(ad::matmul(h, layer.wk), layer.bk);
    Tensor v = ad::add_row(ad::matmul(h, layer.wv), layer.bv);
    std::vector<Tensor> contexts;
    std::vector<Tensor> maps;
    for (Index b = 0; b < batch; ++b) {
      const Tensor* mask = key_masks[static_cast<std::size_t>(b)] ? &key_masks[static_cast<std::size_t>(b)] : nullptr;
      AttentionResult r = batch == 1 ? attend(q, k, v, layer.heads, model.attention_scale, mask)
                                     : attend(ad::slice_rows(q, b * len, len), ad::slice_rows(k, b * len, len),
                                              ad::slice_rows(v, b * len, len), layer.heads, model.attention_scale, mask);
      contexts.push_back(std::move(r.context));
      maps.push_back(std::move(r.probs));
    }
    Tensor context = batch == 1 ? contexts.front() : ad::concat_rows(std::span<const Tensor>(contexts));
    Tensor attn_map = batch == 1 ? maps.front() : ad::concat_rows(std::span<const Tensor>(maps));
    Tensor attn_out = ad::add_row(ad::matmul(context, layer.wo), layer.bo);
    Tensor h1 = ad::layer_norm(ad::add(h, attn_out), layer.ln1_gamma, layer.ln1_beta, eps, live);
    Tensor inner = ad::gelu(ad::add_row(ad::matmul(h1, layer.w_in), layer.b_in));
    Tensor ffn = ad::add_row(ad::matmul(inner, layer.w_out), layer.b_out);
    h = ad::layer_norm(ad::add(h1, ffn), layer.ln2_gamma, layer.ln2_beta, eps, live);
    out.hidden_states.push_back(h);
    out.attention_maps.push_back(attn_map);
  }
  out.logits = ad::add_row(ad::matmul(h, ad::transpose(model.token_embedding)), model.mlm_bias);
  return out;
}

ForwardOutput forward(const TransformerModel& model, const std::vector<std::int32_t>& tokens,
                      const std::vector<bool>& pad) {
  TokenMatrix t(1, static_cast<Index>(tokens.size()));
  for (std::size_t i = 0; i < tokens.size(); ++i) t(0, static_cast<Index>(i)) = tokens[i];
  PadMask p;
  if (!pad.empty()) {
    if (pad.size() != tokens.size()) throw InputError("forward: pad mask length differs from token count");
    p.resize(1, static_cast<Index>(pad.size()));
    for (std::size_t i = 0; i < pad.size(); ++i) p(0, static_cast<Index>(i)) = pad[i];
  }
  return forward(model, t, p);
}

TransformerModel clone_model(const TransformerModel& teacher) { return teacher.clone(); }

ParameterCount count_parameters(const ModelConfig& c) {
  const std::int64_t v = c.vocab_size, p = c.max_seq_len, d = c.hidden_dim, f = c.ffn_dim;
  ParameterCount n;
  n.embedding = v * d + p * d + 2 * d + v;
  const std::int64_t per_layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d;
  n.backbone = per_layer * c.num_layers;
  n.total = n.embedding + n.backbone;
  return n;
}

ParameterCount count_parameters(const TransformerModel& model) {
  ParameterCount n;
  for (const auto& p : model.parameters()) {
    (p.layer < 0 ? n.embedding : n.backbone) += p.tensor.size();
  }
  n.total = n.embedding + n.backbone;
  return n;
}

}  // namespace homodistil
