#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "homodistil/numerics/ops.hpp"
#include "homodistil/tokens.hpp"

namespace homodistil {

using ad::Index;
using ad::MatrixD;
using ad::RowVectorD;
using ad::Tensor;

struct ModelConfig {
  Index vocab_size = 128;
  Index max_seq_len = 32;
  Index num_layers = 2;
  Index hidden_dim = 32;
  Index ffn_dim = 128;
  Index num_heads = 2;
  double layernorm_eps = 1e-12;

  /// Throws ConfigError when a field is out of range or the hidden width is
  /// not divisible by the head count.
  void validate() const;
  Index head_dim() const { return hidden_dim / num_heads; }
  bool operator==(const ModelConfig&) const = default;
};

/// Architecture presets of the teacher and the published student sizes
/// (vocab 30522, 512 positions, 12 layers).
namespace presets {
ModelConfig bert_base();
ModelConfig homobert_base();
ModelConfig homobert_small();
ModelConfig homobert_xsmall();
ModelConfig homobert_tiny();
}  // namespace presets

enum class ParamRole {
  TokenEmbedding,
  PositionEmbedding,
  EmbeddingNormScale,
  EmbeddingNormShift,
  Query,
  QueryBias,
  Key,
  KeyBias,
  Value,
  ValueBias,
  AttentionOutput,
  AttentionOutputBias,
  AttentionNormScale,
  AttentionNormShift,
  FfnInput,
  FfnInputBias,
  FfnOutput,
  FfnOutputBias,
  FfnNormScale,
  FfnNormShift,
  MlmBias,
  HiddenProjection,     // distillation-only, student side
  EmbeddingProjection,  // distillation-only, student side
};

const char* to_string(ParamRole role);

/// Non-owning view of one model parameter. `tensor` shares the node with
/// the model, so mutating its value mutates the model.
struct ParamRef {
  std::string name;
  Tensor tensor;
  ParamRole role;
  int layer = -1;  // -1 for embedding/head parameters
};

/// Column widths of each attention head. A fresh model has every head at
/// hidden_dim / num_heads; compacted models may have uneven (even empty)
/// heads.
struct HeadLayout {
  std::vector<Index> qk_widths;
  std::vector<Index> v_widths;

  Index qk_total() const;
  Index v_total() const;
  bool operator==(const HeadLayout&) const = default;
};

struct EncoderLayer {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln1_gamma, ln1_beta;
  Tensor w_in, b_in, w_out, b_out;
  Tensor ln2_gamma, ln2_beta;
  HeadLayout heads;
};

/// BERT-style post-layernorm encoder with learned absolute positions and an
/// MLM head tied to the token embedding table.
///
/// Weight matrices are stored input-major (d_in x d_out) so that a column is
/// one output neuron. The model is move-only; use clone() for a deep copy.
struct TransformerModel {
  ModelConfig config;
  Tensor token_embedding;     // vocab x d
  Tensor position_embedding;  // max_seq_len x d
  Tensor emb_ln_gamma, emb_ln_beta;
  std::vector<EncoderLayer> layers;
  Tensor mlm_bias;  // 1 x vocab
  /// 1/sqrt(head width) of the architecture the model was created with;
  /// kept fixed when heads are narrowed.
  double attention_scale = 1.0;
  /// 0/1 over the hidden dimension; layernorm statistics use live columns
  /// only.
  RowVectorD hidden_live;

  TransformerModel() = default;
  TransformerModel(TransformerModel&&) = default;
  TransformerModel& operator=(TransformerModel&&) = default;
  TransformerModel(const TransformerModel&) = delete;
  TransformerModel& operator=(const TransformerModel&) = delete;

  /// Truncated-normal (sigma 0.02, cut at 2 sigma) weights, zero biases,
  /// unit layernorm scales. Same seed and config give identical weights.
  static TransformerModel initialize(const ModelConfig& config, std::uint64_t seed);

  /// Deep copy. The copy shares no storage with this model.
  TransformerModel clone() const;

  /// Every parameter in a fixed order.
  std::vector<ParamRef> parameters() const;

  bool hidden_fully_live() const;
};

struct ForwardOutput {
  Tensor logits;                      // (B*L) x vocab
  Tensor embedding_output;            // (B*L) x d
  std::vector<Tensor> hidden_states;  // K x [(B*L) x d]
  /// Head-averaged attention probabilities; sequence b occupies rows
  /// [b*L, (b+1)*L). K x [(B*L) x L].
  std::vector<Tensor> attention_maps;
  Index batch_size = 0;
  Index seq_len = 0;
};

/// Runs the encoder over a batch. Padded key positions receive no attention.
/// Records onto the active tape, if any.
ForwardOutput forward(const TransformerModel& model, const TokenMatrix& tokens, const PadMask& pad);

/// Single-sequence convenience overload.
ForwardOutput forward(const TransformerModel& model, const std::vector<std::int32_t>& tokens,
                      const std::vector<bool>& pad = {});

TransformerModel clone_model(const TransformerModel& teacher);

struct ParameterCount {
  std::int64_t embedding = 0;  // token + position tables, embedding layernorm, MLM bias
  std::int64_t backbone = 0;   // encoder layers
  std::int64_t total = 0;
};

/// Closed-form count for a dense model of this configuration.
ParameterCount count_parameters(const ModelConfig& config);
/// Count over the tensors actually held (matches the closed form for
/// uncompacted models).
ParameterCount count_parameters(const TransformerModel& model);

}  // namespace homodistil
