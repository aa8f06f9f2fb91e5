#pragma once

// Small models, batches and corpora shared by the test binaries.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "homodistil/data.hpp"
#include "homodistil/model.hpp"

namespace homodistil::testing {

inline ModelConfig toy_config(Index layers = 2, Index d = 8, Index heads = 2, Index vocab = 32, Index ffn = 16,
                              Index max_len = 8) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.max_seq_len = max_len;
  c.num_layers = layers;
  c.hidden_dim = d;
  c.ffn_dim = ffn;
  c.num_heads = heads;
  return c;
}

/// Overwrites every parameter with uniform noise in [-spread, spread] so that
/// outputs and gradients are far from the near-zero initialization.
inline void scramble(TransformerModel& model, std::uint64_t seed, double spread = 0.5) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-spread, spread);
  for (auto& p : model.parameters()) {
    Tensor t = p.tensor;
    MatrixD& v = t.mutable_value();
    for (Index i = 0; i < v.size(); ++i) v.data()[i] = dist(rng);
    if (p.role == ParamRole::EmbeddingNormScale || p.role == ParamRole::AttentionNormScale ||
        p.role == ParamRole::FfnNormScale) {
      v.array() += 1.0;
    }
  }
}

/// Random non-reserved ids with the given number of trailing pads per row.
inline TokenMatrix random_tokens(Index batch, Index len, Index vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int32_t> dist(data::kNumReserved, static_cast<std::int32_t>(vocab - 1));
  TokenMatrix t(batch, len);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = dist(rng);
  return t;
}

inline PadMask no_padding(Index batch, Index len) { return PadMask::Constant(batch, len, false); }

/// Synthetic corpus, vocabulary and windows sized for quick training tests.
struct ToyData {
  data::Vocabulary vocab;
  data::Dataset dataset;

  static ToyData make(Index sentences = 400, Index seq_len = 12, std::uint64_t corpus_seed = 0) {
    const auto lines = data::synthetic_corpus(sentences, corpus_seed);
    auto vocab = data::Vocabulary::build(lines, 128);
    auto windows = data::pack_sequences(lines, vocab, seq_len);
    return ToyData{std::move(vocab), data::Dataset(std::move(windows), 0.1)};
  }
};

inline bool bit_identical(const MatrixD& a, const MatrixD& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
}

}  // namespace homodistil::testing
