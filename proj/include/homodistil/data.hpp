#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "homodistil/tokens.hpp"

namespace homodistil::data {

using Index = Eigen::Index;

inline constexpr std::int32_t kPad = 0;
inline constexpr std::int32_t kUnk = 1;
inline constexpr std::int32_t kCls = 2;
inline constexpr std::int32_t kSep = 3;
inline constexpr std::int32_t kMask = 4;
inline constexpr std::int32_t kNumReserved = 5;

/// Lowercases and splits on ASCII whitespace.
std::vector<std::string> tokenize(std::string_view text);
/// Joins tokens with single spaces.
std::string detokenize(std::span<const std::string> tokens);

class Vocabulary {
 public:
  /// Reserved entries first, then corpus tokens by descending frequency
  /// (ties lexicographic), truncated to `max_size` entries in total.
  static Vocabulary build(std::span<const std::string> corpus_lines, Index max_size);

  /// Tokens in id order, reserved entries included.
  static Vocabulary from_tokens(std::vector<std::string> tokens);
  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  Index size() const { return static_cast<Index>(tokens_.size()); }
  /// kUnk for unknown tokens.
  std::int32_t id(const std::string& token) const;
  const std::string& token(std::int32_t id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<std::int32_t> encode(std::string_view text) const;
  /// Skips padding.
  std::string decode(std::span<const std::int32_t> ids) const;

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> ids_;
};

/// Encodes each line, appends a separator after it, concatenates everything
/// and cuts the stream into windows of `seq_len`. The last window is padded.
std::vector<std::vector<std::int32_t>> pack_sequences(std::span<const std::string> lines, const Vocabulary& vocab,
                                                      Index seq_len);

struct MLMBatch {
  TokenMatrix token_ids;  // corrupted inputs
  PadMask pad_mask;
  TokenMatrix labels;  // original id where corrupted, kIgnoreLabel elsewhere
};

/// Uniform in [0, 1) from the top 53 bits of one draw; platform independent.
double uniform01(std::mt19937_64& rng);
/// Uniform in [0, n).
std::int64_t uniform_index(std::mt19937_64& rng, std::int64_t n);

/// Selects each maskable (non-pad, non-reserved) position with probability
/// mask_prob, forcing at least one per sequence. Selected positions become
/// MASK (80%), a random corpus token (10%) or stay unchanged (10%).
MLMBatch make_mlm_batch(std::span<const std::vector<std::int32_t>> sequences, const Vocabulary& vocab,
                        double mask_prob, std::mt19937_64& rng);

/// Windows split into a training part and a held-out tail.
class Dataset {
 public:
  Dataset(std::vector<std::vector<std::int32_t>> windows, double heldout_fraction);

  const std::vector<std::vector<std::int32_t>>& train() const { return train_; }
  const std::vector<std::vector<std::int32_t>>& heldout() const { return heldout_; }

  /// Training batch for `step`: sampled with replacement and masked by an rng
  /// derived from (seed, step) only, so any step can be regenerated.
  MLMBatch batch(std::uint64_t seed, Index step, Index batch_size, const Vocabulary& vocab, double mask_prob) const;

  /// Fixed held-out evaluation batches covering every held-out window once.
  std::vector<MLMBatch> heldout_batches(std::uint64_t seed, Index batch_size, const Vocabulary& vocab,
                                        double mask_prob) const;

 private:
  std::vector<std::vector<std::int32_t>> train_;
  std::vector<std::vector<std::int32_t>> heldout_;
};

/// Mixes a seed with a stream index into an independent rng seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

/// Reads a UTF-8 text file as lines (empty lines dropped).
std::vector<std::string> read_corpus(const std::filesystem::path& path);

/// Sentences from a small agreement grammar with semantic verb/object
/// classes. Same seed gives the same corpus.
std::vector<std::string> synthetic_corpus(Index num_sentences, std::uint64_t seed);

}  // namespace homodistil::data
