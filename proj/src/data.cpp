#include "homodistil/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "homodistil/errors.hpp"

namespace homodistil::data {

namespace {

const std::vector<std::string>& reserved_tokens() {
  static const std::vector<std::string> kTokens{"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
  return kTokens;
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!current.empty()) out.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

std::string detokenize(std::span<const std::string> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

// --- vocabulary -------------------------------------------------------------

Vocabulary Vocabulary::build(std::span<const std::string> corpus_lines, Index max_size) {
  if (max_size < kNumReserved) {
    throw ConfigError("vocabulary size " + std::to_string(max_size) + " is below the " +
                      std::to_string(kNumReserved) + " reserved entries");
  }
  std::map<std::string, std::int64_t> counts;
  for (const auto& line : corpus_lines) {
    for (auto& tok : tokenize(line)) ++counts[tok];
  }
  for (const auto& r : reserved_tokens()) counts.erase(r);
  if (counts.empty()) throw InputError("cannot build a vocabulary from an empty corpus");

  std::vector<std::pair<std::string, std::int64_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });

  std::vector<std::string> tokens = reserved_tokens();
  for (const auto& [tok, n] : ranked) {
    if (static_cast<Index>(tokens.size()) >= max_size) break;
    tokens.push_back(tok);
  }
  return from_tokens(std::move(tokens));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  const auto& reserved = reserved_tokens();
  if (tokens.size() < reserved.size() || !std::equal(reserved.begin(), reserved.end(), tokens.begin())) {
    throw InputError("vocabulary must start with the reserved entries [PAD] [UNK] [CLS] [SEP] [MASK]");
  }
  Vocabulary v;
  v.tokens_ = std::move(tokens);
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    if (!v.ids_.emplace(v.tokens_[i], static_cast<std::int32_t>(i)).second) {
      throw InputError("duplicate vocabulary entry '" + v.tokens_[i] + "'");
    }
  }
  return v;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open vocabulary " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InputError("malformed vocabulary " + path.string() + ": " + e.what());
  }
  if (!j.is_array()) throw InputError("vocabulary " + path.string() + " is not a JSON array");
  return from_tokens(j.get<std::vector<std::string>>());
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write vocabulary " + path.string());
  out << nlohmann::json(tokens_).dump() << '\n';
}

std::int32_t Vocabulary::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(std::int32_t id) const {
  if (id < 0 || id >= static_cast<std::int32_t>(tokens_.size())) {
    throw InputError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::int32_t> Vocabulary::encode(std::string_view text) const {
  std::vector<std::int32_t> out;
  for (const auto& tok : tokenize(text)) out.push_back(id(tok));
  return out;
}

std::string Vocabulary::decode(std::span<const std::int32_t> ids) const {
  std::vector<std::string> toks;
  for (auto id : ids) {
    if (id != kPad) toks.push_back(token(id));
  }
  return detokenize(toks);
}

// --- packing and masking ----------------------------------------------------

std::vector<std::vector<std::int32_t>> pack_sequences(std::span<const std::string> lines, const Vocabulary& vocab,
                                                      Index seq_len) {
  if (seq_len < 1) throw ConfigError("sequence length must be >= 1");
  std::vector<std::int32_t> stream;
  for (const auto& line : lines) {
    auto ids = vocab.encode(line);
    if (ids.empty()) continue;
    stream.insert(stream.end(), ids.begin(), ids.end());
    stream.push_back(kSep);
  }
  if (stream.empty()) throw InputError("corpus contains no tokens");
  std::vector<std::vector<std::int32_t>> windows;
  const auto n = static_cast<std::size_t>(seq_len);
  for (std::size_t start = 0; start < stream.size(); start += n) {
    const std::size_t stop = std::min(stream.size(), start + n);
    std::vector<std::int32_t> w(stream.begin() + static_cast<std::ptrdiff_t>(start),
                                stream.begin() + static_cast<std::ptrdiff_t>(stop));
    w.resize(n, kPad);
    windows.push_back(std::move(w));
  }
  return windows;
}

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::int64_t uniform_index(std::mt19937_64& rng, std::int64_t n) {
  if (n <= 0) throw ContractError("uniform_index: empty range");
  return static_cast<std::int64_t>(uniform01(rng) * static_cast<double>(n));
}

MLMBatch make_mlm_batch(std::span<const std::vector<std::int32_t>> sequences, const Vocabulary& vocab,
                        double mask_prob, std::mt19937_64& rng) {
  if (!(mask_prob > 0.0 && mask_prob < 1.0)) throw ConfigError("mask probability must lie in (0, 1)");
  if (sequences.empty()) throw InputError("cannot build a batch from zero sequences");
  const auto len = static_cast<Index>(sequences.front().size());
  if (len == 0) throw InputError("empty sequence in batch");
  const auto rows = static_cast<Index>(sequences.size());
  const std::int64_t random_pool = vocab.size() - kNumReserved;

  MLMBatch batch;
  batch.token_ids.resize(rows, len);
  batch.pad_mask.resize(rows, len);
  batch.labels = TokenMatrix::Constant(rows, len, kIgnoreLabel);

  for (Index b = 0; b < rows; ++b) {
    const auto& seq = sequences[static_cast<std::size_t>(b)];
    if (static_cast<Index>(seq.size()) != len) throw DimensionError("sequences in a batch must share one length");
    std::vector<Index> maskable;
    std::vector<Index> live;
    for (Index t = 0; t < len; ++t) {
      const std::int32_t id = seq[static_cast<std::size_t>(t)];
      if (id < 0 || id >= vocab.size()) throw InputError("token id " + std::to_string(id) + " outside vocabulary");
      batch.token_ids(b, t) = id;
      batch.pad_mask(b, t) = id == kPad;
      if (id == kPad) continue;
      live.push_back(t);
      if (id >= kNumReserved || id == kUnk) maskable.push_back(t);
    }
    if (live.empty()) throw InputError("sequence " + std::to_string(b) + " is entirely padding");
    const auto& candidates = maskable.empty() ? live : maskable;

    std::vector<Index> selected;
    for (Index t : candidates) {
      if (uniform01(rng) < mask_prob) selected.push_back(t);
    }
    if (selected.empty()) {
      selected.push_back(candidates[static_cast<std::size_t>(uniform_index(rng, static_cast<std::int64_t>(candidates.size())))]);
    }
    for (Index t : selected) {
      batch.labels(b, t) = batch.token_ids(b, t);
      const double u = uniform01(rng);
      if (u < 0.8) {
        batch.token_ids(b, t) = kMask;
      } else if (u < 0.9 && random_pool > 0) {
        batch.token_ids(b, t) = static_cast<std::int32_t>(kNumReserved + uniform_index(rng, random_pool));
      }
    }
  }
  return batch;
}

// --- dataset ----------------------------------------------------------------

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 over the pair
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Dataset::Dataset(std::vector<std::vector<std::int32_t>> windows, double heldout_fraction) {
  if (windows.empty()) throw InputError("dataset has no sequences");
  if (!(heldout_fraction >= 0.0 && heldout_fraction < 1.0)) throw ConfigError("held-out fraction must lie in [0, 1)");
  auto n_heldout = static_cast<std::size_t>(heldout_fraction * static_cast<double>(windows.size()));
  if (heldout_fraction > 0.0 && n_heldout == 0 && windows.size() > 1) n_heldout = 1;
  const std::size_t n_train = windows.size() - n_heldout;
  train_.assign(windows.begin(), windows.begin() + static_cast<std::ptrdiff_t>(n_train));
  heldout_.assign(windows.begin() + static_cast<std::ptrdiff_t>(n_train), windows.end());
}

MLMBatch Dataset::batch(std::uint64_t seed, Index step, Index batch_size, const Vocabulary& vocab,
                        double mask_prob) const {
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(step)));
  std::vector<std::vector<std::int32_t>> picked;
  picked.reserve(static_cast<std::size_t>(batch_size));
  for (Index i = 0; i < batch_size; ++i) {
    picked.push_back(train_[static_cast<std::size_t>(uniform_index(rng, static_cast<std::int64_t>(train_.size())))]);
  }
  return make_mlm_batch(picked, vocab, mask_prob, rng);
}

std::vector<MLMBatch> Dataset::heldout_batches(std::uint64_t seed, Index batch_size, const Vocabulary& vocab,
                                               double mask_prob) const {
  if (heldout_.empty()) throw InputError("dataset has no held-out sequences");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  std::mt19937_64 rng(derive_seed(seed, 0xE7A1ULL));
  std::vector<MLMBatch> out;
  const auto n = static_cast<std::size_t>(batch_size);
  for (std::size_t start = 0; start < heldout_.size(); start += n) {
    const std::size_t stop = std::min(heldout_.size(), start + n);
    out.push_back(make_mlm_batch(std::span(heldout_).subspan(start, stop - start), vocab, mask_prob, rng));
  }
  return out;
}

// --- corpora ----------------------------------------------------------------

std::vector<std::string> read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open corpus " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!tokenize(line).empty()) lines.push_back(line);
  }
  if (lines.empty()) throw InputError("corpus " + path.string() + " is empty");
  return lines;
}

namespace {

struct Noun {
  const char* singular;
  const char* plural;
};

struct Verb {
  const char* singular;
  const char* plural;
  int object_class;  // -1 intransitive
};

template <typename T, std::size_t N>
const T& pick(const T (&items)[N], std::mt19937_64& rng) {
  return items[static_cast<std::size_t>(uniform_index(rng, static_cast<std::int64_t>(N)))];
}

}  // namespace

std::vector<std::string> synthetic_corpus(Index num_sentences, std::uint64_t seed) {
  if (num_sentences < 1) throw ConfigError("synthetic corpus needs at least one sentence");
  static const Noun kAnimals[] = {{"cat", "cats"},   {"dog", "dogs"},   {"bird", "birds"},
                                  {"horse", "horses"}, {"fox", "foxes"}, {"wolf", "wolves"}};
  static const Noun kPeople[] = {{"king", "kings"},     {"queen", "queens"},   {"child", "children"},
                                 {"farmer", "farmers"}, {"doctor", "doctors"}, {"teacher", "teachers"}};
  // object classes: 0 text, 1 structure, 2 food
  static const char* kObjects[3][4] = {{"book", "letter", "poem", "story"},
                                       {"house", "ship", "bridge", "wall"},
                                       {"bread", "apple", "fish", "meat"}};
  static const Verb kAnimalVerbs[] = {
      {"runs", "run", -1}, {"sleeps", "sleep", -1}, {"jumps", "jump", -1}, {"eats", "eat", 2}, {"hunts", "hunt", 2}};
  static const Verb kPersonVerbs[] = {{"reads", "read", 0},   {"writes", "write", 0}, {"builds", "build", 1},
                                      {"paints", "paint", 1}, {"eats", "eat", 2},     {"sings", "sing", -1}};
  static const char* kSingularDet[] = {"the", "a", "every", "this"};
  static const char* kPluralDet[] = {"the", "some", "many", "these"};
  static const char* kAdjectives[] = {"old", "young", "small", "big", "quiet", "brave", "red", "green"};
  static const char* kPlaces[] = {"in the garden", "near the river", "at night", "every day", "in the city"};

  std::mt19937_64 rng(derive_seed(seed, 0xC0C0ULL));
  std::vector<std::string> lines;
  lines.reserve(static_cast<std::size_t>(num_sentences));
  for (Index i = 0; i < num_sentences; ++i) {
    const bool plural = uniform01(rng) < 0.5;
    const bool person = uniform01(rng) < 0.5;
    std::ostringstream s;
    s << (plural ? pick(kPluralDet, rng) : pick(kSingularDet, rng));
    if (uniform01(rng) < 0.5) s << ' ' << pick(kAdjectives, rng);
    const Noun& noun = person ? pick(kPeople, rng) : pick(kAnimals, rng);
    s << ' ' << (plural ? noun.plural : noun.singular);
    const Verb& verb = person ? pick(kPersonVerbs, rng) : pick(kAnimalVerbs, rng);
    s << ' ' << (plural ? verb.plural : verb.singular);
    if (verb.object_class >= 0) {
      s << ' ' << (uniform01(rng) < 0.5 ? "the" : "a") << ' ' << pick(kObjects[verb.object_class], rng);
    }
    if (uniform01(rng) < 0.3) s << ' ' << pick(kPlaces, rng);
    s << " .";
    lines.push_back(s.str());
  }
  return lines;
}

}  // namespace homodistil::data
