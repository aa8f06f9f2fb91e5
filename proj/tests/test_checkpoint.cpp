#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "homodistil/checkpoint.hpp"
#include "homodistil/errors.hpp"
#include "homodistil/experiments.hpp"
#include "support/fixtures.hpp"

using namespace homodistil;
using pruning::GroupId;
using pruning::GroupKind;
using testing::bit_identical;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("homodistil_test_ckpt_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

// A short distillation gives nontrivial masks, EMA buffers and moments.
DistillState trained_state() {
  static const auto data = testing::ToyData::make(200, 8);
  auto teacher = TransformerModel::initialize(testing::toy_config(2, 8, 2, data.vocab.size(), 16, 8), 3);
  TrainConfig cfg;
  cfg.iterations = 6;
  cfg.batch_size = 4;
  cfg.schedule.base = pruning::SparsitySchedule{0, 4, 0.5, 6};
  cfg.scorer = pruning::ScorerKind::Platon;
  auto result = distill(teacher, cfg, data.dataset, data.vocab);
  return std::move(result.state);
}

void flip_byte(const std::filesystem::path& file, std::streamoff at) {
  std::fstream f(file, std::ios::in | std::ios::out | std::ios::binary);
  f.seekg(at);
  char c = 0;
  f.read(&c, 1);
  c = static_cast<char>(c ^ 0x5A);
  f.seekp(at);
  f.write(&c, 1);
}

}  // namespace

TEST_CASE("full checkpoint round trip is bit exact") {
  auto state = trained_state();
  Checkpoint ckpt;
  ckpt.model = state.student.clone();
  ckpt.projections = state.projections.clone();
  ckpt.masks = state.masks;
  ckpt.importance = state.importance;
  ckpt.optimizer = state.optimizer;
  ckpt.counters = {{"step", state.step}};
  ckpt.metadata = {{"note", "unit test"}};
  const auto dir = scratch("full");
  save_checkpoint(dir, ckpt);
  const auto back = load_checkpoint(dir);

  CHECK(back.model.config == ckpt.model.config);
  CHECK(back.model.attention_scale == ckpt.model.attention_scale);
  CHECK(bit_identical(back.model.hidden_live, ckpt.model.hidden_live));
  const auto a = back.model.parameters();
  const auto b = ckpt.model.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(bit_identical(a[i].tensor.value(), b[i].tensor.value()));
  for (std::size_t l = 0; l < a.size() && l < back.model.layers.size(); ++l) {
    CHECK(back.model.layers[l].heads == ckpt.model.layers[l].heads);
  }
  REQUIRE(back.projections);
  CHECK(bit_identical(back.projections->hidden.value(), ckpt.projections->hidden.value()));
  REQUIRE(back.masks);
  CHECK(back.masks->masks == ckpt.masks->masks);
  CHECK(back.masks->original_width == ckpt.masks->original_width);
  REQUIRE(back.importance);
  CHECK(back.importance->kind == pruning::ScorerKind::Platon);
  CHECK(back.importance->updates == ckpt.importance->updates);
  CHECK(back.importance->score_ema.size() == ckpt.importance->score_ema.size());
  for (const auto& [name, m] : ckpt.importance->score_ema) {
    CHECK(bit_identical(back.importance->score_ema.at(name), m));
    CHECK(bit_identical(back.importance->uncertainty_ema.at(name), ckpt.importance->uncertainty_ema.at(name)));
  }
  REQUIRE(back.optimizer);
  CHECK(back.optimizer->step_count() == ckpt.optimizer->step_count());
  for (const auto& [name, m] : ckpt.optimizer->moments()) {
    CHECK(bit_identical(back.optimizer->moments().at(name).first, m.first));
    CHECK(bit_identical(back.optimizer->moments().at(name).second, m.second));
  }
  CHECK(back.counters == ckpt.counters);
  CHECK(back.metadata == ckpt.metadata);

  // Saving the loaded checkpoint reproduces the same bytes.
  const auto again = scratch("again");
  save_checkpoint(again, back);
  CHECK(checkpoint_digest(again) == checkpoint_digest(dir));
}

TEST_CASE("model-only checkpoint and overwrite") {
  auto model = TransformerModel::initialize(testing::toy_config(), 5);
  Checkpoint ckpt;
  ckpt.model = model.clone();
  const auto dir = scratch("model");
  save_checkpoint(dir, ckpt);
  const std::string first = checkpoint_digest(dir);
  const auto back = load_checkpoint(dir);
  CHECK_FALSE(back.projections);
  CHECK_FALSE(back.masks);
  CHECK_FALSE(back.importance);
  CHECK_FALSE(back.optimizer);
  CHECK(checkpoint_digest(dir) == first);

  // A later save into the same directory leaves no stale blobs behind.
  auto state = trained_state();
  Checkpoint full;
  full.model = state.student.clone();
  full.masks = state.masks;
  save_checkpoint(dir, full);
  save_checkpoint(dir, ckpt);
  CHECK(checkpoint_digest(dir) == first);
}

TEST_CASE("integrity failures") {
  Checkpoint ckpt;
  ckpt.model = TransformerModel::initialize(testing::toy_config(), 6);
  const auto dir = scratch("tamper");
  save_checkpoint(dir, ckpt);
  CHECK_NOTHROW(load_checkpoint(dir));

  flip_byte(dir / "model.embeddings.token.bin", 17);
  CHECK_THROWS_AS(load_checkpoint(dir), IntegrityError);

  save_checkpoint(dir, ckpt);
  std::filesystem::resize_file(dir / "model.mlm.bias.bin", 8);
  CHECK_THROWS_AS(load_checkpoint(dir), IntegrityError);

  save_checkpoint(dir, ckpt);
  std::filesystem::remove(dir / "model.mlm.bias.bin");
  CHECK_THROWS_AS(load_checkpoint(dir), std::exception);

  save_checkpoint(dir, ckpt);
  std::ofstream(dir / kManifestName) << "{ not json";
  CHECK_THROWS_AS(load_checkpoint(dir), InputError);

  CHECK_THROWS_AS(load_checkpoint(scratch("absent")), InputError);
}

TEST_CASE("compacted checkpoints") {
  auto state = trained_state();
  const auto compact = compact_model(state.student, state.masks);
  CHECK(compact.config.hidden_dim == state.masks.kept(GroupId{GroupKind::Hidden, -1}));
  Checkpoint ckpt;
  ckpt.model = compact.clone();
  const auto dir = scratch("compact");
  save_checkpoint(dir, ckpt);
  const auto back = load_checkpoint(dir);
  CHECK(back.model.config == compact.config);
  for (std::size_t l = 0; l < compact.layers.size(); ++l) CHECK(back.model.layers[l].heads == compact.layers[l].heads);
  const auto ids = testing::random_tokens(2, 8, compact.config.vocab_size, 1);
  const auto pad = testing::no_padding(2, 8);
  CHECK(bit_identical(forward(back.model, ids, pad).logits.value(), forward(compact, ids, pad).logits.value()));
  CHECK((forward(compact, ids, pad).logits.value() - forward(state.student, ids, pad).logits.value())
            .cwiseAbs()
            .maxCoeff() <= 1e-10);
}

TEST_CASE("all-ones compaction is the identity") {
  auto model = TransformerModel::initialize(testing::toy_config(), 7);
  testing::scramble(model, 7);
  const auto compact = compact_model(model, pruning::MaskSet::all_ones(model));
  const auto a = compact.parameters();
  const auto b = model.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(bit_identical(a[i].tensor.value(), b[i].tensor.value()));
  CHECK(count_parameters(compact).total == count_parameters(model.config).total);
}

TEST_CASE("tampered masked weight is rejected at compaction") {
  auto state = trained_state();
  Checkpoint ckpt;
  ckpt.model = state.student.clone();
  ckpt.masks = state.masks;
  const auto dir = scratch("masked");
  save_checkpoint(dir, ckpt);
  auto back = load_checkpoint(dir);
  CHECK_NOTHROW(compact_model(back.model, *back.masks));
  const RowVectorD& hm = back.masks->masks.at(GroupId{GroupKind::Hidden, -1});
  Index dead = 0;
  while (hm(dead) != 0.0) ++dead;
  back.model.layers[0].w_in.mutable_value()(dead, 0) = 1.0;
  CHECK_THROWS_AS(compact_model(back.model, *back.masks), IntegrityError);
}

TEST_CASE("hash and config helpers") {
  const std::string s = "hello";
  CHECK(fnv1a_hex(s.data(), s.size()) == "a430d84680aabd0b");
  CHECK(fnv1a_hex(nullptr, 0) == "cbf29ce484222325");
  const ModelConfig c = testing::toy_config(3, 12, 3, 40, 20, 10);
  CHECK(model_config_from_json(to_json(c)) == c);
  auto bad = to_json(c);
  bad.erase("hidden_dim");
  CHECK_THROWS_AS(model_config_from_json(bad), InputError);
}
