#include <doctest.h>

#include <cmath>

#include "homodistil/errors.hpp"
#include "homodistil/model.hpp"
#include "homodistil/trainer.hpp"
#include "support/fixtures.hpp"

using namespace homodistil;
using testing::bit_identical;
using testing::toy_config;

namespace {

// Sum of every tensor shape of a dense config, written out independently of
// count_parameters.
std::int64_t shape_sum(const ModelConfig& c) {
  const std::int64_t V = c.vocab_size, P = c.max_seq_len, d = c.hidden_dim, f = c.ffn_dim;
  const std::int64_t embedding = V * d + P * d + 2 * d + V;
  const std::int64_t layer = 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d) + 2 * d;
  return embedding + c.num_layers * layer;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = toy_config();
  CHECK_NOTHROW(c.validate());
  c.num_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = toy_config();
  c.vocab_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = toy_config();
  c.layernorm_eps = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("forward shapes") {
  const auto model = TransformerModel::initialize(toy_config(2, 8, 2, 32), 1);
  const auto out = forward(model, std::vector<std::int32_t>{5, 6, 7, 8, 9});
  CHECK(out.logits.rows() == 5);
  CHECK(out.logits.cols() == 32);
  REQUIRE(out.hidden_states.size() == 2);
  REQUIRE(out.attention_maps.size() == 2);
  for (const auto& h : out.hidden_states) {
    CHECK(h.rows() == 5);
    CHECK(h.cols() == 8);
  }
  for (const auto& a : out.attention_maps) {
    CHECK(a.rows() == 5);
    CHECK(a.cols() == 5);
  }
  CHECK(out.embedding_output.rows() == 5);
  CHECK(out.embedding_output.cols() == 8);
}

TEST_CASE("single token attends to itself") {
  const auto model = TransformerModel::initialize(toy_config(2, 8, 2, 32), 2);
  const auto out = forward(model, std::vector<std::int32_t>{7});
  for (const auto& a : out.attention_maps) {
    REQUIRE(a.rows() == 1);
    REQUIRE(a.cols() == 1);
    CHECK(a.value()(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
  }
}

TEST_CASE("hand-sized attention map") {
  // Embedding layernorm turns the rows [1,0] and [0,1] into [1,-1] and
  // [-1,1]. Query weights I and key weights diag(2,1) give scores
  // q0.k0 = 3 and q0.k1 = -3, scaled by 1/sqrt(2).
  auto model = TransformerModel::initialize(toy_config(1, 2, 1, 8, 4, 2), 3);
  model.token_embedding.mutable_value().setZero();
  model.token_embedding.mutable_value().row(0) << 1.0, 0.0;
  model.token_embedding.mutable_value().row(1) << 0.0, 1.0;
  model.position_embedding.mutable_value().setZero();
  auto& layer = model.layers[0];
  layer.wq.mutable_value() = MatrixD::Identity(2, 2);
  layer.wk.mutable_value() = MatrixD::Zero(2, 2);
  layer.wk.mutable_value().diagonal() << 2.0, 1.0;
  layer.bq.mutable_value().setZero();
  layer.bk.mutable_value().setZero();

  const auto out = forward(model, std::vector<std::int32_t>{0, 1});
  const MatrixD& a = out.attention_maps[0].value();
  const double p = 1.0 / (1.0 + std::exp(-6.0 / std::sqrt(2.0)));
  CHECK(a(0, 0) == doctest::Approx(p).epsilon(1e-9));
  CHECK(a(0, 1) == doctest::Approx(1.0 - p).epsilon(1e-9));
  // Second query [-1,1] against keys [2,-1] and [-2,1]: the same split mirrored.
  CHECK(a(1, 1) == doctest::Approx(p).epsilon(1e-9));
  CHECK(a(1, 0) == doctest::Approx(1.0 - p).epsilon(1e-9));
}

TEST_CASE("attention rows sum to one and skip padding") {
  auto model = TransformerModel::initialize(toy_config(2, 8, 2, 32), 4);
  testing::scramble(model, 4);
  TokenMatrix tokens = testing::random_tokens(3, 6, 32, 9);
  PadMask pad = testing::no_padding(3, 6);
  pad(0, 5) = true;
  pad(1, 3) = pad(1, 4) = pad(1, 5) = true;
  const auto out = forward(model, tokens, pad);
  for (const auto& a : out.attention_maps) {
    const MatrixD& v = a.value();
    for (Index r = 0; r < v.rows(); ++r) CHECK(std::abs(v.row(r).sum() - 1.0) <= 1e-9);
    for (Index b = 0; b < 3; ++b) {
      for (Index k = 0; k < 6; ++k) {
        if (!pad(b, k)) continue;
        for (Index q = 0; q < 6; ++q) CHECK(v(b * 6 + q, k) <= 1e-12);
      }
    }
  }
}

TEST_CASE("forward input errors") {
  const auto model = TransformerModel::initialize(toy_config(2, 8, 2, 32, 16, 8), 5);
  CHECK_THROWS_AS(forward(model, std::vector<std::int32_t>{5, 32}), InputError);
  CHECK_THROWS_AS(forward(model, std::vector<std::int32_t>{5, -1}), InputError);
  CHECK_THROWS_AS(forward(model, std::vector<std::int32_t>(9, 5)), InputError);
  CHECK_THROWS_AS(forward(model, std::vector<std::int32_t>{}), InputError);
  CHECK_THROWS_AS(forward(model, std::vector<std::int32_t>{5, 6}, std::vector<bool>{true, true}), InputError);
}

TEST_CASE("initialization and forward are deterministic") {
  const auto a = TransformerModel::initialize(toy_config(), 11);
  const auto b = TransformerModel::initialize(toy_config(), 11);
  const auto c = TransformerModel::initialize(toy_config(), 12);
  const auto pa = a.parameters();
  const auto pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(bit_identical(pa[i].tensor.value(), pb[i].tensor.value()));
  CHECK_FALSE(bit_identical(a.token_embedding.value(), c.token_embedding.value()));
  const std::vector<std::int32_t> ids{5, 9, 12, 30};
  CHECK(bit_identical(forward(a, ids).logits.value(), forward(b, ids).logits.value()));
}

TEST_CASE("initialization follows the truncated normal") {
  const auto model = TransformerModel::initialize(toy_config(2, 32, 2, 64, 64, 8), 13);
  const MatrixD& w = model.layers[0].w_in.value();
  CHECK(w.cwiseAbs().maxCoeff() <= 0.04 + 1e-15);
  CHECK(model.layers[0].b_in.value().isZero());
  CHECK(model.layers[0].ln1_gamma.value().isOnes());
  const double mean = w.mean();
  const double sd = std::sqrt((w.array() - mean).square().mean());
  CHECK(std::abs(mean) < 0.005);
  CHECK(sd > 0.013);
  CHECK(sd < 0.020);
}

TEST_CASE("clone is a deep copy") {
  auto teacher = TransformerModel::initialize(toy_config(), 21);
  testing::scramble(teacher, 21);
  auto student = clone_model(teacher);
  const auto tp = teacher.parameters();
  const auto sp = student.parameters();
  REQUIRE(tp.size() == sp.size());
  for (std::size_t i = 0; i < tp.size(); ++i) {
    CHECK(tp[i].name == sp[i].name);
    CHECK_FALSE(tp[i].tensor.same_node(sp[i].tensor));
    CHECK(bit_identical(tp[i].tensor.value(), sp[i].tensor.value()));
  }
  const TokenMatrix tokens = testing::random_tokens(2, 8, 32, 3);
  const PadMask pad = testing::no_padding(2, 8);
  const MatrixD before = forward(teacher, tokens, pad).logits.value();
  CHECK(bit_identical(before, forward(student, tokens, pad).logits.value()));

  student.layers[0].wv.mutable_value().col(3).setZero();
  student.token_embedding.mutable_value().col(1).setZero();
  CHECK(bit_identical(before, forward(teacher, tokens, pad).logits.value()));
  CHECK_FALSE(bit_identical(before, forward(student, tokens, pad).logits.value()));
}

TEST_CASE("clone has zero prediction discrepancy") {
  auto teacher = TransformerModel::initialize(toy_config(), 22);
  testing::scramble(teacher, 22);
  const auto student = clone_model(teacher);
  data::MLMBatch batch;
  batch.token_ids = testing::random_tokens(4, 8, 32, 5);
  batch.pad_mask = testing::no_padding(4, 8);
  batch.labels = TokenMatrix::Constant(4, 8, kIgnoreLabel);
  const std::vector<data::MLMBatch> batches{batch};
  CHECK(evaluate_kl(teacher, student, batches, 2.0) <= 1e-12);
}

TEST_CASE("parameter counts") {
  SUBCASE("toy config matches the shape sum") {
    const ModelConfig c = toy_config(2, 8, 2, 32);
    const auto model = TransformerModel::initialize(c, 1);
    std::int64_t held = 0;
    for (const auto& p : model.parameters()) held += p.tensor.size();
    CHECK(held == shape_sum(c));
    CHECK(count_parameters(c).total == shape_sum(c));
    CHECK(count_parameters(model).total == shape_sum(c));
    CHECK(count_parameters(c).embedding + count_parameters(c).backbone == count_parameters(c).total);
  }
  SUBCASE("presets keep the published widths") {
    CHECK(presets::bert_base().hidden_dim == 768);
    CHECK(presets::bert_base().ffn_dim == 3072);
    CHECK(presets::homobert_base().hidden_dim == 576);
    CHECK(presets::homobert_small().hidden_dim == 256);
    CHECK(presets::homobert_xsmall().hidden_dim == 240);
    CHECK(presets::homobert_tiny().ffn_dim == 896);
    for (const auto& c : {presets::bert_base(), presets::homobert_base(), presets::homobert_small(),
                          presets::homobert_xsmall(), presets::homobert_tiny()}) {
      CHECK(c.num_layers == 12);
      CHECK(c.ffn_dim == 4 * c.hidden_dim);
      CHECK(count_parameters(c).total == shape_sum(c));
    }
  }
  SUBCASE("published totals within one percent") {
    CHECK(std::abs(count_parameters(presets::bert_base()).total / 109e6 - 1.0) < 0.01);
    CHECK(std::abs(count_parameters(presets::homobert_small()).total / 17.3e6 - 1.0) < 0.01);
  }
}
