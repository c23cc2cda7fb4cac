#include <vector>

#include "das/backprop.hpp"
#include "das/error.hpp"
#include "das/model.hpp"
#include "das/multilora.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace das;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.vocab_size = 13;
  c.source_vocab_size = 10;
  c.d_model = 16;
  c.n_heads = 4;
  c.n_enc_layers = 2;
  c.n_dec_layers = 2;
  c.d_ff = 24;
  c.max_src_len = 20;
  c.max_tgt_len = 10;
  return c;
}

}  // namespace

TEST_CASE("config validation rejects inconsistent shapes") {
  auto c = small_config();
  c.n_heads = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.vocab_size = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("position code matches the sinusoid definition") {
  std::vector<float> row(16, 0.0f);
  add_position_code(row, 7);
  for (std::size_t i = 0; i < 16; ++i) CHECK(row[i] == doctest::Approx(oracle::position_code(7, i, 16)).epsilon(1e-6));
}

TEST_CASE("random init is seeded and the id tracks the bytes") {
  const auto a = TransformerWeights::random(small_config(), 3);
  auto b = TransformerWeights::random(small_config(), 3);
  CHECK(model_id(a) == model_id(b));
  CHECK(model_id(a).size() == 16);
  b.find("dec.1.ff.b2")->data()[0] += 1.0f;
  CHECK(model_id(a) != model_id(b));
  CHECK(model_id(TransformerWeights::random(small_config(), 4)) != model_id(a));
  CHECK(a.find("no.such") == nullptr);
}

TEST_CASE("cached incremental decoding equals full recomputation") {
  const auto w = TransformerWeights::random(small_config(), 5);
  const std::vector<int> src{4, 2, 9, 9, 3};
  const auto enc = encode(w, src);
  const LoraAdapter* none[1] = {nullptr};
  BranchDecoder dec(w, none, enc);
  std::vector<int> prefix{kBos, 5, 7, 3, 12, 4};
  const Matrix full = decoder_forward(w, nullptr, enc.features, prefix);
  for (std::size_t t = 0; t < prefix.size(); ++t) {
    const Matrix& step = dec.step(prefix[t]);
    CHECK(dec.length() == t + 1);
    CHECK(dec.cache_rows(0, 1) == t + 1);
    for (std::size_t j = 0; j < full.cols(); ++j) CHECK(step(0, j) == doctest::Approx(full(t, j)).epsilon(1e-4));
  }
}

TEST_CASE("greedy decoding agrees with stepwise argmax over decoder_step") {
  const auto w = TransformerWeights::random(small_config(), 6);
  const std::vector<int> src{1, 5, 8};
  const auto enc = encode(w, src);
  const auto out = greedy_decode(w, enc, 10);
  REQUIRE(!out.empty());
  CHECK(out.size() <= 10);
  std::vector<int> prefix{kBos};
  for (int tok : out) {
    const auto logits = decoder_step(w, nullptr, enc, prefix);
    CHECK(static_cast<int>(argmax(logits)) == tok);
    prefix.push_back(tok);
  }
  CHECK_THROWS_AS(greedy_decode(w, enc, 11), ParameterError);
}

TEST_CASE("encoder output is independent of the decoder prefix") {
  const auto w = TransformerWeights::random(small_config(), 7);
  const std::vector<int> src{3, 3, 6};
  const auto a = encode(w, src);
  (void)greedy_decode(w, a, 5);
  CHECK(encode(w, src).features == a.features);
  CHECK_THROWS_AS(encode(w, std::vector<int>{10}), InputError);
}
