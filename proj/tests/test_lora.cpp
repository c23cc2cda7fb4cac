#include <algorithm>
#include <cmath>
#include <random>

#include "das/backprop.hpp"
#include "das/error.hpp"
#include "das/lora.hpp"
#include "das/model.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace das;

namespace {

ModelConfig cfg() {
  ModelConfig c;
  c.vocab_size = 12;
  c.source_vocab_size = 8;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_enc_layers = 1;
  c.n_dec_layers = 2;
  c.d_ff = 20;
  c.max_src_len = 12;
  c.max_tgt_len = 8;
  return c;
}

}  // namespace

TEST_CASE("scaling is alpha over root rank") {
  CHECK(rank_stable_scaling(8.0f, 4) == doctest::Approx(4.0));
  CHECK(rank_stable_scaling(16.0f, 64) == doctest::Approx(2.0));
  CHECK_THROWS_AS(rank_stable_scaling(8.0f, 0), ParameterError);
  CHECK_THROWS_AS(rank_stable_scaling(0.0f, 4), ParameterError);
}

TEST_CASE("PiSSA factors carry the principal rank-r part of the weight") {
  std::mt19937_64 rng(21);
  const Matrix w0 = Matrix::normal(10, 14, 1.0f, rng);
  const auto init = init_pissa(w0, 3, 6.0f);
  const float g = rank_stable_scaling(6.0f, 3);
  const Matrix approx = scaled(matmul(init.piece.b, init.piece.a), g);
  CHECK(frobenius_norm(sub(w0, approx)) == doctest::Approx(oracle::rank_r_error(w0, 3)).epsilon(1e-4));
  CHECK(max_abs_diff(add(init.residual, approx), w0) < 1e-5f);
  // a and b share the singular values symmetrically
  for (std::size_t k = 0; k < 3; ++k) {
    double na = 0.0, nb = 0.0;
    for (std::size_t c = 0; c < 14; ++c) na += init.piece.a(k, c) * init.piece.a(k, c);
    for (std::size_t r = 0; r < 10; ++r) nb += init.piece.b(r, k) * init.piece.b(r, k);
    CHECK(na == doctest::Approx(nb).epsilon(1e-4));
  }
  CHECK_THROWS_AS(init_pissa(w0, 11, 6.0f), ParameterError);
}

TEST_CASE("a fresh PiSSA adapter leaves the model function unchanged") {
  const auto w = TransformerWeights::random(cfg(), 22);
  LoraConfig lc;
  const auto ad = make_adapter(w, lc);
  CHECK(ad.base_id == model_id(w));
  auto expect = default_attach_paths(w);
  std::sort(expect.begin(), expect.end());
  CHECK(ad.attach_paths() == expect);
  CHECK(ad.attach_paths().size() == 8);
  CHECK(ad.parameter_count() == 8 * (4 * 16 + 16 * 4));
  const auto merged = merged_weights(w, ad);
  w.visit([&](const std::string& p, const Matrix& m) { CHECK(max_abs_diff(m, *merged.find(p)) < 1e-6f); });
}

TEST_CASE("unmerged apply equals merged weights and the oracle linear map") {
  std::mt19937_64 rng(23);
  const Matrix w0 = Matrix::normal(6, 9, 1.0f, rng);
  LoraPiece piece = init_pissa(w0, 2, 4.0f).piece;
  piece.a = Matrix::normal(2, 9, 0.5f, rng);
  piece.b = Matrix::normal(6, 2, 0.5f, rng);
  const float g = rank_stable_scaling(4.0f, 2);
  const Matrix x = Matrix::normal(5, 9, 1.0f, rng);
  const Matrix y = apply(w0, piece, g, x);
  CHECK(max_abs_diff(y, matmul_nt(x, merge(w0, piece, g))) < 1e-4f);
  oracle::LoraSite site{oracle::to_mat(piece.effective_a()), oracle::to_mat(piece.effective_b()), g};
  const auto ref = oracle::linear(oracle::to_mat(x), w0, &site);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 6; ++j) CHECK(y(i, j) == doctest::Approx(ref[i][j]).epsilon(1e-4));
  // effective factors are [a; a0] and [b, -b0]
  CHECK(piece.effective_a().rows() == 4);
  CHECK(piece.effective_b()(0, 2) == -piece.b0(0, 0));
  CHECK_THROWS_AS(apply(w0, piece, g, Matrix(2, 8)), ShapeError);
}

TEST_CASE("zero init starts with B = 0") {
  std::mt19937_64 rng(24);
  const auto p = init_zero_piece(7, 5, 3, rng);
  CHECK(frobenius_norm(p.b) == 0.0);
  CHECK(frobenius_norm(p.a) > 0.0);
  CHECK_FALSE(p.has_offset());
}

TEST_CASE("adapters attach only to decoder linear weights") {
  const auto w = TransformerWeights::random(cfg(), 25);
  LoraConfig lc;
  lc.attach_paths = {"enc.0.self.q"};
  CHECK_THROWS_AS(make_adapter(w, lc), ParameterError);
  lc.attach_paths = {"dec.0.ln1.g"};
  CHECK_THROWS_AS(make_adapter(w, lc), ParameterError);
  lc.attach_paths = {"dec.9.self.q"};
  CHECK_THROWS_AS(make_adapter(w, lc), ParameterError);
  lc.attach_paths = {"dec.0.self.q", "dec.0.self.q"};
  CHECK_THROWS_AS(make_adapter(w, lc), ParameterError);
  lc.attach_paths = {"dec.1.ff.w2", "dec.out.w"};
  CHECK(make_adapter(w, lc).pieces.size() == 2);
}

TEST_CASE("adapted forward equals the forward of merged weights") {
  const auto w = TransformerWeights::random(cfg(), 26);
  LoraConfig lc;
  lc.attach_paths = {"dec.0.self.q", "dec.1.cross.v", "dec.1.ff.w1", "dec.out.w"};
  auto ad = make_adapter(w, lc);
  std::mt19937_64 rng(27);
  for (auto& [p, piece] : ad.pieces) add_inplace(piece.b, Matrix::normal(piece.b.rows(), piece.b.cols(), 0.2f, rng));
  const std::vector<int> src{1, 4, 7}, prefix{kBos, 3, 5};
  const auto merged = merged_weights(w, ad);
  const auto enc = encode(w, src);
  const auto view = AdapterView::build(ad);
  const Matrix a = decoder_forward(w, &view, enc.features, prefix);
  const Matrix b = decoder_forward(merged, nullptr, enc.features, prefix);
  CHECK(max_abs_diff(a, b) < 1e-4f);
  CHECK(max_abs_diff(a, decoder_forward(w, nullptr, enc.features, prefix)) > 1e-3f);
}
