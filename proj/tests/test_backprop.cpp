#include <cmath>
#include <random>
#include <vector>

#include "das/backprop.hpp"
#include "das/lora.hpp"
#include "das/model.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace das;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 11;
  c.source_vocab_size = 9;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.d_ff = 12;
  c.max_src_len = 16;
  c.max_tgt_len = 12;
  return c;
}

const std::vector<int> kSrc{3, 5, 1, 7, 8, 2};
const std::vector<int> kTgt{4, 9, 3, 10};

// Central difference on the double-precision oracle. The denominator is the
// step actually representable in float.
double fd(Matrix& m, std::size_t idx, const std::function<double()>& loss) {
  const float orig = m.data()[idx];
  const float hi = orig + 1e-3f, lo = orig - 1e-3f;
  m.data()[idx] = hi;
  const double lp = loss();
  m.data()[idx] = lo;
  const double lm = loss();
  m.data()[idx] = orig;
  return (lp - lm) / (static_cast<double>(hi) - static_cast<double>(lo));
}

void check_grad(const std::string& what, double analytic, double numeric) {
  const double err = std::fabs(analytic - numeric);
  const double tol = 2e-3 * std::max(std::fabs(analytic), std::fabs(numeric)) + 2e-4;
  CHECK_MESSAGE(err <= tol, what << " analytic=" << analytic << " numeric=" << numeric);
}

}  // namespace

TEST_CASE("library forward matches the double-precision oracle") {
  const auto w = TransformerWeights::random(tiny_config(), 11);
  const SeqExample ex{kSrc, kTgt, nullptr};
  const double ours = example_loss(w, nullptr, ex).loss_sum;
  CHECK(ours == doctest::Approx(oracle::sequence_loss(w, nullptr, kSrc, kTgt)).epsilon(1e-5));
  CHECK(example_loss(w, nullptr, ex).tokens == kTgt.size() + 1);

  const auto enc = encode(w, kSrc);
  const auto ref = oracle::encoder(w, kSrc);
  for (std::size_t i = 0; i < kSrc.size(); ++i)
    for (std::size_t j = 0; j < 16; ++j) CHECK(enc.features(i, j) == doctest::Approx(ref[i][j]).epsilon(1e-4));
}

TEST_CASE("full-model gradients match finite differences of the oracle") {
  auto w = TransformerWeights::random(tiny_config(), 12);
  const TrainableScope scope{TrainableScope::Kind::full_model, 0};
  auto g = Gradients::zeros_like(w, nullptr, scope);
  const SeqExample ex{kSrc, kTgt, nullptr};
  accumulate_example(w, nullptr, ex, scope, 1.0f, g);

  std::mt19937_64 rng(13);
  auto loss = [&] { return oracle::sequence_loss(w, nullptr, kSrc, kTgt); };
  w.visit([&](const std::string& path, Matrix& m) {
    const Matrix* gm = g.base.find(path);
    REQUIRE(gm != nullptr);
    for (int s = 0; s < 5; ++s) {
      std::size_t idx = std::uniform_int_distribution<std::size_t>(0, m.size() - 1)(rng);
      // embedding rows that never appear have zero gradient; probe a used one
      if (path == "enc.embed") idx = static_cast<std::size_t>(kSrc[static_cast<std::size_t>(s)]) * m.cols() + idx % m.cols();
      if (path == "dec.embed") idx = static_cast<std::size_t>(kTgt[static_cast<std::size_t>(s) % kTgt.size()]) * m.cols() + idx % m.cols();
      check_grad(path + "[" + std::to_string(idx) + "]", gm->data()[idx], fd(m, idx, loss));
    }
  });
}

TEST_CASE("adapter factor gradients match finite differences at every site kind") {
  auto w = TransformerWeights::random(tiny_config(), 14);
  LoraConfig lc;
  lc.rank = 2;
  lc.alpha = 4.0f;
  lc.init = LoraInit::pissa;
  lc.attach_paths = {"dec.0.self.q", "dec.0.self.v", "dec.0.self.o", "dec.0.cross.q", "dec.0.cross.k",
                     "dec.0.cross.v", "dec.0.ff.w1",  "dec.0.ff.w2",  "dec.out.w"};
  auto ad = make_adapter(w, lc);
  // Move off the initial point so B A - B0 A0 is non-zero.
  std::mt19937_64 rng(15);
  for (auto& [p, piece] : ad.pieces) {
    add_inplace(piece.a, Matrix::normal(piece.a.rows(), piece.a.cols(), 0.1f, rng));
    add_inplace(piece.b, Matrix::normal(piece.b.rows(), piece.b.cols(), 0.1f, rng));
  }
  const TrainableScope scope{TrainableScope::Kind::lora_only, 0};
  auto g = Gradients::zeros_like(w, &ad, scope);
  CHECK_FALSE(g.has_base);
  const auto view = AdapterView::build(ad);
  const SeqExample ex{kSrc, kTgt, nullptr};
  const double ours = accumulate_example(w, &view, ex, scope, 1.0f, g).loss_sum;
  CHECK(ours == doctest::Approx(oracle::sequence_loss(w, &ad, kSrc, kTgt)).epsilon(1e-5));

  auto loss = [&] { return oracle::sequence_loss(w, &ad, kSrc, kTgt); };
  for (auto& [path, piece] : ad.pieces) {
    const auto& lg = g.lora.at(path);
    for (int s = 0; s < 2; ++s) {
      const std::size_t ia = std::uniform_int_distribution<std::size_t>(0, piece.a.size() - 1)(rng);
      check_grad(path + ".a", lg.a.data()[ia], fd(piece.a, ia, loss));
      const std::size_t ib = std::uniform_int_distribution<std::size_t>(0, piece.b.size() - 1)(rng);
      check_grad(path + ".b", lg.b.data()[ib], fd(piece.b, ib, loss));
    }
  }
}

TEST_CASE("grad_scale scales and accumulates") {
  const auto w = TransformerWeights::random(tiny_config(), 16);
  const TrainableScope scope{TrainableScope::Kind::full_model, 0};
  auto g1 = Gradients::zeros_like(w, nullptr, scope);
  auto g2 = Gradients::zeros_like(w, nullptr, scope);
  const SeqExample ex{kSrc, kTgt, nullptr};
  accumulate_example(w, nullptr, ex, scope, 1.0f, g1);
  accumulate_example(w, nullptr, ex, scope, 0.5f, g2);
  accumulate_example(w, nullptr, ex, scope, 0.5f, g2);
  CHECK(max_abs_diff(*g1.base.find("dec.0.ff.w1"), *g2.base.find("dec.0.ff.w1")) < 1e-5f);
  g2.clear();
  CHECK(frobenius_norm(*g2.base.find("dec.0.ff.w1")) == 0.0);
}

TEST_CASE("decoder_last_n scope leaves other parameters untouched") {
  auto cfg = tiny_config();
  cfg.n_dec_layers = 2;
  const auto w = TransformerWeights::random(cfg, 17);
  const auto scope = TrainableScope::parse("decoder-last-1");
  CHECK(scope.kind == TrainableScope::Kind::decoder_last_n);
  CHECK(scope.last_n == 1);
  auto g = Gradients::zeros_like(w, nullptr, scope);
  const SeqExample ex{kSrc, kTgt, nullptr};
  accumulate_example(w, nullptr, ex, scope, 1.0f, g);
  g.base.visit([&](const std::string& p, const Matrix& m) {
    const bool in = scope.base_param(p, cfg);
    CHECK_MESSAGE((frobenius_norm(m) > 0.0) == in, p);
  });
  CHECK(TrainableScope::parse(scope.to_string()).last_n == 1);
}
