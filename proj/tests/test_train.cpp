#include <cmath>
#include <random>
#include <sstream>

#include "das/datagen.hpp"
#include "das/error.hpp"
#include "das/train.hpp"
#include "doctest.h"
#include "json.hpp"
#include "oracles.hpp"

using namespace das;

namespace {

ModelConfig tiny(std::size_t vocab, std::size_t src_vocab) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.source_vocab_size = src_vocab;
  c.d_model = 32;
  c.n_heads = 4;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.d_ff = 64;
  c.max_src_len = 16;
  c.max_tgt_len = 8;
  return c;
}

std::vector<CorpusExample> copy_task(std::size_t n, std::uint64_t seed) {
  // target token = source symbol + 2, so the mapping is learnable
  std::mt19937_64 rng(seed);
  std::vector<CorpusExample> out(n);
  for (auto& ex : out) {
    const std::size_t len = 2 + uniform_index(rng, 4);
    for (std::size_t i = 0; i < len; ++i) {
      const int s = 1 + static_cast<int>(uniform_index(rng, 7));
      ex.source.push_back(s);
      ex.target.push_back(s + 2);
    }
  }
  return out;
}

double corpus_loss(const TransformerWeights& w, const LoraAdapter* ad, const std::vector<CorpusExample>& xs) {
  std::vector<SeqExample> batch;
  for (const auto& ex : xs) batch.push_back({ex.source, ex.target, nullptr});
  auto g = Gradients::zeros_like(w, nullptr, TrainableScope{});
  return loss_and_grads(w, ad, batch, TrainableScope{}, g).mean_loss;
}

}  // namespace

TEST_CASE("warmup schedule ramps linearly and then holds") {
  CHECK(scheduled_lr(1e-3, 5, 100, 0.1) == doctest::Approx(0.5e-3));
  CHECK(scheduled_lr(1e-3, 10, 100, 0.1) == doctest::Approx(1e-3));
  CHECK(scheduled_lr(1e-3, 77, 100, 0.1) == doctest::Approx(1e-3));
  CHECK(scheduled_lr(1e-3, 1, 100, 0.0) == 1e-3);
  double prev = 0.0;
  for (std::size_t t = 1; t <= 100; ++t) {
    const double lr = scheduled_lr(2.0, t, 100, 0.25);
    CHECK(lr >= prev);
    if (t >= 25) CHECK(lr == 2.0);
    prev = lr;
  }
}

TEST_CASE("AdamW follows the reference update rule on a quadratic bowl") {
  TrainConfig cfg;
  cfg.weight_decay = 0.05;
  const std::vector<double> h{1.0, 4.0, 0.25, 9.0, 2.0, 0.5};
  const std::vector<double> c{0.3, -1.2, 2.0, 0.0, -0.7, 1.1};
  Matrix x(2, 3);
  std::vector<double> xr(6, 0.0);
  for (std::size_t i = 0; i < 6; ++i) x.data()[i] = static_cast<float>(xr[i] = 0.1 * static_cast<double>(i));
  Matrix g(2, 3);
  AdamW opt(cfg);
  oracle::RefAdamW ref{cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon, cfg.weight_decay, {}, {}, 0};
  const ParamRef params[] = {{"x", &x, &g, true}};
  for (std::size_t t = 1; t <= 100; ++t) {
    const double lr = scheduled_lr(0.05, t, 100, 0.1);
    std::vector<double> gr(6);
    for (std::size_t i = 0; i < 6; ++i) {
      g.data()[i] = static_cast<float>(h[i] * (x.data()[i] - c[i]));
      gr[i] = g.data()[i];
    }
    opt.step(params, lr);
    ref.step(xr, gr, lr);
    // the parameters themselves are float32
    for (double& v : xr) v = static_cast<float>(v);
    for (std::size_t i = 0; i < 6; ++i) REQUIRE(std::fabs(x.data()[i] - xr[i]) <= 1e-6);
  }
  CHECK(opt.steps() == 100);
}

TEST_CASE("AdamW fixed point and shape errors") {
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  Matrix x{{1, 2}, {3, 4}};
  const Matrix before = x;
  Matrix g(2, 2);
  AdamW opt(cfg);
  const ParamRef p[] = {{"x", &x, &g, true}};
  for (int i = 0; i < 5; ++i) opt.step(p, 1e-2);
  CHECK(x == before);
  Matrix bad(1, 2);
  const ParamRef q[] = {{"x", &x, &bad, true}};
  CHECK_THROWS_AS(opt.step(q, 1e-2), ParameterError);
  Matrix y(3, 1), gy(3, 1);
  const ParamRef r[] = {{"x", &y, &gy, true}};
  CHECK_THROWS_AS(opt.step(r, 1e-2), ParameterError);
}

TEST_CASE("cross-entropy of degenerate models") {
  auto w = TransformerWeights::zeros(tiny(4, 4));
  const std::vector<CorpusExample> one{{"", {3}, {1, 2}, ""}};
  CHECK(corpus_loss(w, nullptr, one) == doctest::Approx(std::log(4.0)).epsilon(1e-6));
  // bias-only one-hot model predicting eos everywhere
  w.out_b(0, kEos) = 60.0f;
  const std::vector<CorpusExample> eos_only{{"", {}, {1, 2}, ""}};
  CHECK(corpus_loss(w, nullptr, eos_only) < 1e-12);
  w.out_b(0, 0) = std::nanf("");
  CHECK_THROWS_AS(corpus_loss(w, nullptr, one), NumericError);
}

TEST_CASE("frozen parameters receive no gradient") {
  const auto w = TransformerWeights::random(tiny(10, 9), 61);
  const auto data = copy_task(4, 62);
  std::vector<SeqExample> batch;
  for (const auto& ex : data) batch.push_back({ex.source, ex.target, nullptr});
  const auto scope = TrainableScope::parse("decoder-full");
  auto g = Gradients::zeros_like(w, nullptr, scope);
  loss_and_grads(w, nullptr, batch, scope, g);
  g.base.visit([&](const std::string& p, const Matrix& m) {
    if (p.rfind("enc.", 0) == 0) CHECK(frobenius_norm(m) == 0.0);
  });
  auto w2 = w;
  const auto params = collect_params(&w2, nullptr, scope, g);
  for (const auto& p : params) {
    CHECK(p.name.rfind("dec.", 0) == 0);
    if (p.name.find(".ln") != std::string::npos || p.name.find("embed") != std::string::npos ||
        p.name.find(".b") == p.name.size() - 2)
      CHECK_FALSE(p.decay);
  }
}

TEST_CASE("one epoch lowers the training loss") {
  const auto data = copy_task(10, 63);
  TrainConfig cfg;
  cfg.lr = 3e-3;
  cfg.epochs = 1;
  cfg.batch_size = 10;
  cfg.warmup_fraction = 0.0;
  const auto w0 = TransformerWeights::random(tiny(10, 9), mix_seed(cfg.seed, "init"));
  const auto w1 = train_base(tiny(10, 9), cfg, data);
  CHECK(corpus_loss(w1, nullptr, data) < corpus_loss(w0, nullptr, data));
}

TEST_CASE("training memorises a small corpus and replays deterministically") {
  const auto data = copy_task(10, 64);
  TrainConfig cfg;
  cfg.lr = 3e-3;
  cfg.epochs = 50;
  cfg.batch_size = 2;
  cfg.warmup_fraction = 0.1;
  cfg.seed = 5;
  std::ostringstream metrics;
  std::vector<double> epoch_loss;
  TrainLog log{&metrics, [&](std::size_t, double l) { epoch_loss.push_back(l); }};
  const auto w = train_base(tiny(10, 9), cfg, data, log);
  CHECK(epoch_loss.size() == 50);
  CHECK(epoch_loss.back() < epoch_loss.front());
  for (const auto& ex : data) {
    auto out = greedy_decode(w, encode(w, ex.source), 8);
    CHECK(out.back() == kEos);
    out.pop_back();
    CHECK(out == ex.target);
  }
  std::istringstream is(metrics.str());
  std::string line;
  std::size_t lines = 0;
  while (std::getline(is, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.contains("lr"));
    CHECK(j.contains("loss"));
    ++lines;
  }
  CHECK(lines == 250);
  CHECK(model_id(train_base(tiny(10, 9), cfg, data)) == model_id(w));
}

TEST_CASE("adapter training touches only the adapter") {
  const auto data = copy_task(12, 65);
  TrainConfig base_cfg;
  base_cfg.lr = 3e-3;
  base_cfg.epochs = 5;
  base_cfg.batch_size = 4;
  const auto base = train_base(tiny(10, 9), base_cfg, data);
  const auto id = model_id(base);

  TrainConfig cfg;
  cfg.scope = TrainableScope::parse("lora-only");
  cfg.lr = 3e-3;
  cfg.epochs = 0;
  LoraConfig lc;
  const auto init = train_adapter(base, data, cfg, lc, "toy");
  CHECK(init.domain == "toy");
  CHECK(init.base_id == id);
  const auto fresh = make_adapter(base, lc);
  for (const auto& [p, piece] : init.pieces) CHECK(piece.a == fresh.pieces.at(p).a);

  cfg.epochs = 3;
  const auto trained = train_adapter(base, data, cfg, lc, "toy");
  CHECK(model_id(base) == id);
  double moved = 0.0;
  for (const auto& [p, piece] : trained.pieces) moved += frobenius_norm(sub(piece.b, fresh.pieces.at(p).b));
  CHECK(moved > 0.0);
  CHECK(corpus_loss(base, &trained, data) < corpus_loss(base, nullptr, data));

  cfg.scope = TrainableScope::parse("full-model");
  CHECK_THROWS_AS(train_adapter(base, data, cfg, lc, "toy"), ConfigError);
}

TEST_CASE("configs, presets and divergence") {
  const auto recipe = TrainConfig::from_preset("paper-recipe");
  CHECK(recipe.lr == 3e-6);
  CHECK(recipe.epochs == 10);
  CHECK(recipe.batch_size == 16);
  CHECK(recipe.warmup_fraction == 0.10);
  CHECK_THROWS_AS(TrainConfig::from_preset("nope"), ConfigError);
  const auto back = TrainConfig::from_json(recipe.to_json());
  CHECK(back.lr == recipe.lr);
  CHECK(back.preset == "paper-recipe");
  TrainConfig bad;
  bad.warmup_fraction = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = TrainConfig{};
  bad.lr = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  TrainConfig huge;
  huge.lr = 1e30;
  huge.epochs = 3;
  huge.warmup_fraction = 0.0;
  CHECK_THROWS_AS(train_base(tiny(10, 9), huge, copy_task(8, 66)), TrainingError);
}
