#include <filesystem>
#include <fstream>

#include "das/checkpoint.hpp"
#include "das/error.hpp"
#include "das/lora.hpp"
#include "doctest.h"

using namespace das;
namespace fs = std::filesystem;

namespace {

ModelConfig cfg() {
  ModelConfig c;
  c.vocab_size = 12;
  c.source_vocab_size = 9;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_enc_layers = 1;
  c.n_dec_layers = 2;
  c.d_ff = 24;
  c.max_src_len = 20;
  c.max_tgt_len = 9;
  return c;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const char* name) : path(fs::temp_directory_path() / name) { fs::remove_all(path); }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("model checkpoints round trip bit-exactly") {
  TempDir tmp("das_ckpt_model");
  const auto w = TransformerWeights::random(cfg(), 71);
  save_model(tmp.path / "m", w, {{"note", "x"}});
  nlohmann::json meta;
  const auto back = load_model(tmp.path / "m", &meta);
  CHECK(meta.at("note") == "x");
  CHECK(back.config == w.config);
  CHECK(model_id(back) == model_id(w));
  w.visit([&](const std::string& p, const Matrix& m) { CHECK(*back.find(p) == m); });
  CHECK(config_from_json(config_to_json(w.config)) == w.config);

  save_model(tmp.path / "m2", back, {{"note", "x"}});
  for (const auto& e : fs::directory_iterator(tmp.path / "m"))
    CHECK(slurp(e.path()) == slurp(tmp.path / "m2" / e.path().filename()));
  const auto manifest = nlohmann::json::parse(slurp(tmp.path / "m" / "manifest.json"));
  CHECK(manifest.at("id") == model_id(w));
  CHECK(manifest.at("format") == "das-checkpoint-v1");
}

TEST_CASE("corrupted model checkpoints are rejected") {
  TempDir tmp("das_ckpt_bad");
  const auto w = TransformerWeights::random(cfg(), 72);
  save_model(tmp.path, w);
  {
    std::fstream f(tmp.path / "dec.out.b", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.put('\x7f');
  }
  CHECK_THROWS_AS(load_model(tmp.path), IoError);
  fs::remove(tmp.path / "dec.out.b");
  CHECK_THROWS_AS(load_model(tmp.path), IoError);
  CHECK_THROWS_AS(load_model(tmp.path / "missing"), IoError);
}

TEST_CASE("adapter checkpoints record their base and scaling") {
  TempDir tmp("das_ckpt_adapter");
  const auto w = TransformerWeights::random(cfg(), 73);
  auto ad = make_adapter(w, LoraConfig{});
  ad.domain = "music-toy";
  save_adapter(tmp.path / "a", ad, {{"epochs", 2}});
  CHECK(adapter_base_id(tmp.path / "a") == model_id(w));
  const auto back = load_adapter(tmp.path / "a", model_id(w));
  CHECK(back.domain == "music-toy");
  CHECK(back.rank == 4);
  CHECK(back.alpha == 8.0f);
  CHECK(back.scaling == ad.scaling);
  CHECK(back.init == LoraInit::pissa);
  REQUIRE(back.pieces.size() == ad.pieces.size());
  for (const auto& [p, piece] : ad.pieces) {
    CHECK(back.pieces.at(p).a == piece.a);
    CHECK(back.pieces.at(p).b0 == piece.b0);
  }
  const auto manifest = nlohmann::json::parse(slurp(tmp.path / "a" / "manifest.json"));
  CHECK(manifest.at("scaling_rule") == "alpha/sqrt(rank)");
  CHECK_THROWS_AS(load_adapter(tmp.path / "a", "0000000000000000"), ConfigError);
  CHECK_THROWS_AS(load_model(tmp.path / "a"), IoError);
}
