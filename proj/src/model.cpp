#include "das/model.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <optional>
#include <random>

#include "das/backprop.hpp"
#include "das/error.hpp"
#include "das/multilora.hpp"

namespace das {

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (vocab_size < 4) fail("vocab_size must be >= 4 (bos, eos, pad, content)");
  if (source_vocab_size < 1) fail("source_vocab_size must be >= 1");
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (d_ff == 0) fail("d_ff must be positive");
  if (max_src_len == 0 || max_tgt_len < 2) fail("sequence limits too small");
}

namespace {

LayerNormWeights make_ln(std::size_t d, float gain) { return {Matrix(1, d, gain), Matrix(1, d, 0.0f)}; }

AttentionWeights make_attn(std::size_t d, std::mt19937_64* rng) {
  if (rng == nullptr) return {Matrix(d, d), Matrix(d, d), Matrix(d, d), Matrix(d, d)};
  const float s = 1.0f / std::sqrt(static_cast<float>(d));
  AttentionWeights a;
  a.q = Matrix::normal(d, d, s, *rng);
  a.k = Matrix::normal(d, d, s, *rng);
  a.v = Matrix::normal(d, d, s, *rng);
  a.o = Matrix::normal(d, d, s * 0.5f, *rng);
  return a;
}

FeedForwardWeights make_ff(std::size_t d, std::size_t d_ff, std::mt19937_64* rng) {
  if (rng == nullptr) return {Matrix(d_ff, d), Matrix(1, d_ff), Matrix(d, d_ff), Matrix(1, d)};
  FeedForwardWeights f;
  f.w1 = Matrix::normal(d_ff, d, 1.0f / std::sqrt(static_cast<float>(d)), *rng);
  f.b1 = Matrix(1, d_ff);
  f.w2 = Matrix::normal(d, d_ff, 0.5f / std::sqrt(static_cast<float>(d_ff)), *rng);
  f.b2 = Matrix(1, d);
  return f;
}

TransformerWeights build(const ModelConfig& cfg, std::mt19937_64* rng) {
  cfg.validate();
  const std::size_t d = cfg.d_model;
  const float gain = rng ? 1.0f : 0.0f;
  TransformerWeights w;
  w.config = cfg;
  w.src_embed = rng ? Matrix::normal(cfg.source_vocab_size, d, 0.5f, *rng) : Matrix(cfg.source_vocab_size, d);
  for (std::size_t l = 0; l < cfg.n_enc_layers; ++l)
    w.enc.push_back({make_ln(d, gain), make_attn(d, rng), make_ln(d, gain), make_ff(d, cfg.d_ff, rng)});
  w.enc_ln = make_ln(d, gain);
  w.tgt_embed = rng ? Matrix::normal(cfg.vocab_size, d, 0.5f, *rng) : Matrix(cfg.vocab_size, d);
  for (std::size_t l = 0; l < cfg.n_dec_layers; ++l)
    w.dec.push_back({make_ln(d, gain), make_attn(d, rng), make_ln(d, gain), make_attn(d, rng), make_ln(d, gain),
                     make_ff(d, cfg.d_ff, rng)});
  w.dec_ln = make_ln(d, gain);
  w.out_w = rng ? Matrix::normal(cfg.vocab_size, d, 0.5f / std::sqrt(static_cast<float>(d)), *rng)
                : Matrix(cfg.vocab_size, d);
  w.out_b = Matrix(1, cfg.vocab_size);
  return w;
}

template <typename W, typename F>
void visit_impl(W& w, F&& fn) {
  auto ln = [&](const std::string& p, auto& n) {
    fn(p + ".g", n.g);
    fn(p + ".b", n.b);
  };
  auto attn = [&](const std::string& p, auto& a) {
    fn(p + ".q", a.q);
    fn(p + ".k", a.k);
    fn(p + ".v", a.v);
    fn(p + ".o", a.o);
  };
  auto ff = [&](const std::string& p, auto& f) {
    fn(p + ".w1", f.w1);
    fn(p + ".b1", f.b1);
    fn(p + ".w2", f.w2);
    fn(p + ".b2", f.b2);
  };
  fn(std::string("enc.embed"), w.src_embed);
  for (std::size_t l = 0; l < w.enc.size(); ++l) {
    const std::string p = "enc." + std::to_string(l);
    ln(p + ".ln1", w.enc[l].ln1);
    attn(p + ".self", w.enc[l].self);
    ln(p + ".ln2", w.enc[l].ln2);
    ff(p + ".ff", w.enc[l].ff);
  }
  ln("enc.ln", w.enc_ln);
  fn(std::string("dec.embed"), w.tgt_embed);
  for (std::size_t l = 0; l < w.dec.size(); ++l) {
    const std::string p = "dec." + std::to_string(l);
    ln(p + ".ln1", w.dec[l].ln1);
    attn(p + ".self", w.dec[l].self);
    ln(p + ".ln2", w.dec[l].ln2);
    attn(p + ".cross", w.dec[l].cross);
    ln(p + ".ln3", w.dec[l].ln3);
    ff(p + ".ff", w.dec[l].ff);
  }
  ln("dec.ln", w.dec_ln);
  fn(std::string("dec.out.w"), w.out_w);
  fn(std::string("dec.out.b"), w.out_b);
}

}  // namespace

TransformerWeights TransformerWeights::zeros(const ModelConfig& config) { return build(config, nullptr); }

TransformerWeights TransformerWeights::random(const ModelConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return build(config, &rng);
}

void TransformerWeights::visit(const std::function<void(const std::string&, Matrix&)>& fn) { visit_impl(*this, fn); }

void TransformerWeights::visit(const std::function<void(const std::string&, const Matrix&)>& fn) const {
  visit_impl(*this, fn);
}

Matrix* TransformerWeights::find(const std::string& path) {
  Matrix* hit = nullptr;
  visit([&](const std::string& p, Matrix& m) {
    if (p == path) hit = &m;
  });
  return hit;
}

const Matrix* TransformerWeights::find(const std::string& path) const {
  const Matrix* hit = nullptr;
  visit([&](const std::string& p, const Matrix& m) {
    if (p == path) hit = &m;
  });
  return hit;
}

std::size_t TransformerWeights::parameter_count() const {
  std::size_t n = 0;
  visit([&](const std::string&, const Matrix& m) { n += m.size(); });
  return n;
}

std::uint64_t TransformerWeights::checksum() const {
  std::uint64_t h = 1469598103934665603ull;
  visit([&](const std::string& p, const Matrix& m) {
    for (unsigned char c : p) h = (h ^ c) * 1099511628211ull;
    const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
    for (std::size_t i = 0; i < m.size() * sizeof(float); ++i) h = (h ^ bytes[i]) * 1099511628211ull;
  });
  return h;
}

std::string model_id(const TransformerWeights& w) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(w.checksum()));
  return buf;
}

void add_position_code(std::span<float> row, std::size_t pos) {
  const std::size_t d = row.size();
  for (std::size_t i = 0; i < d; i += 2) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
    const double angle = static_cast<double>(pos) * freq;
    row[i] += static_cast<float>(std::sin(angle));
    if (i + 1 < d) row[i + 1] += static_cast<float>(std::cos(angle));
  }
}

EncoderOutput encode(const TransformerWeights& w, std::span<const int> source) {
  return EncoderOutput{encoder_forward(w, source)};
}

std::vector<float> decoder_step(const TransformerWeights& w, const LoraAdapter* adapter, const EncoderOutput& enc,
                                std::span<const int> prefix) {
  std::optional<AdapterView> view;
  if (adapter != nullptr) view = AdapterView::build(*adapter);
  const Matrix logits = decoder_forward(w, view ? &*view : nullptr, enc.features, prefix);
  const auto last = logits.row(logits.rows() - 1);
  return {last.begin(), last.end()};
}

std::vector<int> greedy_decode(const TransformerWeights& w, const EncoderOutput& enc, std::size_t max_len,
                               const LoraAdapter* adapter) {
  if (max_len > w.config.max_tgt_len)
    throw ParameterError("max_len " + std::to_string(max_len) + " exceeds max_tgt_len");
  const LoraAdapter* branch[1] = {adapter};
  BranchDecoder dec(w, branch, enc);
  std::vector<int> out;
  int token = kBos;
  while (out.size() < max_len) {
    const Matrix& logits = dec.step(token);
    token = static_cast<int>(argmax(logits.row(0)));
    out.push_back(token);
    if (token == kEos) break;
  }
  return out;
}

}  // namespace das
