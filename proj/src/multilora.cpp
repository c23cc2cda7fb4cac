#include "das/multilora.hpp"

#include <algorithm>
#include <set>

#include "das/error.hpp"
#include "das/simd.hpp"
#include "layers.hpp"

namespace das {

PackedLoraSite PackedLoraSite::pack(std::size_t d_out, std::size_t d_in, std::span<const LoraPiece* const> pieces,
                                    std::span<const float> gammas) {
  if (pieces.size() != gammas.size()) throw ParameterError("pack: one scaling per piece required");
  PackedLoraSite site;
  site.d_in = d_in;
  site.d_out = d_out;
  site.offset.push_back(0);
  std::vector<Matrix> as;
  std::vector<Matrix> bs;
  for (std::size_t i = 0; i < pieces.size(); ++i) {
    std::size_t r = 0;
    if (pieces[i] != nullptr) {
      Matrix a = pieces[i]->effective_a();
      Matrix b = pieces[i]->effective_b();
      if (a.cols() != d_in || b.rows() != d_out || a.rows() != b.cols())
        throw ShapeError("pack: adapter " + std::to_string(i) + " does not fit a " + std::to_string(d_out) + "x" +
                         std::to_string(d_in) + " weight");
      r = a.rows();
      as.push_back(std::move(a));
      bs.push_back(std::move(b));
    }
    site.offset.push_back(site.offset.back() + r);
    site.gamma.push_back(gammas[i]);
  }
  site.a_cat = as.empty() ? Matrix(0, d_in) : concat_rows(as);
  site.b_cat = bs.empty() ? Matrix(d_out, 0) : concat_cols(bs);
  return site;
}

namespace {

/// y_row += gamma_s * B_s (A_s x_row) for one row and one packed slot.
void lora_row(const PackedLoraSite& site, std::size_t s, const float* x, float* y, float* z, float* l) {
  const std::size_t r = site.rank(s);
  if (r == 0) return;
  const auto& k = simd::active();
  const std::size_t total = site.offset.back();
  k.gemm_nt(x, site.d_in, site.a_cat.data() + site.offset[s] * site.d_in, site.d_in, z, r, 1, r, site.d_in);
  k.gemm_nt(z, r, site.b_cat.data() + site.offset[s], total, l, site.d_out, 1, site.d_out, r);
  const float g = site.gamma[s];
  for (std::size_t j = 0; j < site.d_out; ++j) y[j] = y[j] + g * l[j];
}

}  // namespace

std::vector<Matrix> batched_lora_forward(const PackedLoraSite& site, std::span<const Matrix> xs) {
  if (site.count() == 0) throw ParameterError("batched_lora_forward: empty bank");
  if (xs.size() != site.count())
    throw ShapeError("batched_lora_forward: " + std::to_string(xs.size()) + " inputs for " +
                     std::to_string(site.count()) + " adapters");
  std::vector<Matrix> out;
  out.reserve(xs.size());
  std::vector<float> z(site.offset.back() + 1), l(site.d_out);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i].cols() != site.d_in)
      throw ShapeError("batched_lora_forward: input " + std::to_string(i) + " has width " +
                       std::to_string(xs[i].cols()) + ", expected " + std::to_string(site.d_in));
    Matrix y(xs[i].rows(), site.d_out);
    for (std::size_t r = 0; r < xs[i].rows(); ++r) lora_row(site, i, xs[i].row(r).data(), y.row(r).data(), z.data(), l.data());
    out.push_back(std::move(y));
  }
  return out;
}

void accumulate_lora_rows(const PackedLoraSite& site, const Matrix& x, std::span<const int> slot_of_row, Matrix& y) {
  if (x.cols() != site.d_in || y.cols() != site.d_out || x.rows() != y.rows() || slot_of_row.size() != x.rows())
    throw ShapeError("accumulate_lora_rows: shape mismatch");
  std::vector<float> z(site.offset.back() + 1), l(site.d_out);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const int s = slot_of_row[r];
    if (s < 0) continue;
    lora_row(site, static_cast<std::size_t>(s), x.row(r).data(), y.row(r).data(), z.data(), l.data());
  }
}

AdapterBank::AdapterBank(const TransformerWeights& base, std::vector<LoraAdapter> adapters)
    : base_(&base), adapters_(std::move(adapters)) {
  const std::string id = model_id(base);
  std::set<std::string> names;
  for (const auto& a : adapters_) {
    if (a.base_id != id)
      throw ConfigError("adapter '" + a.domain + "' was trained against base " + a.base_id + ", not " + id);
    if (!names.insert(a.domain).second) throw ConfigError("duplicate adapter domain '" + a.domain + "'");
    for (const auto& [path, piece] : a.pieces) {
      const Matrix* w = base.find(path);
      if (w == nullptr || !is_attachable_path(base, path))
        throw ConfigError("adapter '" + a.domain + "' attaches to unknown path '" + path + "'");
      if (piece.a.cols() != w->cols() || piece.b.rows() != w->rows())
        throw ShapeError("adapter '" + a.domain + "' piece at '" + path + "' does not match the base weight");
    }
  }
}

std::vector<std::string> AdapterBank::domains() const {
  std::vector<std::string> out;
  for (const auto& a : adapters_) out.push_back(a.domain);
  return out;
}

PackedLoraSite AdapterBank::pack(const std::string& path) const {
  const Matrix* w = base_->find(path);
  if (w == nullptr) throw ParameterError("unknown weight path '" + path + "'");
  std::vector<const LoraPiece*> pieces;
  std::vector<float> gammas;
  for (const auto& a : adapters_) {
    pieces.push_back(a.find(path));
    gammas.push_back(a.scaling);
  }
  return PackedLoraSite::pack(w->rows(), w->cols(), pieces, gammas);
}

std::vector<Matrix> batched_lora_forward(const AdapterBank& bank, const std::string& path, std::span<const Matrix> xs) {
  return batched_lora_forward(bank.pack(path), xs);
}

// ---------------------------------------------------------------------------

struct BranchDecoder::Impl {
  struct Site {
    const Matrix* w = nullptr;
    PackedLoraSite lora;
    std::vector<int> slot;  // branch -> packed slot, -1 for none
    bool any = false;
  };

  struct Layer {
    Site sq, sk, sv, so, cq, ck, cv, co, f1, f2;
    std::vector<std::vector<float>> kcache, vcache;  // per branch, len x d
    std::vector<Matrix> cross_k, cross_v;            // per branch, src x d
  };

  const TransformerWeights* w;
  std::size_t R;
  std::size_t len = 0;
  std::vector<Layer> layers;
  Site out;
  Matrix x, h, q, k, v, att, o, u, g, logits;
  std::vector<float> scores;
  std::vector<float> zbuf, lbuf;

  Site make_site(const std::string& path, const Matrix& weight, std::span<const LoraAdapter* const> branches) {
    Site s;
    s.w = &weight;
    std::vector<const LoraPiece*> pieces;
    std::vector<float> gammas;
    for (const LoraAdapter* a : branches) {
      const LoraPiece* p = a ? a->find(path) : nullptr;
      if (p != nullptr) {
        s.slot.push_back(static_cast<int>(pieces.size()));
        pieces.push_back(p);
        gammas.push_back(a->scaling);
      } else {
        s.slot.push_back(-1);
      }
    }
    s.any = !pieces.empty();
    s.lora = PackedLoraSite::pack(weight.rows(), weight.cols(), pieces, gammas);
    return s;
  }

  void linear(const Site& s, const Matrix& in, Matrix& y) {
    simd::active().gemm_nt(in.data(), in.cols(), s.w->data(), s.w->cols(), y.data(), y.cols(), in.rows(), s.w->rows(),
                           in.cols());
    if (!s.any) return;
    for (std::size_t r = 0; r < in.rows(); ++r) {
      const int slot = s.slot[r];
      if (slot >= 0) lora_row(s.lora, static_cast<std::size_t>(slot), in.row(r).data(), y.row(r).data(), zbuf.data(), lbuf.data());
    }
  }

  Impl(const TransformerWeights& weights, std::span<const LoraAdapter* const> branches, const EncoderOutput& enc)
      : w(&weights), R(branches.size()) {
    const auto& cfg = weights.config;
    const std::size_t d = cfg.d_model;
    if (R == 0) throw ParameterError("BranchDecoder needs at least one branch");
    if (enc.features.cols() != d || enc.features.rows() == 0)
      throw InputError("encoder features do not match the model");
    std::size_t max_rank = 0;
    for (const LoraAdapter* a : branches)
      if (a != nullptr)
        for (const auto& [p, piece] : a->pieces) max_rank = std::max(max_rank, piece.effective_a().rows());
    zbuf.assign(max_rank + 1, 0.0f);
    lbuf.assign(std::max({cfg.vocab_size, cfg.d_ff, d}) + 1, 0.0f);

    const std::size_t S = enc.features.rows();
    for (std::size_t l = 0; l < weights.dec.size(); ++l) {
      const auto& L = weights.dec[l];
      const std::string p = "dec." + std::to_string(l);
      Layer layer;
      layer.sq = make_site(p + ".self.q", L.self.q, branches);
      layer.sk = make_site(p + ".self.k", L.self.k, branches);
      layer.sv = make_site(p + ".self.v", L.self.v, branches);
      layer.so = make_site(p + ".self.o", L.self.o, branches);
      layer.cq = make_site(p + ".cross.q", L.cross.q, branches);
      layer.ck = make_site(p + ".cross.k", L.cross.k, branches);
      layer.cv = make_site(p + ".cross.v", L.cross.v, branches);
      layer.co = make_site(p + ".cross.o", L.cross.o, branches);
      layer.f1 = make_site(p + ".ff.w1", L.ff.w1, branches);
      layer.f2 = make_site(p + ".ff.w2", L.ff.w2, branches);
      layer.kcache.assign(R, {});
      layer.vcache.assign(R, {});
      for (std::size_t b = 0; b < R; ++b) {
        layer.kcache[b].reserve(cfg.max_tgt_len * d);
        layer.vcache[b].reserve(cfg.max_tgt_len * d);
      }
      // The unadapted projection of the encoder features is shared; each
      // adapted branch adds its own low-rank term on top.
      const Matrix base_k = matmul_nt(enc.features, L.cross.k);
      const Matrix base_v = matmul_nt(enc.features, L.cross.v);
      for (std::size_t b = 0; b < R; ++b) {
        Matrix kb = base_k, vb = base_v;
        if (layer.ck.slot[b] >= 0)
          for (std::size_t r = 0; r < S; ++r)
            lora_row(layer.ck.lora, layer.ck.slot[b], enc.features.row(r).data(), kb.row(r).data(), zbuf.data(), lbuf.data());
        if (layer.cv.slot[b] >= 0)
          for (std::size_t r = 0; r < S; ++r)
            lora_row(layer.cv.lora, layer.cv.slot[b], enc.features.row(r).data(), vb.row(r).data(), zbuf.data(), lbuf.data());
        layer.cross_k.push_back(std::move(kb));
        layer.cross_v.push_back(std::move(vb));
      }
      layers.push_back(std::move(layer));
    }
    out = make_site("dec.out.w", weights.out_w, branches);

    x = Matrix(R, d);
    h = Matrix(R, d);
    q = Matrix(R, d);
    k = Matrix(R, d);
    v = Matrix(R, d);
    att = Matrix(R, d);
    o = Matrix(R, d);
    u = Matrix(R, cfg.d_ff);
    g = Matrix(R, cfg.d_ff);
    logits = Matrix(R, cfg.vocab_size);
    scores.assign(std::max(cfg.max_tgt_len, S) + 1, 0.0f);
  }

  const Matrix& step(int token) {
    const auto& cfg = w->config;
    const std::size_t d = cfg.d_model;
    if (len + 1 > cfg.max_tgt_len) throw InputError("decode state would exceed max_tgt_len");
    if (token < 0 || static_cast<std::size_t>(token) >= cfg.vocab_size)
      throw InputError("target token " + std::to_string(token) + " outside vocabulary");
    if (len == 0 && token != kBos) throw InputError("target prefix must begin with bos");

    for (std::size_t b = 0; b < R; ++b) {
      auto row = x.row(b);
      std::copy(w->tgt_embed.row(token).begin(), w->tgt_embed.row(token).end(), row.begin());
      add_position_code(row, len);
    }
    const std::size_t S = layers.empty() ? 0 : layers[0].cross_k[0].rows();
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& L = w->dec[l];
      Layer& C = layers[l];

      for (std::size_t b = 0; b < R; ++b) layers::layer_norm_row(x.row(b), L.ln1.g, L.ln1.b, h.row(b));
      linear(C.sq, h, q);
      linear(C.sk, h, k);
      linear(C.sv, h, v);
      for (std::size_t b = 0; b < R; ++b) {
        C.kcache[b].insert(C.kcache[b].end(), k.row(b).begin(), k.row(b).end());
        C.vcache[b].insert(C.vcache[b].end(), v.row(b).begin(), v.row(b).end());
        layers::attend_row(q.row(b).data(), C.kcache[b].data(), C.vcache[b].data(), len + 1, d, cfg.n_heads,
                           att.row(b).data(), scores.data());
      }
      linear(C.so, att, o);
      add_inplace(x, o);

      for (std::size_t b = 0; b < R; ++b) layers::layer_norm_row(x.row(b), L.ln2.g, L.ln2.b, h.row(b));
      linear(C.cq, h, q);
      for (std::size_t b = 0; b < R; ++b)
        layers::attend_row(q.row(b).data(), C.cross_k[b].data(), C.cross_v[b].data(), S, d, cfg.n_heads,
                           att.row(b).data(), scores.data());
      linear(C.co, att, o);
      add_inplace(x, o);

      for (std::size_t b = 0; b < R; ++b) layers::layer_norm_row(x.row(b), L.ln3.g, L.ln3.b, h.row(b));
      linear(C.f1, h, u);
      layers::add_bias(u, L.ff.b1);
      for (std::size_t i = 0; i < u.size(); ++i) g.data()[i] = layers::gelu(u.data()[i]);
      linear(C.f2, g, o);
      layers::add_bias(o, L.ff.b2);
      add_inplace(x, o);
    }
    for (std::size_t b = 0; b < R; ++b) layers::layer_norm_row(x.row(b), w->dec_ln.g, w->dec_ln.b, h.row(b));
    linear(out, h, logits);
    layers::add_bias(logits, w->out_b);
    ++len;
    return logits;
  }
};

BranchDecoder::BranchDecoder(const TransformerWeights& w, std::span<const LoraAdapter* const> branches,
                             const EncoderOutput& enc)
    : impl_(std::make_unique<Impl>(w, branches, enc)) {}
BranchDecoder::~BranchDecoder() = default;
BranchDecoder::BranchDecoder(BranchDecoder&&) noexcept = default;
BranchDecoder& BranchDecoder::operator=(BranchDecoder&&) noexcept = default;

const Matrix& BranchDecoder::step(int token) { return impl_->step(token); }
std::size_t BranchDecoder::branch_count() const noexcept { return impl_->R; }
std::size_t BranchDecoder::length() const noexcept { return impl_->len; }

std::size_t BranchDecoder::cache_rows(std::size_t branch, std::size_t layer) const {
  return impl_->layers.at(layer).kcache.at(branch).size() / impl_->w->config.d_model;
}

// ---------------------------------------------------------------------------

Candidate candidate_from_logits(std::span<const float> logits, bool keep_distribution) {
  std::vector<float> p(logits.begin(), logits.end());
  softmax_inplace(p);
  Candidate c;
  c.token = static_cast<int>(argmax(logits));
  c.confidence = p[static_cast<std::size_t>(c.token)];
  if (keep_distribution) c.distribution = std::move(p);
  return c;
}

MultiBranchSession::MultiBranchSession(const AdapterBank& bank, const EncoderOutput& enc, FanoutMode mode)
    : mode_(mode), branch_count_(bank.size() + 1) {
  branch_ptrs_.push_back(nullptr);
  for (const auto& a : bank.adapters()) branch_ptrs_.push_back(&a);
  if (mode == FanoutMode::batched) {
    decoders_.emplace_back(bank.base(), branch_ptrs_, enc);
  } else {
    for (const LoraAdapter* a : branch_ptrs_) {
      const LoraAdapter* one[1] = {a};
      decoders_.emplace_back(bank.base(), one, enc);
    }
  }
}

std::vector<Candidate> MultiBranchSession::step(int token, bool keep_distributions) {
  std::vector<Candidate> out;
  out.reserve(branch_count_);
  for (auto& dec : decoders_) {
    const Matrix& logits = dec.step(token);
    for (std::size_t r = 0; r < logits.rows(); ++r) out.push_back(candidate_from_logits(logits.row(r), keep_distributions));
  }
  return out;
}

std::vector<Candidate> multi_decoder_step(const AdapterBank& bank, const EncoderOutput& enc,
                                          std::span<const int> prefix, bool keep_distributions) {
  if (prefix.empty() || prefix[0] != kBos) throw InputError("target prefix must begin with bos");
  MultiBranchSession session(bank, enc, FanoutMode::batched);
  std::vector<Candidate> last;
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    const bool final = i + 1 == prefix.size();
    auto c = session.step(prefix[i], final && keep_distributions);
    if (final) last = std::move(c);
  }
  return last;
}

std::vector<Candidate> multi_decoder_step_recompute(const AdapterBank& bank, const EncoderOutput& enc,
                                                    std::span<const int> prefix, bool keep_distributions) {
  std::vector<Candidate> out;
  out.push_back(candidate_from_logits(decoder_step(bank.base(), nullptr, enc, prefix), keep_distributions));
  for (const auto& a : bank.adapters())
    out.push_back(candidate_from_logits(decoder_step(bank.base(), &a, enc, prefix), keep_distributions));
  return out;
}

}  // namespace das
