#include "das/backprop.hpp"

#include <cctype>
#include <cmath>
#include <string>
#include <vector>

#include "das/error.hpp"
#include "das/simd.hpp"
#include "layers.hpp"

namespace das {

AdapterView AdapterView::build(const LoraAdapter& adapter) {
  AdapterView view;
  for (const auto& [path, piece] : adapter.pieces) {
    Site s;
    s.a = piece.effective_a();
    s.b = piece.effective_b();
    s.gamma = adapter.scaling;
    s.trainable_rank = piece.rank();
    view.sites.emplace(path, std::move(s));
  }
  return view;
}

const AdapterView::Site* AdapterView::find(const std::string& path) const {
  auto it = sites.find(path);
  return it == sites.end() ? nullptr : &it->second;
}

bool TrainableScope::base_param(const std::string& path, const ModelConfig& config) const {
  switch (kind) {
    case Kind::full_model:
      return true;
    case Kind::decoder_full:
      return path.rfind("dec.", 0) == 0;
    case Kind::decoder_last_n: {
      if (path.rfind("dec.ln.", 0) == 0 || path.rfind("dec.out.", 0) == 0) return true;
      if (path.rfind("dec.", 0) != 0) return false;
      const std::string rest = path.substr(4);
      if (rest.empty() || !std::isdigit(static_cast<unsigned char>(rest[0]))) return false;
      const std::size_t layer = std::stoul(rest);
      return layer + last_n >= config.n_dec_layers;
    }
    case Kind::lora_only:
      return false;
  }
  return false;
}

TrainableScope TrainableScope::parse(const std::string& text) {
  TrainableScope s;
  if (text == "full-model") s.kind = Kind::full_model;
  else if (text == "decoder-full") s.kind = Kind::decoder_full;
  else if (text == "lora-only") s.kind = Kind::lora_only;
  else if (text.rfind("decoder-last-", 0) == 0) {
    s.kind = Kind::decoder_last_n;
    try {
      s.last_n = std::stoul(text.substr(13));
    } catch (const std::exception&) {
      throw ConfigError("bad trainable scope: " + text);
    }
  } else {
    throw ConfigError("unknown trainable scope: " + text +
                      " (expected full-model, decoder-full, decoder-last-<n>, lora-only)");
  }
  return s;
}

std::string TrainableScope::to_string() const {
  switch (kind) {
    case Kind::full_model:
      return "full-model";
    case Kind::decoder_full:
      return "decoder-full";
    case Kind::decoder_last_n:
      return "decoder-last-" + std::to_string(last_n);
    case Kind::lora_only:
      return "lora-only";
  }
  return "?";
}

Gradients Gradients::zeros_like(const TransformerWeights& w, const LoraAdapter* adapter, const TrainableScope& scope) {
  Gradients g;
  if (scope.kind != TrainableScope::Kind::lora_only) {
    g.has_base = true;
    g.base = TransformerWeights::zeros(w.config);
  }
  if (adapter != nullptr && scope.lora()) {
    for (const auto& [path, piece] : adapter->pieces)
      g.lora.emplace(path, LoraGrad{Matrix(piece.a.rows(), piece.a.cols()), Matrix(piece.b.rows(), piece.b.cols())});
  }
  return g;
}

void Gradients::clear() {
  if (has_base) base.visit([](const std::string&, Matrix& m) { m.fill(0.0f); });
  for (auto& [path, lg] : lora) {
    lg.a.fill(0.0f);
    lg.b.fill(0.0f);
  }
}

namespace {

using Site = AdapterView::Site;

// C += A^T B
void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  const auto& k = simd::active();
  for (std::size_t t = 0; t < a.rows(); ++t) {
    const float* bt = b.row(t).data();
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const float av = a(t, i);
      if (av != 0.0f) k.axpy(av, bt, c.row(i).data(), b.cols());
    }
  }
}

void colsum_acc(const Matrix& dy, Matrix& db) {
  float* d = db.data();
  for (std::size_t r = 0; r < dy.rows(); ++r) {
    const float* row = dy.row(r).data();
    for (std::size_t c = 0; c < dy.cols(); ++c) d[c] += row[c];
  }
}

struct LinearTape {
  Matrix x;
  Matrix z;
};

Matrix linear_fwd(const Matrix& x, const Matrix& w, const Site* s, LinearTape* tape) {
  Matrix y = matmul_nt(x, w);
  if (s != nullptr) {
    Matrix z = matmul_nt(x, s->a);
    const Matrix l = matmul_nt(z, s->b);
    float* yp = y.data();
    const float* lp = l.data();
    for (std::size_t i = 0; i < y.size(); ++i) yp[i] = yp[i] + s->gamma * lp[i];
    if (tape) tape->z = std::move(z);
  }
  if (tape) tape->x = x;
  return y;
}

/// Returns dX (empty when !need_dx).
Matrix linear_bwd(const Matrix& dy, const Matrix& w, const Site* s, const LinearTape& t, Matrix* dw, LoraGrad* dl,
                  bool need_dx) {
  if (dw != nullptr) matmul_tn_acc(dy, t.x, *dw);
  Matrix dx;
  if (need_dx) dx = matmul(dy, w);
  if (s != nullptr && (dl != nullptr || need_dx)) {
    const Matrix dlow = scaled(dy, s->gamma);
    const Matrix dz = matmul(dlow, s->b);  // n x r_eff
    if (dl != nullptr) {
      const std::size_t tr = s->trainable_rank;
      const Matrix db = matmul_tn(dlow, t.z);  // d_out x r_eff
      const Matrix da = matmul_tn(dz, t.x);    // r_eff x d_in
      for (std::size_t i = 0; i < tr; ++i)
        for (std::size_t c = 0; c < da.cols(); ++c) dl->a(i, c) += da(i, c);
      for (std::size_t r = 0; r < db.rows(); ++r)
        for (std::size_t i = 0; i < tr; ++i) dl->b(r, i) += db(r, i);
    }
    if (need_dx) add_inplace(dx, matmul(dz, s->a));
  }
  return dx;
}

struct LnTape {
  Matrix xhat;
  std::vector<float> rstd;
};

Matrix ln_fwd(const Matrix& x, const LayerNormWeights& p, LnTape* tape) {
  Matrix y(x.rows(), x.cols());
  if (tape) {
    tape->xhat = Matrix(x.rows(), x.cols());
    tape->rstd.assign(x.rows(), 0.0f);
  }
  for (std::size_t r = 0; r < x.rows(); ++r) {
    float mean = 0.0f;
    const float rstd = layers::layer_norm_row(x.row(r), p.g, p.b, y.row(r), &mean);
    if (tape) {
      tape->rstd[r] = rstd;
      for (std::size_t c = 0; c < x.cols(); ++c) tape->xhat(r, c) = (x(r, c) - mean) * rstd;
    }
  }
  return y;
}

Matrix ln_bwd(const Matrix& dy, const LayerNormWeights& p, const LnTape& t, Matrix* dg, Matrix* db) {
  const std::size_t n = dy.cols();
  Matrix dx(dy.rows(), n);
  std::vector<float> dxhat(n);
  for (std::size_t r = 0; r < dy.rows(); ++r) {
    float mean_d = 0.0f, mean_dx = 0.0f;
    for (std::size_t c = 0; c < n; ++c) {
      const float d = dy(r, c);
      const float xh = t.xhat(r, c);
      if (dg) (*dg)(0, c) += d * xh;
      if (db) (*db)(0, c) += d;
      dxhat[c] = d * p.g(0, c);
      mean_d += dxhat[c];
      mean_dx += dxhat[c] * xh;
    }
    mean_d /= static_cast<float>(n);
    mean_dx /= static_cast<float>(n);
    for (std::size_t c = 0; c < n; ++c) dx(r, c) = t.rstd[r] * (dxhat[c] - mean_d - t.xhat(r, c) * mean_dx);
  }
  return dx;
}

struct AttnSites {
  const AttentionWeights* w;
  const Site* q;
  const Site* k;
  const Site* v;
  const Site* o;
};

struct AttnGrads {
  AttentionWeights* w = nullptr;  // base grads; individual entries may be skipped
  bool q = false, k = false, v = false, o = false;
  LoraGrad* lq = nullptr;
  LoraGrad* lk = nullptr;
  LoraGrad* lv = nullptr;
  LoraGrad* lo = nullptr;
};

struct AttnTape {
  LinearTape q, k, v, o;
  Matrix qm, km, vm;
  std::vector<float> probs;  // heads x T x S
};

Matrix attn_fwd(const Matrix& hq, const Matrix& hkv, const AttnSites& s, bool causal, std::size_t n_heads,
                AttnTape* tape) {
  Matrix q = linear_fwd(hq, s.w->q, s.q, tape ? &tape->q : nullptr);
  Matrix k = linear_fwd(hkv, s.w->k, s.k, tape ? &tape->k : nullptr);
  Matrix v = linear_fwd(hkv, s.w->v, s.v, tape ? &tape->v : nullptr);
  const std::size_t T = hq.rows(), S = hkv.rows(), d = q.cols(), hd = d / n_heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
  const auto& kern = simd::active();
  Matrix ctx(T, d);
  if (tape) tape->probs.assign(n_heads * T * S, 0.0f);
  std::vector<float> scores(S);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * hd;
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t len = causal ? t + 1 : S;
      for (std::size_t j = 0; j < len; ++j) scores[j] = kern.dot(q.row(t).data() + off, k.row(j).data() + off, hd) * scale;
      softmax_inplace(std::span<float>(scores.data(), len));
      float* o = ctx.row(t).data() + off;
      for (std::size_t j = 0; j < len; ++j) kern.axpy(scores[j], v.row(j).data() + off, o, hd);
      if (tape) std::copy_n(scores.data(), len, tape->probs.data() + (h * T + t) * S);
    }
  }
  Matrix out = linear_fwd(ctx, s.w->o, s.o, tape ? &tape->o : nullptr);
  if (tape) {
    tape->qm = std::move(q);
    tape->km = std::move(k);
    tape->vm = std::move(v);
  }
  return out;
}

/// Returns (dhq, dhkv).
std::pair<Matrix, Matrix> attn_bwd(const Matrix& dout, const AttnSites& s, const AttnTape& t, bool causal,
                                   std::size_t n_heads, const AttnGrads& g, bool need_dhkv) {
  Matrix dctx = linear_bwd(dout, s.w->o, s.o, t.o, g.o ? &g.w->o : nullptr, g.lo, true);
  const std::size_t T = t.qm.rows(), S = t.km.rows(), d = t.qm.cols(), hd = d / n_heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
  const auto& kern = simd::active();
  Matrix dq(T, d), dk(S, d), dv(S, d);
  std::vector<float> dp(S);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * hd;
    for (std::size_t tt = 0; tt < T; ++tt) {
      const std::size_t len = causal ? tt + 1 : S;
      const float* p = t.probs.data() + (h * T + tt) * S;
      const float* dc = dctx.row(tt).data() + off;
      float dot_pd = 0.0f;
      for (std::size_t j = 0; j < len; ++j) {
        dp[j] = kern.dot(dc, t.vm.row(j).data() + off, hd);
        kern.axpy(p[j], dc, dv.row(j).data() + off, hd);
        dot_pd += p[j] * dp[j];
      }
      for (std::size_t j = 0; j < len; ++j) {
        const float ds = p[j] * (dp[j] - dot_pd) * scale;
        if (ds == 0.0f) continue;
        kern.axpy(ds, t.km.row(j).data() + off, dq.row(tt).data() + off, hd);
        kern.axpy(ds, t.qm.row(tt).data() + off, dk.row(j).data() + off, hd);
      }
    }
  }
  Matrix dhq = linear_bwd(dq, s.w->q, s.q, t.q, g.q ? &g.w->q : nullptr, g.lq, true);
  Matrix dhkv;
  const bool kv_params = g.k || g.v || g.lk != nullptr || g.lv != nullptr;
  if (need_dhkv || kv_params) {
    Matrix dk_in = linear_bwd(dk, s.w->k, s.k, t.k, g.k ? &g.w->k : nullptr, g.lk, need_dhkv);
    Matrix dv_in = linear_bwd(dv, s.w->v, s.v, t.v, g.v ? &g.w->v : nullptr, g.lv, need_dhkv);
    if (need_dhkv) {
      add_inplace(dk_in, dv_in);
      dhkv = std::move(dk_in);
    }
  }
  return {std::move(dhq), std::move(dhkv)};
}

struct FfSites {
  const FeedForwardWeights* w;
  const Site* w1;
  const Site* w2;
};

struct FfGrads {
  FeedForwardWeights* w = nullptr;
  bool w1 = false, b1 = false, w2 = false, b2 = false;
  LoraGrad* l1 = nullptr;
  LoraGrad* l2 = nullptr;
};

struct FfTape {
  LinearTape l1, l2;
  Matrix u;
};

Matrix ff_fwd(const Matrix& x, const FfSites& s, FfTape* tape) {
  Matrix u = linear_fwd(x, s.w->w1, s.w1, tape ? &tape->l1 : nullptr);
  layers::add_bias(u, s.w->b1);
  Matrix g(u.rows(), u.cols());
  for (std::size_t i = 0; i < u.size(); ++i) g.data()[i] = layers::gelu(u.data()[i]);
  Matrix y = linear_fwd(g, s.w->w2, s.w2, tape ? &tape->l2 : nullptr);
  layers::add_bias(y, s.w->b2);
  if (tape) tape->u = std::move(u);
  return y;
}

Matrix ff_bwd(const Matrix& dy, const FfSites& s, const FfTape& t, const FfGrads& g) {
  if (g.b2) colsum_acc(dy, g.w->b2);
  Matrix du = linear_bwd(dy, s.w->w2, s.w2, t.l2, g.w2 ? &g.w->w2 : nullptr, g.l2, true);
  for (std::size_t i = 0; i < du.size(); ++i) du.data()[i] *= layers::gelu_grad(t.u.data()[i]);
  if (g.b1) colsum_acc(du, g.w->b1);
  return linear_bwd(du, s.w->w1, s.w1, t.l1, g.w1 ? &g.w->w1 : nullptr, g.l1, true);
}

Matrix embed(const Matrix& table, std::span<const int> ids, std::size_t vocab, const char* what) {
  Matrix x(ids.size(), table.cols());
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= vocab)
      throw InputError(std::string(what) + " id " + std::to_string(ids[t]) + " outside vocabulary of " +
                       std::to_string(vocab));
    std::copy(table.row(ids[t]).begin(), table.row(ids[t]).end(), x.row(t).begin());
    add_position_code(x.row(t), t);
  }
  return x;
}

struct EncLayerTape {
  LnTape ln1, ln2;
  AttnTape att;
  FfTape ff;
};

struct EncTape {
  std::vector<EncLayerTape> layers;
  LnTape ln;
};

Matrix encoder_run(const TransformerWeights& w, std::span<const int> source, EncTape* tape) {
  const auto& cfg = w.config;
  if (source.empty() || source.size() > cfg.max_src_len)
    throw InputError("source length " + std::to_string(source.size()) + " outside [1, " +
                     std::to_string(cfg.max_src_len) + "]");
  Matrix x = embed(w.src_embed, source, cfg.source_vocab_size, "source symbol");
  if (tape) tape->layers.resize(w.enc.size());
  for (std::size_t l = 0; l < w.enc.size(); ++l) {
    const auto& L = w.enc[l];
    EncLayerTape* lt = tape ? &tape->layers[l] : nullptr;
    const Matrix h1 = ln_fwd(x, L.ln1, lt ? &lt->ln1 : nullptr);
    const AttnSites as{&L.self, nullptr, nullptr, nullptr, nullptr};
    add_inplace(x, attn_fwd(h1, h1, as, false, cfg.n_heads, lt ? &lt->att : nullptr));
    const Matrix h2 = ln_fwd(x, L.ln2, lt ? &lt->ln2 : nullptr);
    const FfSites fs{&L.ff, nullptr, nullptr};
    add_inplace(x, ff_fwd(h2, fs, lt ? &lt->ff : nullptr));
  }
  return ln_fwd(x, w.enc_ln, tape ? &tape->ln : nullptr);
}

void encoder_backward(const TransformerWeights& w, std::span<const int> source, const EncTape& tape, Matrix dx,
                      TransformerWeights& g) {
  const auto& cfg = w.config;
  dx = ln_bwd(dx, w.enc_ln, tape.ln, &g.enc_ln.g, &g.enc_ln.b);
  for (std::size_t l = w.enc.size(); l-- > 0;) {
    const auto& L = w.enc[l];
    auto& G = g.enc[l];
    const auto& lt = tape.layers[l];
    const FfSites fs{&L.ff, nullptr, nullptr};
    FfGrads fg{&G.ff, true, true, true, true, nullptr, nullptr};
    add_inplace(dx, ln_bwd(ff_bwd(dx, fs, lt.ff, fg), L.ln2, lt.ln2, &G.ln2.g, &G.ln2.b));
    const AttnSites as{&L.self, nullptr, nullptr, nullptr, nullptr};
    AttnGrads ag;
    ag.w = &G.self;
    ag.q = ag.k = ag.v = ag.o = true;
    auto [dhq, dhkv] = attn_bwd(dx, as, lt.att, false, cfg.n_heads, ag, true);
    add_inplace(dhq, dhkv);
    add_inplace(dx, ln_bwd(dhq, L.ln1, lt.ln1, &G.ln1.g, &G.ln1.b));
  }
  for (std::size_t t = 0; t < source.size(); ++t) {
    float* row = g.src_embed.row(source[t]).data();
    for (std::size_t c = 0; c < dx.cols(); ++c) row[c] += dx(t, c);
  }
}

struct DecLayerTape {
  LnTape ln1, ln2, ln3;
  AttnTape self, cross;
  FfTape ff;
};

struct DecTape {
  std::vector<DecLayerTape> layers;
  LnTape ln;
  LinearTape out;
};

std::string dec_path(std::size_t l, const char* site) { return "dec." + std::to_string(l) + "." + site; }

const Site* site_of(const AdapterView* av, const std::string& path) { return av ? av->find(path) : nullptr; }

AttnSites dec_attn_sites(const AttentionWeights& w, const AdapterView* av, std::size_t l, const char* block) {
  const std::string p = dec_path(l, block);
  return AttnSites{&w, site_of(av, p + ".q"), site_of(av, p + ".k"), site_of(av, p + ".v"), site_of(av, p + ".o")};
}

FfSites dec_ff_sites(const FeedForwardWeights& w, const AdapterView* av, std::size_t l) {
  return FfSites{&w, site_of(av, dec_path(l, "ff.w1")), site_of(av, dec_path(l, "ff.w2"))};
}

Matrix decoder_run(const TransformerWeights& w, const AdapterView* av, const Matrix& enc, std::span<const int> tokens,
                   DecTape* tape) {
  const auto& cfg = w.config;
  if (tokens.empty() || tokens.size() > cfg.max_tgt_len)
    throw InputError("target prefix length " + std::to_string(tokens.size()) + " outside [1, " +
                     std::to_string(cfg.max_tgt_len) + "]");
  if (tokens[0] != kBos) throw InputError("target prefix must begin with bos");
  Matrix x = embed(w.tgt_embed, tokens, cfg.vocab_size, "target token");
  if (tape) tape->layers.resize(w.dec.size());
  for (std::size_t l = 0; l < w.dec.size(); ++l) {
    const auto& L = w.dec[l];
    DecLayerTape* lt = tape ? &tape->layers[l] : nullptr;
    const Matrix h1 = ln_fwd(x, L.ln1, lt ? &lt->ln1 : nullptr);
    add_inplace(x, attn_fwd(h1, h1, dec_attn_sites(L.self, av, l, "self"), true, cfg.n_heads, lt ? &lt->self : nullptr));
    const Matrix h2 = ln_fwd(x, L.ln2, lt ? &lt->ln2 : nullptr);
    add_inplace(x, attn_fwd(h2, enc, dec_attn_sites(L.cross, av, l, "cross"), false, cfg.n_heads,
                            lt ? &lt->cross : nullptr));
    const Matrix h3 = ln_fwd(x, L.ln3, lt ? &lt->ln3 : nullptr);
    add_inplace(x, ff_fwd(h3, dec_ff_sites(L.ff, av, l), lt ? &lt->ff : nullptr));
  }
  const Matrix hf = ln_fwd(x, w.dec_ln, tape ? &tape->ln : nullptr);
  Matrix logits = linear_fwd(hf, w.out_w, site_of(av, "dec.out.w"), tape ? &tape->out : nullptr);
  layers::add_bias(logits, w.out_b);
  return logits;
}

LoraGrad* lora_grad(Gradients& g, const AdapterView* av, const std::string& path) {
  if (av == nullptr) return nullptr;
  auto it = g.lora.find(path);
  return it == g.lora.end() ? nullptr : &it->second;
}

/// Returns d(enc) when requested.
Matrix decoder_backward(const TransformerWeights& w, const AdapterView* av, std::span<const int> tokens,
                        const DecTape& tape, Matrix dlogits, const TrainableScope& scope, Gradients& g,
                        bool need_denc) {
  const auto& cfg = w.config;
  TransformerWeights* gb = g.has_base ? &g.base : nullptr;
  auto in = [&](const std::string& p) { return gb != nullptr && scope.base_param(p, cfg); };

  if (in("dec.out.b")) colsum_acc(dlogits, gb->out_b);
  Matrix dx = linear_bwd(dlogits, w.out_w, site_of(av, "dec.out.w"), tape.out, in("dec.out.w") ? &gb->out_w : nullptr,
                         lora_grad(g, av, "dec.out.w"), true);
  dx = ln_bwd(dx, w.dec_ln, tape.ln, in("dec.ln.g") ? &gb->dec_ln.g : nullptr, in("dec.ln.b") ? &gb->dec_ln.b : nullptr);

  Matrix denc;
  for (std::size_t l = w.dec.size(); l-- > 0;) {
    const auto& L = w.dec[l];
    const auto& lt = tape.layers[l];
    DecoderLayerWeights* G = gb ? &gb->dec[l] : nullptr;
    auto grad_ptr = [&](const char* site, Matrix* m) -> Matrix* { return in(dec_path(l, site)) ? m : nullptr; };

    // feed-forward
    FfGrads fg;
    if (G) {
      fg.w = &G->ff;
      fg.w1 = in(dec_path(l, "ff.w1"));
      fg.b1 = in(dec_path(l, "ff.b1"));
      fg.w2 = in(dec_path(l, "ff.w2"));
      fg.b2 = in(dec_path(l, "ff.b2"));
    }
    fg.l1 = lora_grad(g, av, dec_path(l, "ff.w1"));
    fg.l2 = lora_grad(g, av, dec_path(l, "ff.w2"));
    Matrix dh3 = ff_bwd(dx, dec_ff_sites(L.ff, av, l), lt.ff, fg);
    add_inplace(dx, ln_bwd(dh3, L.ln3, lt.ln3, G ? grad_ptr("ln3.g", &G->ln3.g) : nullptr,
                           G ? grad_ptr("ln3.b", &G->ln3.b) : nullptr));

    // cross-attention
    AttnGrads cg;
    if (G) {
      cg.w = &G->cross;
      cg.q = in(dec_path(l, "cross.q"));
      cg.k = in(dec_path(l, "cross.k"));
      cg.v = in(dec_path(l, "cross.v"));
      cg.o = in(dec_path(l, "cross.o"));
    }
    cg.lq = lora_grad(g, av, dec_path(l, "cross.q"));
    cg.lk = lora_grad(g, av, dec_path(l, "cross.k"));
    cg.lv = lora_grad(g, av, dec_path(l, "cross.v"));
    cg.lo = lora_grad(g, av, dec_path(l, "cross.o"));
    auto [dh2, de] = attn_bwd(dx, dec_attn_sites(L.cross, av, l, "cross"), lt.cross, false, cfg.n_heads, cg, need_denc);
    if (need_denc) {
      if (denc.empty()) denc = std::move(de);
      else add_inplace(denc, de);
    }
    add_inplace(dx, ln_bwd(dh2, L.ln2, lt.ln2, G ? grad_ptr("ln2.g", &G->ln2.g) : nullptr,
                           G ? grad_ptr("ln2.b", &G->ln2.b) : nullptr));

    // self-attention
    AttnGrads sg;
    if (G) {
      sg.w = &G->self;
      sg.q = in(dec_path(l, "self.q"));
      sg.k = in(dec_path(l, "self.k"));
      sg.v = in(dec_path(l, "self.v"));
      sg.o = in(dec_path(l, "self.o"));
    }
    sg.lq = lora_grad(g, av, dec_path(l, "self.q"));
    sg.lk = lora_grad(g, av, dec_path(l, "self.k"));
    sg.lv = lora_grad(g, av, dec_path(l, "self.v"));
    sg.lo = lora_grad(g, av, dec_path(l, "self.o"));
    auto [dhq, dhkv] = attn_bwd(dx, dec_attn_sites(L.self, av, l, "self"), lt.self, true, cfg.n_heads, sg, true);
    add_inplace(dhq, dhkv);
    add_inplace(dx, ln_bwd(dhq, L.ln1, lt.ln1, G ? grad_ptr("ln1.g", &G->ln1.g) : nullptr,
                           G ? grad_ptr("ln1.b", &G->ln1.b) : nullptr));
  }
  if (in("dec.embed")) {
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      float* row = gb->tgt_embed.row(tokens[t]).data();
      for (std::size_t c = 0; c < dx.cols(); ++c) row[c] += dx(t, c);
    }
  }
  return denc;
}

std::vector<int> teacher_input(std::span<const int> target) {
  std::vector<int> in;
  in.reserve(target.size() + 1);
  in.push_back(kBos);
  in.insert(in.end(), target.begin(), target.end());
  return in;
}

/// Cross-entropy over rows; fills dlogits = (softmax - onehot) * scale when given.
double cross_entropy(const Matrix& logits, std::span<const int> target, Matrix* dlogits, float scale) {
  double loss = 0.0;
  std::vector<float> p(logits.cols());
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    const int y = t < target.size() ? target[t] : kEos;
    std::copy(logits.row(t).begin(), logits.row(t).end(), p.begin());
    const float m = simd::active().max(p.data(), p.size());
    double sum = 0.0;
    for (float v : p) sum += std::exp(static_cast<double>(v - m));
    const double lse = m + std::log(sum);
    loss += lse - logits(t, y);
    if (dlogits) {
      for (std::size_t c = 0; c < p.size(); ++c)
        (*dlogits)(t, c) = static_cast<float>(std::exp(static_cast<double>(logits(t, c)) - lse)) * scale;
      (*dlogits)(t, y) -= scale;
    }
  }
  if (!std::isfinite(loss)) throw NumericError("non-finite cross-entropy loss");
  return loss;
}

void check_target(std::span<const int> target, const ModelConfig& cfg) {
  if (target.size() + 1 > cfg.max_tgt_len)
    throw InputError("target of " + std::to_string(target.size()) + " tokens exceeds max_tgt_len");
  for (int y : target)
    if (y < 0 || static_cast<std::size_t>(y) >= cfg.vocab_size || y == kPad || y == kBos)
      throw InputError("target token " + std::to_string(y) + " invalid");
}

}  // namespace

Matrix encoder_forward(const TransformerWeights& w, std::span<const int> source) {
  return encoder_run(w, source, nullptr);
}

Matrix decoder_forward(const TransformerWeights& w, const AdapterView* adapter, const Matrix& enc,
                       std::span<const int> tokens) {
  return decoder_run(w, adapter, enc, tokens, nullptr);
}

LossStats accumulate_example(const TransformerWeights& w, const AdapterView* adapter, const SeqExample& ex,
                             const TrainableScope& scope, float grad_scale, Gradients& grads) {
  check_target(ex.target, w.config);
  const bool train_encoder = grads.has_base && scope.any_encoder_param();
  EncTape etape;
  Matrix enc_local;
  const Matrix* enc = nullptr;
  if (ex.encoded != nullptr && !train_encoder) {
    enc = &ex.encoded->features;
  } else {
    enc_local = encoder_run(w, ex.source, train_encoder ? &etape : nullptr);
    enc = &enc_local;
  }
  const std::vector<int> in = teacher_input(ex.target);
  DecTape dtape;
  const Matrix logits = decoder_run(w, adapter, *enc, in, &dtape);
  Matrix dlogits(logits.rows(), logits.cols());
  const double loss = cross_entropy(logits, ex.target, &dlogits, grad_scale);
  Matrix denc = decoder_backward(w, adapter, in, dtape, std::move(dlogits), scope, grads, train_encoder);
  if (train_encoder) encoder_backward(w, ex.source, etape, std::move(denc), grads.base);
  return {loss, logits.rows()};
}

LossStats example_loss(const TransformerWeights& w, const AdapterView* adapter, const SeqExample& ex) {
  check_target(ex.target, w.config);
  Matrix enc_local;
  const Matrix* enc = nullptr;
  if (ex.encoded != nullptr) {
    enc = &ex.encoded->features;
  } else {
    enc_local = encoder_run(w, ex.source, nullptr);
    enc = &enc_local;
  }
  const std::vector<int> in = teacher_input(ex.target);
  const Matrix logits = decoder_run(w, adapter, *enc, in, nullptr);
  return {cross_entropy(logits, ex.target, nullptr, 0.0f), logits.rows()};
}

}  // namespace das
