#pragma once
// Independent reference implementations used only by tests. Everything here
// is written from the textbook definitions in double precision and shares no
// code with the library beyond the Matrix container and weight structs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "das/lora.hpp"
#include "das/model.hpp"
#include "das/tensor.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const das::Matrix& m) {
  Mat out(m.rows(), std::vector<double>(m.cols()));
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) out[r][c] = m(r, c);
  return out;
}

inline Mat zeros(std::size_t r, std::size_t c) { return Mat(r, std::vector<double>(c, 0.0)); }

// Triple loop, i-j-k order.
inline Mat matmul(const Mat& a, const Mat& b) {
  Mat c = zeros(a.size(), b.empty() ? 0 : b[0].size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < c[i].size(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < b.size(); ++k) s += a[i][k] * b[k][j];
      c[i][j] = s;
    }
  return c;
}

inline Mat transpose(const Mat& a) {
  Mat t = zeros(a.empty() ? 0 : a[0].size(), a.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) t[j][i] = a[i][j];
  return t;
}

inline std::vector<double> softmax(const std::vector<double>& v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  std::vector<double> e(v.size());
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) s += e[i] = std::exp(v[i] - m);
  for (double& x : e) x /= s;
  return e;
}

// ---------------------------------------------------------------------------
// Reference encoder-decoder

struct LoraSite {
  Mat a, b;  // effective factors
  double gamma = 0.0;
};

inline Mat linear(const Mat& x, const das::Matrix& w, const LoraSite* lora = nullptr, const das::Matrix* bias = nullptr) {
  Mat y = matmul(x, transpose(to_mat(w)));
  if (lora) {
    const Mat l = matmul(matmul(x, transpose(lora->a)), transpose(lora->b));
    for (std::size_t i = 0; i < y.size(); ++i)
      for (std::size_t j = 0; j < y[i].size(); ++j) y[i][j] += lora->gamma * l[i][j];
  }
  if (bias)
    for (auto& row : y)
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += (*bias)(0, j);
  return y;
}

inline Mat layer_norm(const Mat& x, const das::LayerNormWeights& ln) {
  Mat y = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double n = static_cast<double>(x[i].size());
    double mean = 0.0, var = 0.0;
    for (double v : x[i]) mean += v;
    mean /= n;
    for (double v : x[i]) var += (v - mean) * (v - mean);
    var /= n;
    for (std::size_t j = 0; j < x[i].size(); ++j)
      y[i][j] = ln.g(0, j) * (x[i][j] - mean) / std::sqrt(var + 1e-5) + ln.b(0, j);
  }
  return y;
}

inline double gelu(double u) { return 0.5 * u * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (u + 0.044715 * u * u * u))); }

inline double position_code(std::size_t pos, std::size_t i, std::size_t d) {
  const std::size_t even = i - i % 2;
  const double angle = static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(even) / static_cast<double>(d));
  return i % 2 == 0 ? std::sin(angle) : std::cos(angle);
}

inline Mat attention(const Mat& xq, const Mat& xkv, const das::AttentionWeights& w, std::size_t heads, bool causal,
                     const std::string& prefix, const std::vector<LoraSite>* sites_by_path,
                     const std::vector<std::string>* paths) {
  auto site = [&](const std::string& name) -> const LoraSite* {
    if (!paths) return nullptr;
    for (std::size_t i = 0; i < paths->size(); ++i)
      if ((*paths)[i] == prefix + "." + name) return &(*sites_by_path)[i];
    return nullptr;
  };
  const Mat q = linear(xq, w.q, site("q"));
  const Mat k = linear(xkv, w.k, site("k"));
  const Mat v = linear(xkv, w.v, site("v"));
  const std::size_t d = q[0].size(), hd = d / heads;
  Mat ctx = zeros(q.size(), d);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < q.size(); ++i) {
      const std::size_t len = causal ? i + 1 : k.size();
      std::vector<double> s(len);
      for (std::size_t t = 0; t < len; ++t) {
        double dot = 0.0;
        for (std::size_t c = 0; c < hd; ++c) dot += q[i][h * hd + c] * k[t][h * hd + c];
        s[t] = dot / std::sqrt(static_cast<double>(hd));
      }
      const auto p = softmax(s);
      for (std::size_t t = 0; t < len; ++t)
        for (std::size_t c = 0; c < hd; ++c) ctx[i][h * hd + c] += p[t] * v[t][h * hd + c];
    }
  }
  return linear(ctx, w.o, site("o"));
}

inline Mat feed_forward(const Mat& x, const das::FeedForwardWeights& f, const LoraSite* s1, const LoraSite* s2) {
  Mat u = linear(x, f.w1, s1, &f.b1);
  for (auto& row : u)
    for (double& v : row) v = gelu(v);
  return linear(u, f.w2, s2, &f.b2);
}

inline void add_to(Mat& x, const Mat& y) {
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < x[i].size(); ++j) x[i][j] += y[i][j];
}

struct RefAdapter {
  std::vector<std::string> paths;
  std::vector<LoraSite> sites;

  static RefAdapter from(const das::LoraAdapter* a) {
    RefAdapter r;
    if (!a) return r;
    for (const auto& [path, piece] : a->pieces) {
      r.paths.push_back(path);
      r.sites.push_back({to_mat(piece.effective_a()), to_mat(piece.effective_b()), a->scaling});
    }
    return r;
  }
  const LoraSite* find(const std::string& p) const {
    for (std::size_t i = 0; i < paths.size(); ++i)
      if (paths[i] == p) return &sites[i];
    return nullptr;
  }
};

inline Mat encoder(const das::TransformerWeights& w, const std::vector<int>& src) {
  const std::size_t d = w.config.d_model;
  Mat x = zeros(src.size(), d);
  for (std::size_t i = 0; i < src.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) x[i][j] = w.src_embed(static_cast<std::size_t>(src[i]), j) + position_code(i, j, d);
  for (const auto& L : w.enc) {
    const Mat h = layer_norm(x, L.ln1);
    add_to(x, attention(h, h, L.self, w.config.n_heads, false, "", nullptr, nullptr));
    add_to(x, feed_forward(layer_norm(x, L.ln2), L.ff, nullptr, nullptr));
  }
  return layer_norm(x, w.enc_ln);
}

/// Logits (T x V) for every position of `tokens`.
inline Mat decoder(const das::TransformerWeights& w, const RefAdapter& ad, const Mat& enc, const std::vector<int>& tokens) {
  const std::size_t d = w.config.d_model;
  Mat x = zeros(tokens.size(), d);
  for (std::size_t i = 0; i < tokens.size(); ++i)
    for (std::size_t j = 0; j < d; ++j)
      x[i][j] = w.tgt_embed(static_cast<std::size_t>(tokens[i]), j) + position_code(i, j, d);
  for (std::size_t l = 0; l < w.dec.size(); ++l) {
    const auto& L = w.dec[l];
    const std::string p = "dec." + std::to_string(l);
    const Mat h1 = layer_norm(x, L.ln1);
    add_to(x, attention(h1, h1, L.self, w.config.n_heads, true, p + ".self", &ad.sites, &ad.paths));
    const Mat h2 = layer_norm(x, L.ln2);
    add_to(x, attention(h2, enc, L.cross, w.config.n_heads, false, p + ".cross", &ad.sites, &ad.paths));
    add_to(x, feed_forward(layer_norm(x, L.ln3), L.ff, ad.find(p + ".ff.w1"), ad.find(p + ".ff.w2")));
  }
  return linear(layer_norm(x, w.dec_ln), w.out_w, ad.find("dec.out.w"), &w.out_b);
}

/// Summed teacher-forced cross-entropy: inputs [bos, y...], targets [y..., eos].
inline double sequence_loss(const das::TransformerWeights& w, const das::LoraAdapter* adapter, const std::vector<int>& src,
                            const std::vector<int>& target) {
  std::vector<int> in{das::kBos};
  in.insert(in.end(), target.begin(), target.end());
  std::vector<int> out = target;
  out.push_back(das::kEos);
  const Mat logits = decoder(w, RefAdapter::from(adapter), encoder(w, src), in);
  double loss = 0.0;
  for (std::size_t t = 0; t < out.size(); ++t) {
    const auto p = softmax(logits[t]);
    loss -= std::log(p[static_cast<std::size_t>(out[t])]);
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Word error rate: textbook Levenshtein table, then a backtrace from the
// bottom-right corner taking a diagonal step (match or substitution) when it
// is optimal, else an insertion, else a deletion.

struct WerTriple {
  std::size_t s = 0, d = 0, i = 0;
};

inline WerTriple wer_dp(const std::vector<int>& ref, const std::vector<int>& hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::vector<std::size_t>> t(n + 1, std::vector<std::size_t>(m + 1));
  for (std::size_t i = 0; i <= n; ++i) t[i][0] = i;
  for (std::size_t j = 0; j <= m; ++j) t[0][j] = j;
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      t[i][j] = std::min({t[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0u : 1u), t[i][j - 1] + 1, t[i - 1][j] + 1});
  WerTriple w;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && t[i][j] == t[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0u : 1u)) {
      if (ref[i - 1] != hyp[j - 1]) ++w.s;
      --i, --j;
    } else if (j > 0 && t[i][j] == t[i][j - 1] + 1) {
      ++w.i, --j;
    } else {
      ++w.d, --i;
    }
  }
  return w;
}

/// Minimum edit distance by exhaustive recursion (tiny inputs only).
inline std::size_t edit_distance_brute(const std::vector<int>& a, std::size_t i, const std::vector<int>& b, std::size_t j) {
  if (i == a.size()) return b.size() - j;
  if (j == b.size()) return a.size() - i;
  const std::size_t sub = edit_distance_brute(a, i + 1, b, j + 1) + (a[i] == b[j] ? 0 : 1);
  const std::size_t del = edit_distance_brute(a, i + 1, b, j) + 1;
  const std::size_t ins = edit_distance_brute(a, i, b, j + 1) + 1;
  return std::min({sub, del, ins});
}

// ---------------------------------------------------------------------------
// Selection rule, transcribed directly from the threshold inequality.

struct Pick {
  int token;
  std::size_t branch;
  int condition;  // 0 none, 1 max, 2 min, 3 both
};

inline Pick select_rule(const std::vector<int>& tokens, const std::vector<float>& conf, float tau, bool literal_min) {
  const float c0 = conf[0];
  float cmax = conf[0], cmin = conf[0];
  for (float c : conf) {
    cmax = std::max(cmax, c);
    cmin = std::min(cmin, c);
  }
  const bool M = cmax - c0 >= tau;
  const bool m = cmin - c0 <= -tau;
  std::size_t argmax_branch = 0, argmin_branch = 0;
  for (std::size_t i = 0; i < conf.size(); ++i) {
    if (conf[i] == cmax) {
      argmax_branch = i;
      break;
    }
  }
  for (std::size_t i = 0; i < conf.size(); ++i) {
    if (conf[i] == cmin) {
      argmin_branch = i;
      break;
    }
  }
  if (M) return {tokens[argmax_branch], argmax_branch, m ? 3 : 1};
  if (m) {
    const std::size_t b = literal_min ? argmin_branch : 0;
    return {tokens[b], b, 2};
  }
  return {tokens[0], 0, 0};
}

// ---------------------------------------------------------------------------
// AdamW written out per scalar from the update equations.

struct RefAdamW {
  double lr, b1, b2, eps, wd;
  std::vector<double> m, v;
  std::size_t t = 0;

  void step(std::vector<double>& x, const std::vector<double>& g, double lr_t) {
    if (m.empty()) {
      m.assign(x.size(), 0.0);
      v.assign(x.size(), 0.0);
    }
    ++t;
    for (std::size_t i = 0; i < x.size(); ++i) {
      m[i] = b1 * m[i] + (1 - b1) * g[i];
      v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(b1, static_cast<double>(t)));
      const double vh = v[i] / (1 - std::pow(b2, static_cast<double>(t)));
      x[i] -= lr_t * (mh / (std::sqrt(vh) + eps) + wd * x[i]);
    }
  }
};

// ---------------------------------------------------------------------------
// Singular values, descending, by one-sided Jacobi rotations on the columns.

inline std::vector<double> singular_values(const das::Matrix& w) {
  Mat a = to_mat(w);
  if (a.size() < a[0].size()) a = transpose(a);
  const std::size_t m = a.size(), n = a[0].size();
  for (int sweep = 0; sweep < 60; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        double app = 0.0, aqq = 0.0, apq = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          app += a[i][p] * a[i][p];
          aqq += a[i][q] * a[i][q];
          apq += a[i][p] * a[i][q];
        }
        if (apq == 0.0) continue;
        off = std::max(off, std::fabs(apq) / std::sqrt(app * aqq));
        const double zeta = (aqq - app) / (2.0 * apq);
        const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t), s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double x = a[i][p], y = a[i][q];
          a[i][p] = c * x - s * y;
          a[i][q] = s * x + c * y;
        }
      }
    if (off < 1e-15) break;
  }
  std::vector<double> sv(n);
  for (std::size_t j = 0; j < n; ++j) {
    double e = 0.0;
    for (std::size_t i = 0; i < m; ++i) e += a[i][j] * a[i][j];
    sv[j] = std::sqrt(e);
  }
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

inline double truncation_error(const das::Matrix& w, std::size_t r) {
  const auto sv = singular_values(w);
  double e = 0.0;
  for (std::size_t i = r; i < sv.size(); ++i) e += sv[i] * sv[i];
  return std::sqrt(e);
}

// ---------------------------------------------------------------------------
// Best rank-r approximation error by deflated power iteration on W^T W.

inline double rank_r_error(const das::Matrix& w, std::size_t r, int iters = 500) {
  Mat a = to_mat(w);
  const std::size_t m = a.size(), n = a[0].size();
  std::mt19937_64 rng(12345);
  std::normal_distribution<double> nd(0.0, 1.0);
  Mat approx = zeros(m, n);
  Mat resid = a;
  for (std::size_t k = 0; k < r; ++k) {
    std::vector<double> v(n);
    for (double& x : v) x = nd(rng);
    double sigma = 0.0;
    std::vector<double> u(m);
    for (int it = 0; it < iters; ++it) {
      for (std::size_t i = 0; i < m; ++i) {
        u[i] = 0.0;
        for (std::size_t j = 0; j < n; ++j) u[i] += resid[i][j] * v[j];
      }
      double nu = 0.0;
      for (double x : u) nu += x * x;
      nu = std::sqrt(nu);
      if (nu == 0.0) break;
      for (double& x : u) x /= nu;
      for (std::size_t j = 0; j < n; ++j) {
        v[j] = 0.0;
        for (std::size_t i = 0; i < m; ++i) v[j] += resid[i][j] * u[i];
      }
      sigma = 0.0;
      for (double x : v) sigma += x * x;
      sigma = std::sqrt(sigma);
      if (sigma == 0.0) break;
      for (double& x : v) x /= sigma;
    }
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) resid[i][j] -= sigma * u[i] * v[j];
  }
  double e = 0.0;
  for (const auto& row : resid)
    for (double x : row) e += x * x;
  return std::sqrt(e);
}

}  // namespace oracle
