#pragma once
// Row-level building blocks shared by the full forward/backward pass and the
// incremental decoder.

#include <cmath>
#include <cstddef>
#include <span>

#include "das/simd.hpp"
#include "das/tensor.hpp"

namespace das::layers {

inline constexpr float kLayerNormEps = 1e-5f;

/// y = g * (x - mean) * rstd + b; returns rstd, writes mean.
inline float layer_norm_row(std::span<const float> x, const Matrix& g, const Matrix& b, std::span<float> y,
                            float* mean_out = nullptr) {
  const std::size_t n = x.size();
  float mean = 0.0f;
  for (float v : x) mean += v;
  mean /= static_cast<float>(n);
  float var = 0.0f;
  for (float v : x) var += (v - mean) * (v - mean);
  var /= static_cast<float>(n);
  const float rstd = 1.0f / std::sqrt(var + kLayerNormEps);
  const float* gp = g.data();
  const float* bp = b.data();
  for (std::size_t i = 0; i < n; ++i) y[i] = gp[i] * ((x[i] - mean) * rstd) + bp[i];
  if (mean_out) *mean_out = mean;
  return rstd;
}

inline Matrix layer_norm(const Matrix& x, const Matrix& g, const Matrix& b) {
  Matrix y(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) layer_norm_row(x.row(r), g, b, y.row(r));
  return y;
}

inline constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)

inline float gelu(float u) {
  const float t = std::tanh(kGeluC * (u + 0.044715f * u * u * u));
  return 0.5f * u * (1.0f + t);
}

inline float gelu_grad(float u) {
  const float t = std::tanh(kGeluC * (u + 0.044715f * u * u * u));
  return 0.5f * (1.0f + t) + 0.5f * u * (1.0f - t * t) * kGeluC * (1.0f + 3.0f * 0.044715f * u * u);
}

/// y (1 x n) += bias row
inline void add_bias(Matrix& y, const Matrix& bias) {
  for (std::size_t r = 0; r < y.rows(); ++r) {
    float* row = y.row(r).data();
    const float* bp = bias.data();
    for (std::size_t c = 0; c < y.cols(); ++c) row[c] += bp[c];
  }
}

/// Single-query multi-head attention over `len` cached rows of keys/values
/// (row stride d). Writes the concatenated head outputs to `out`; `scores`
/// needs room for `len` floats.
inline void attend_row(const float* q, const float* keys, const float* values, std::size_t len, std::size_t d,
                       std::size_t n_heads, float* out, float* scores) {
  const auto& k = simd::active();
  const std::size_t hd = d / n_heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * hd;
    for (std::size_t t = 0; t < len; ++t) scores[t] = k.dot(q + off, keys + t * d + off, hd) * scale;
    softmax_inplace(std::span<float>(scores, len));
    float* o = out + off;
    for (std::size_t i = 0; i < hd; ++i) o[i] = 0.0f;
    for (std::size_t t = 0; t < len; ++t) k.axpy(scores[t], values + t * d + off, o, hd);
  }
}

}  // namespace das::layers
