#include "das/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "das/error.hpp"
#include "das/simd.hpp"

namespace das {
namespace {

std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, float fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("matrix data length " + std::to_string(data_.size()) + " != " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<float>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw ShapeError("ragged matrix literal");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0f;
  return m;
}

Matrix Matrix::uniform(std::size_t rows, std::size_t cols, float scale, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> dist(-scale, scale);
  Matrix m(rows, cols);
  for (float& v : m.data_) v = dist(rng);
  return m;
}

Matrix Matrix::normal(std::size_t rows, std::size_t cols, float stddev, std::mt19937_64& rng) {
  std::normal_distribution<float> dist(0.0f, stddev);
  Matrix m(rows, cols);
  for (float& v : m.data_) v = dist(rng);
  return m;
}

void Matrix::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: " + shape_str(a) + " * " + shape_str(b));
  const auto& k = simd::active();
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    float* ci = c.row(i).data();
    for (std::size_t p = 0; p < a.cols(); ++p) {
      const float av = a(i, p);
      if (av != 0.0f) k.axpy(av, b.row(p).data(), ci, b.cols());
    }
  }
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: " + shape_str(a) + " * (" + shape_str(b) + ")^T");
  Matrix c(a.rows(), b.rows());
  if (c.empty()) return c;
  simd::active().gemm_nt(a.data(), a.cols(), b.data(), b.cols(), c.data(), c.cols(), a.rows(), b.rows(),
                         a.cols());
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw ShapeError("matmul_tn: (" + shape_str(a) + ")^T * " + shape_str(b));
  const auto& k = simd::active();
  Matrix c(a.cols(), b.cols());
  for (std::size_t t = 0; t < a.rows(); ++t) {
    const float* bt = b.row(t).data();
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const float av = a(t, i);
      if (av != 0.0f) k.axpy(av, bt, c.row(i).data(), b.cols());
    }
  }
  return c;
}

Matrix add(const Matrix& a, const Matrix& b) {
  Matrix c = a;
  add_inplace(c, b);
  return c;
}

Matrix sub(const Matrix& a, const Matrix& b) {
  Matrix c = a;
  add_inplace(c, b, -1.0f);
  return c;
}

Matrix scaled(const Matrix& a, float s) {
  Matrix c = a;
  for (float& v : c.flat()) v *= s;
  return c;
}

void add_inplace(Matrix& dst, const Matrix& src, float s) {
  if (!dst.same_shape(src)) throw ShapeError("add: " + shape_str(dst) + " vs " + shape_str(src));
  float* d = dst.data();
  const float* x = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s * x[i];
}

void softmax_inplace(std::span<float> v) {
  if (v.empty()) throw ShapeError("softmax of empty vector");
  const float m = simd::active().max(v.data(), v.size());
  float sum = 0.0f;
  for (float& x : v) {
    x = std::exp(x - m);
    sum += x;
  }
  const float inv = 1.0f / sum;
  for (float& x : v) x *= inv;
}

std::vector<float> softmax(std::span<const float> v) {
  std::vector<float> out(v.begin(), v.end());
  softmax_inplace(out);
  return out;
}

std::size_t argmax(std::span<const float> v) {
  if (v.empty()) throw ShapeError("argmax of empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

Matrix concat_cols(std::span<const Matrix> mats) {
  if (mats.empty()) throw ShapeError("concat_cols of empty list");
  const std::size_t rows = mats.front().rows();
  std::size_t cols = 0;
  for (const auto& m : mats) {
    if (m.rows() != rows) throw ShapeError("concat_cols: row count " + std::to_string(m.rows()) + " != " + std::to_string(rows));
    cols += m.cols();
  }
  Matrix out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    float* dst = out.row(r).data();
    for (const auto& m : mats) {
      std::copy(m.row(r).begin(), m.row(r).end(), dst);
      dst += m.cols();
    }
  }
  return out;
}

Matrix concat_rows(std::span<const Matrix> mats) {
  if (mats.empty()) throw ShapeError("concat_rows of empty list");
  const std::size_t cols = mats.front().cols();
  std::size_t rows = 0;
  for (const auto& m : mats) {
    if (m.cols() != cols) throw ShapeError("concat_rows: column count " + std::to_string(m.cols()) + " != " + std::to_string(cols));
    rows += m.rows();
  }
  std::vector<float> data;
  data.reserve(rows * cols);
  for (const auto& m : mats) data.insert(data.end(), m.flat().begin(), m.flat().end());
  return Matrix(rows, cols, std::move(data));
}

Matrix block_diag(std::span<const Matrix> mats) {
  if (mats.empty()) throw ShapeError("block_diag of empty list");
  std::size_t rows = 0, cols = 0;
  for (const auto& m : mats) {
    rows += m.rows();
    cols += m.cols();
  }
  Matrix out(rows, cols);
  std::size_t r0 = 0, c0 = 0;
  for (const auto& m : mats) {
    for (std::size_t r = 0; r < m.rows(); ++r)
      std::copy(m.row(r).begin(), m.row(r).end(), out.row(r0 + r).data() + c0);
    r0 += m.rows();
    c0 += m.cols();
  }
  return out;
}

Matrix slice(const Matrix& a, std::size_t r0, std::size_t n, std::size_t c0, std::size_t m) {
  if (r0 + n > a.rows() || c0 + m > a.cols()) throw ShapeError("slice out of range of " + shape_str(a));
  Matrix out(n, m);
  for (std::size_t r = 0; r < n; ++r)
    std::copy_n(a.row(r0 + r).data() + c0, m, out.row(r).data());
  return out;
}

TruncatedSvd svd_truncate(const Matrix& w, std::size_t r) {
  const std::size_t m = w.rows(), n = w.cols();
  if (r < 1 || r > std::min(m, n)) {
    throw ParameterError("svd rank " + std::to_string(r) + " outside [1, " + std::to_string(std::min(m, n)) + "]");
  }
  require_finite(w, "svd input");

  // One-sided Jacobi orthogonalises the columns of a tall work matrix G = W
  // (or W^T when W is wide) while accumulating the rotations in V.
  const bool wide = n > m;
  const std::size_t rows = wide ? n : m;
  const std::size_t cols = wide ? m : n;
  std::vector<double> g(rows * cols), v(cols * cols, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (wide) g[j * cols + i] = w(i, j);
      else g[i * cols + j] = w(i, j);
    }
  for (std::size_t i = 0; i < cols; ++i) v[i * cols + i] = 1.0;

  constexpr int kMaxSweeps = 80;
  constexpr double kTol = 1e-13;
  bool converged = false;
  for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
    converged = true;
    for (std::size_t p = 0; p + 1 < cols; ++p) {
      for (std::size_t q = p + 1; q < cols; ++q) {
        double alpha = 0, beta = 0, gamma = 0;
        for (std::size_t i = 0; i < rows; ++i) {
          const double gp = g[i * cols + p], gq = g[i * cols + q];
          alpha += gp * gp;
          beta += gq * gq;
          gamma += gp * gq;
        }
        if (std::abs(gamma) <= kTol * std::sqrt(alpha * beta) || gamma == 0.0) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < rows; ++i) {
          const double gp = g[i * cols + p], gq = g[i * cols + q];
          g[i * cols + p] = c * gp - s * gq;
          g[i * cols + q] = s * gp + c * gq;
        }
        for (std::size_t i = 0; i < cols; ++i) {
          const double vp = v[i * cols + p], vq = v[i * cols + q];
          v[i * cols + p] = c * vp - s * vq;
          v[i * cols + q] = s * vp + c * vq;
        }
      }
    }
  }
  if (!converged) throw NumericError("svd: Jacobi sweeps did not converge");

  std::vector<double> sigma(cols);
  for (std::size_t j = 0; j < cols; ++j) {
    double s = 0;
    for (std::size_t i = 0; i < rows; ++i) s += g[i * cols + j] * g[i * cols + j];
    sigma[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(cols);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sigma[a] > sigma[b]; });

  // Left vectors are the normalised columns of G; right vectors live in V.
  // For a wide input the roles swap.
  TruncatedSvd out{Matrix(m, r), std::vector<float>(r), Matrix(n, r)};
  for (std::size_t k = 0; k < r; ++k) {
    const std::size_t j = order[k];
    out.s[k] = static_cast<float>(sigma[j]);
    const double inv = sigma[j] > 0 ? 1.0 / sigma[j] : 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
      const float left = static_cast<float>(g[i * cols + j] * inv);
      if (wide) out.v(i, k) = left;
      else out.u(i, k) = left;
    }
    for (std::size_t i = 0; i < cols; ++i) {
      const float right = static_cast<float>(v[i * cols + j]);
      if (wide) out.u(i, k) = right;
      else out.v(i, k) = right;
    }
    if (sigma[j] == 0.0) {
      // Null direction: any unit vector orthogonal to the previous ones works;
      // fall back to Gram-Schmidt on the canonical basis.
      Matrix& left = wide ? out.v : out.u;
      for (std::size_t e = 0; e < rows; ++e) {
        std::vector<double> cand(rows, 0.0);
        cand[e] = 1.0;
        for (std::size_t prev = 0; prev < k; ++prev) {
          double d = 0;
          for (std::size_t i = 0; i < rows; ++i) d += cand[i] * left(i, prev);
          for (std::size_t i = 0; i < rows; ++i) cand[i] -= d * left(i, prev);
        }
        double nrm = 0;
        for (double x : cand) nrm += x * x;
        nrm = std::sqrt(nrm);
        if (nrm > 1e-6) {
          for (std::size_t i = 0; i < rows; ++i) left(i, k) = static_cast<float>(cand[i] / nrm);
          break;
        }
      }
    }
  }
  return out;
}

Matrix svd_reconstruct(const TruncatedSvd& svd) {
  Matrix us = svd.u;
  for (std::size_t i = 0; i < us.rows(); ++i)
    for (std::size_t k = 0; k < us.cols(); ++k) us(i, k) *= svd.s[k];
  return matmul_nt(us, svd.v);
}

double frobenius_norm(const Matrix& a) {
  double s = 0;
  for (float v : a.flat()) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

float max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ShapeError("max_abs_diff: " + shape_str(a) + " vs " + shape_str(b));
  float d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a.data()[i] - b.data()[i]));
  return d;
}

void require_finite(std::span<const float> v, const char* what) {
  for (float x : v)
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value in ") + what);
}

void require_finite(const Matrix& a, const char* what) { require_finite(a.flat(), what); }

}  // namespace das
