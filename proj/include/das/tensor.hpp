#pragma once
// Dense row-major float matrices and the handful of kernels the adapter math
// is written in.

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <vector>

namespace das {

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f);
  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data);
  Matrix(std::initializer_list<std::initializer_list<float>> rows);

  static Matrix identity(std::size_t n);
  /// Entries uniform in [-scale, scale] from the given generator.
  static Matrix uniform(std::size_t rows, std::size_t cols, float scale, std::mt19937_64& rng);
  static Matrix normal(std::size_t rows, std::size_t cols, float stddev, std::mt19937_64& rng);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<float> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  float* data() noexcept { return data_.data(); }
  const float* data() const noexcept { return data_.data(); }
  std::span<float> flat() noexcept { return data_; }
  std::span<const float> flat() const noexcept { return data_; }

  void fill(float v);
  Matrix transposed() const;
  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

/// a (m x k) * b (k x n)
Matrix matmul(const Matrix& a, const Matrix& b);

/// a (m x k) * b^T for b (n x k). The layout every linear layer uses: activations
/// are rows, weights are stored output-major.
Matrix matmul_nt(const Matrix& a, const Matrix& b);

/// a^T (k x m)^T * b: a is (m x k), b is (m x n); result k x n.
Matrix matmul_tn(const Matrix& a, const Matrix& b);

Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix scaled(const Matrix& a, float s);
void add_inplace(Matrix& dst, const Matrix& src, float s = 1.0f);

/// Numerically stable softmax (max subtraction).
std::vector<float> softmax(std::span<const float> v);
void softmax_inplace(std::span<float> v);

/// Lowest index of the maximum value.
std::size_t argmax(std::span<const float> v);

/// Side-by-side concatenation; all inputs share the row count.
Matrix concat_cols(std::span<const Matrix> mats);
/// Stacked concatenation; all inputs share the column count.
Matrix concat_rows(std::span<const Matrix> mats);
/// Block-diagonal assembly, zeros off the blocks.
Matrix block_diag(std::span<const Matrix> mats);

/// Rows [r0, r0+n) and columns [c0, c0+m) as a new matrix.
Matrix slice(const Matrix& a, std::size_t r0, std::size_t n, std::size_t c0, std::size_t m);

struct TruncatedSvd {
  Matrix u;               // m x r
  std::vector<float> s;   // r, non-increasing, >= 0
  Matrix v;               // n x r
};

/// Top-r singular triplets by one-sided Jacobi in double precision.
TruncatedSvd svd_truncate(const Matrix& w, std::size_t r);

/// u * diag(s) * v^T
Matrix svd_reconstruct(const TruncatedSvd& svd);

double frobenius_norm(const Matrix& a);
float max_abs_diff(const Matrix& a, const Matrix& b);

/// Throws NumericError naming `what` if any entry is NaN or infinite.
void require_finite(const Matrix& a, const char* what);
void require_finite(std::span<const float> v, const char* what);

}  // namespace das
