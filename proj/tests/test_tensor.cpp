#include <cmath>
#include <random>

#include "das/error.hpp"
#include "das/tensor.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace das;

namespace {

double max_diff(const Matrix& a, const oracle::Mat& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) m = std::max(m, std::fabs(a(i, j) - b[i][j]));
  return m;
}

}  // namespace

TEST_CASE("matmul variants match the triple-loop oracle") {
  std::mt19937_64 rng(5);
  const Matrix a = Matrix::normal(7, 13, 1.0f, rng);
  const Matrix b = Matrix::normal(13, 5, 1.0f, rng);
  const Matrix bt = b.transposed();
  const auto ref = oracle::matmul(oracle::to_mat(a), oracle::to_mat(b));
  CHECK(max_diff(matmul(a, b), ref) < 1e-5);
  CHECK(max_diff(matmul_nt(a, bt), ref) < 1e-5);
  const Matrix at = a.transposed();
  CHECK(max_diff(matmul_tn(at, b), ref) < 1e-5);
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
}

TEST_CASE("softmax sums to one and survives large logits") {
  const std::vector<float> v{1000.0f, 999.0f, -1000.0f, 0.0f};
  const auto p = softmax(v);
  const auto q = oracle::softmax({1000.0, 999.0, -1000.0, 0.0});
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    CHECK(std::fabs(p[i] - q[i]) < 1e-6);
    s += p[i];
  }
  CHECK(std::fabs(s - 1.0) < 1e-6);
  CHECK(argmax(std::vector<float>{1.0f, 3.0f, 3.0f}) == 1);
}

TEST_CASE("concat and block_diag place blocks as documented") {
  const Matrix a{{1, 2}, {3, 4}};
  const Matrix b{{5}, {6}};
  const Matrix ab[] = {a, b};
  const Matrix cc = concat_cols(ab);
  CHECK(cc == Matrix{{1, 2, 5}, {3, 4, 6}});
  const Matrix bd = block_diag(ab);
  CHECK(bd == Matrix{{1, 2, 0}, {3, 4, 0}, {0, 0, 5}, {0, 0, 6}});
  const Matrix rr[] = {a, Matrix{{7, 8}}};
  CHECK(concat_rows(rr) == Matrix{{1, 2}, {3, 4}, {7, 8}});
  CHECK(slice(bd, 2, 2, 2, 1) == b);
}

TEST_CASE("truncated SVD attains the optimal rank-r error") {
  std::mt19937_64 rng(6);
  const Matrix w = Matrix::normal(12, 9, 1.0f, rng);
  for (std::size_t r : {1u, 3u, 5u}) {
    const auto svd = svd_truncate(w, r);
    REQUIRE(svd.s.size() == r);
    for (std::size_t i = 1; i < r; ++i) CHECK(svd.s[i] <= svd.s[i - 1]);
    const double err = frobenius_norm(sub(w, svd_reconstruct(svd)));
    CHECK(err == doctest::Approx(oracle::rank_r_error(w, r)).epsilon(1e-4));
  }
  const auto full = svd_truncate(w, 9);
  CHECK(max_abs_diff(svd_reconstruct(full), w) < 1e-4f);
}

TEST_CASE("require_finite names the offending buffer") {
  Matrix m(2, 2);
  m(1, 1) = std::nanf("");
  CHECK_THROWS_WITH_AS(require_finite(m, "probe"), doctest::Contains("probe"), NumericError);
}

TEST_CASE("the two singular-value oracles agree") {
  std::mt19937_64 rng(7);
  for (auto [m, n] : {std::pair<std::size_t, std::size_t>{12, 9}, {7, 15}, {16, 16}}) {
    const Matrix w = Matrix::normal(m, n, 1.0f, rng);
    for (std::size_t r : {1u, 2u, 4u}) CHECK(oracle::truncation_error(w, r) == doctest::Approx(oracle::rank_r_error(w, r)).epsilon(1e-6));
  }
}
