// Compiled with -mavx2 -mfma. Only reached after a CPUID check.
#include <immintrin.h>

#include "das/simd.hpp"

namespace das::simd {
namespace {

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 shuf = _mm_movehdup_ps(lo);
  __m128 sums = _mm_add_ps(lo, shuf);
  shuf = _mm_movehl_ps(shuf, sums);
  sums = _mm_add_ss(sums, shuf);
  return _mm_cvtss_f32(sums);
}

// One 8-lane accumulator over full blocks in order, a fixed horizontal
// reduction, then a scalar tail. gemm_nt replays exactly this sequence per
// output element.
float dot(const float* a, const float* b, std::size_t n) {
  __m256 acc = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) acc = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc);
  float r = hsum(acc);
  for (; i < n; ++i) r += a[i] * b[i];
  return r;
}

void axpy(float alpha, const float* x, float* y, std::size_t n) {
  const __m256 va = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(y + i), _mm256_mul_ps(va, _mm256_loadu_ps(x + i))));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

// MR rows of A against NR rows of B: every loaded vector feeds several
// independent accumulators, one per output element.
template <int MR, int NR>
inline void tile(const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c, std::size_t ldc,
                 std::size_t k) {
  __m256 acc[MR][NR];
  for (int r = 0; r < MR; ++r)
    for (int s = 0; s < NR; ++s) acc[r][s] = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= k; i += 8) {
    __m256 bv[NR];
    for (int s = 0; s < NR; ++s) bv[s] = _mm256_loadu_ps(b + s * ldb + i);
    for (int r = 0; r < MR; ++r) {
      const __m256 av = _mm256_loadu_ps(a + r * lda + i);
      for (int s = 0; s < NR; ++s) acc[r][s] = _mm256_fmadd_ps(av, bv[s], acc[r][s]);
    }
  }
  for (int r = 0; r < MR; ++r) {
    for (int s = 0; s < NR; ++s) {
      float v = hsum(acc[r][s]);
      const float* ar = a + r * lda;
      const float* bs = b + s * ldb;
      for (std::size_t t = i; t < k; ++t) v += ar[t] * bs[t];
      c[r * ldc + s] = v;
    }
  }
}

template <int MR>
inline void row_block(const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c, std::size_t ldc,
                      std::size_t n, std::size_t k) {
  constexpr int NR = MR >= 4 ? 3 : 4;
  std::size_t j = 0;
  for (; j + NR <= n; j += NR) tile<MR, NR>(a, lda, b + j * ldb, ldb, c + j, ldc, k);
  for (; j < n; ++j) tile<MR, 1>(a, lda, b + j * ldb, ldb, c + j, ldc, k);
}

void gemm_nt(const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c,
             std::size_t ldc, std::size_t m, std::size_t n, std::size_t k) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) row_block<4>(a + i * lda, lda, b, ldb, c + i * ldc, ldc, n, k);
  if (m - i >= 2) {
    row_block<2>(a + i * lda, lda, b, ldb, c + i * ldc, ldc, n, k);
    i += 2;
  }
  if (i < m) row_block<1>(a + i * lda, lda, b, ldb, c + i * ldc, ldc, n, k);
}

void scale(float alpha, float* x, std::size_t n) {
  const __m256 va = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) _mm256_storeu_ps(x + i, _mm256_mul_ps(va, _mm256_loadu_ps(x + i)));
  for (; i < n; ++i) x[i] *= alpha;
}

float max(const float* x, std::size_t n) {
  std::size_t i = 0;
  float m = x[0];
  if (n >= 8) {
    __m256 vm = _mm256_loadu_ps(x);
    for (i = 8; i + 8 <= n; i += 8) vm = _mm256_max_ps(vm, _mm256_loadu_ps(x + i));
    alignas(32) float lanes[8];
    _mm256_store_ps(lanes, vm);
    m = lanes[0];
    for (float v : lanes) m = v > m ? v : m;
  }
  for (; i < n; ++i) m = x[i] > m ? x[i] : m;
  return m;
}

constexpr KernelTable kTable{Isa::avx2, "avx2", dot, axpy, gemm_nt, scale, max};

}  // namespace

const KernelTable* avx2_kernels() { return &kTable; }

}  // namespace das::simd
