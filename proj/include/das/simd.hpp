#pragma once
// Inner-loop float kernels. Every kernel has a portable scalar reference and,
// on x86-64 builds, an AVX2+FMA variant. The active table is chosen once at
// startup from CPUID; DAS_SIMD=scalar|avx2 overrides the choice.

#include <cstddef>
#include <string_view>

namespace das::simd {

enum class Isa { scalar, avx2 };

struct KernelTable {
  Isa isa;
  const char* name;

  /// sum_i a[i] * b[i]
  float (*dot)(const float* a, const float* b, std::size_t n);

  /// y[i] += alpha * x[i]
  void (*axpy)(float alpha, const float* x, float* y, std::size_t n);

  /// C[i][j] = dot(A row i, B row j) for an m x k A and an n x k B.
  /// Each C element is bit-identical to `dot` on the same two rows, so the
  /// result for a row never depends on how many other rows share the call.
  void (*gemm_nt)(const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c,
                  std::size_t ldc, std::size_t m, std::size_t n, std::size_t k);

  /// x[i] *= alpha
  void (*scale)(float alpha, float* x, std::size_t n);

  /// max_i x[i]; n >= 1
  float (*max)(const float* x, std::size_t n);
};

const KernelTable& scalar_kernels();

/// nullptr when the build or the CPU lacks the instruction set.
const KernelTable* kernels_for(Isa isa);

bool isa_supported(Isa isa);

/// The table every module calls through.
const KernelTable& active();

/// Test hook: switch the active table. Throws ParameterError if unsupported.
void set_active(Isa isa);

std::string_view isa_name(Isa isa);

}  // namespace das::simd
