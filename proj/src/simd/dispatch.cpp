#include <atomic>
#include <cstdlib>
#include <string>

#include "das/error.hpp"
#include "das/simd.hpp"

namespace das::simd {

#if DAS_BUILD_AVX2
const KernelTable* avx2_kernels();
#endif

namespace {

[[maybe_unused]] bool cpu_has_avx2() {
#if DAS_BUILD_AVX2 && (defined(__GNUC__) || defined(__clang__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const KernelTable* pick_default() {
  const char* env = std::getenv("DAS_SIMD");
  if (env != nullptr && std::string(env) == "scalar") return &scalar_kernels();
  if (const KernelTable* t = kernels_for(Isa::avx2)) return t;
  return &scalar_kernels();
}

std::atomic<const KernelTable*>& slot() {
  static std::atomic<const KernelTable*> table{pick_default()};
  return table;
}

}  // namespace

const KernelTable* kernels_for(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return &scalar_kernels();
    case Isa::avx2:
#if DAS_BUILD_AVX2
      if (cpu_has_avx2()) return avx2_kernels();
#endif
      return nullptr;
  }
  return nullptr;
}

bool isa_supported(Isa isa) { return kernels_for(isa) != nullptr; }

const KernelTable& active() { return *slot().load(std::memory_order_relaxed); }

void set_active(Isa isa) {
  const KernelTable* t = kernels_for(isa);
  if (t == nullptr) throw ParameterError("instruction set not available: " + std::string(isa_name(isa)));
  slot().store(t, std::memory_order_relaxed);
}

std::string_view isa_name(Isa isa) { return isa == Isa::avx2 ? "avx2" : "scalar"; }

}  // namespace das::simd
