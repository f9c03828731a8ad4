#include <atomic>
#include <cstdlib>
#include <cstring>

#include "rlm/simd/kernels.hpp"

namespace rlm::simd {
namespace {

std::atomic<int>& active_slot() {
  static std::atomic<int> slot{static_cast<int>(detected_isa())};
  return slot;
}

}  // namespace

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return "scalar";
    case Isa::avx2:
      return "avx2";
  }
  return "unknown";
}

bool isa_supported(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return true;
    case Isa::avx2:
#if RLM_HAVE_AVX2 && (defined(__GNUC__) || defined(__clang__))
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
  }
  return false;
}

Isa detected_isa() {
  if (const char* env = std::getenv("RLM_ISA"); env != nullptr && std::strcmp(env, "scalar") == 0)
    return Isa::scalar;
  return isa_supported(Isa::avx2) ? Isa::avx2 : Isa::scalar;
}

Isa active_isa() { return static_cast<Isa>(active_slot().load(std::memory_order_relaxed)); }

void set_active_isa(Isa isa) {
  if (!isa_supported(isa)) isa = Isa::scalar;
  active_slot().store(static_cast<int>(isa), std::memory_order_relaxed);
}

template <class T>
const KernelTable<T>& kernels_for(Isa isa) {
#if RLM_HAVE_AVX2
  if (isa == Isa::avx2 && isa_supported(Isa::avx2)) return detail::avx2_table<T>();
#endif
  (void)isa;
  return detail::scalar_table<T>();
}

template const KernelTable<float>& kernels_for<float>(Isa);
template const KernelTable<double>& kernels_for<double>(Isa);

}  // namespace rlm::simd
