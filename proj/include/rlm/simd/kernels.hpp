#pragma once

#include <cstddef>
#include <string_view>

// Dense inner-loop kernels. Every kernel has a portable scalar reference and,
// where the host supports it, a vectorized variant picked once at startup.
// Results of the variants agree with the reference up to summation order.

namespace rlm::simd {

enum class Isa { scalar, avx2 };

std::string_view isa_name(Isa isa);
bool isa_supported(Isa isa);

/// Best ISA for this host, unless RLM_ISA=scalar is set in the environment.
Isa detected_isa();
Isa active_isa();
/// Forces a kernel family for the whole process (tests, benchmarking).
void set_active_isa(Isa isa);

template <class T>
struct KernelTable {
  /// C(MxN) += op(A)(MxK) * op(B)(KxN); row-major, leading dimensions in elements.
  void (*gemm)(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
               const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c,
               std::size_t ldc);
  T (*dot)(const T* x, const T* y, std::size_t n);
  /// y += alpha * x
  void (*axpy)(std::size_t n, T alpha, const T* x, T* y);
  T (*sum_sq)(const T* x, std::size_t n);
  void (*scale)(std::size_t n, T alpha, T* x);
};

template <class T>
const KernelTable<T>& kernels_for(Isa isa);

template <class T>
const KernelTable<T>& kernels() {
  return kernels_for<T>(active_isa());
}

namespace detail {
template <class T>
const KernelTable<T>& scalar_table();
#if RLM_HAVE_AVX2
template <class T>
const KernelTable<T>& avx2_table();
#endif
}  // namespace detail

}  // namespace rlm::simd
