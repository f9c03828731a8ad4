// Compiled with -mavx2 -mfma; only reached after a runtime CPU check.
#include <immintrin.h>

#include <vector>

#include "rlm/simd/kernels.hpp"

namespace rlm::simd::detail {
namespace {

struct F32 {
  using T = float;
  using V = __m256;
  static constexpr std::size_t W = 8;
  static V zero() { return _mm256_setzero_ps(); }
  static V load(const T* p) { return _mm256_loadu_ps(p); }
  static void store(T* p, V v) { _mm256_storeu_ps(p, v); }
  static V set1(T x) { return _mm256_set1_ps(x); }
  static V fmadd(V a, V b, V c) { return _mm256_fmadd_ps(a, b, c); }
  static V mul(V a, V b) { return _mm256_mul_ps(a, b); }
  static T hsum(V v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    __m128 sh = _mm_movehdup_ps(lo);
    __m128 s = _mm_add_ps(lo, sh);
    sh = _mm_movehl_ps(sh, s);
    s = _mm_add_ss(s, sh);
    return _mm_cvtss_f32(s);
  }
};

struct F64 {
  using T = double;
  using V = __m256d;
  static constexpr std::size_t W = 4;
  static V zero() { return _mm256_setzero_pd(); }
  static V load(const T* p) { return _mm256_loadu_pd(p); }
  static void store(T* p, V v) { _mm256_storeu_pd(p, v); }
  static V set1(T x) { return _mm256_set1_pd(x); }
  static V fmadd(V a, V b, V c) { return _mm256_fmadd_pd(a, b, c); }
  static V mul(V a, V b) { return _mm256_mul_pd(a, b); }
  static T hsum(V v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    return _mm_cvtsd_f64(_mm_add_sd(lo, _mm_unpackhi_pd(lo, lo)));
  }
};

// R rows of C by CV vectors of columns, accumulated in registers over k.
template <class S, int R, int CV>
inline void micro(std::size_t k, const typename S::T* a, std::size_t lda,
                  const typename S::T* b, std::size_t ldb, typename S::T* c,
                  std::size_t ldc) {
  typename S::V acc[R][CV];
  for (int r = 0; r < R; ++r)
    for (int v = 0; v < CV; ++v) acc[r][v] = S::load(c + r * ldc + v * S::W);
  for (std::size_t p = 0; p < k; ++p) {
    typename S::V bv[CV];
    for (int v = 0; v < CV; ++v) bv[v] = S::load(b + p * ldb + v * S::W);
    for (int r = 0; r < R; ++r) {
      const typename S::V av = S::set1(a[r * lda + p]);
      for (int v = 0; v < CV; ++v) acc[r][v] = S::fmadd(av, bv[v], acc[r][v]);
    }
  }
  for (int r = 0; r < R; ++r)
    for (int v = 0; v < CV; ++v) S::store(c + r * ldc + v * S::W, acc[r][v]);
}

template <class S, int R>
inline void row_block(std::size_t n, std::size_t k, const typename S::T* a, std::size_t lda,
                      const typename S::T* b, std::size_t ldb, typename S::T* c,
                      std::size_t ldc) {
  constexpr std::size_t W = S::W;
  std::size_t j = 0;
  for (; j + 2 * W <= n; j += 2 * W) micro<S, R, 2>(k, a, lda, b + j, ldb, c + j, ldc);
  for (; j + W <= n; j += W) micro<S, R, 1>(k, a, lda, b + j, ldb, c + j, ldc);
  if (j < n) {
    for (int r = 0; r < R; ++r) {
      typename S::T* crow = c + r * ldc;
      for (std::size_t p = 0; p < k; ++p) {
        const typename S::T arp = a[r * lda + p];
        const typename S::T* brow = b + p * ldb;
        for (std::size_t jj = j; jj < n; ++jj) crow[jj] += arp * brow[jj];
      }
    }
  }
}

template <class S>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const typename S::T* a,
             std::size_t lda, const typename S::T* b, std::size_t ldb, typename S::T* c,
             std::size_t ldc) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) row_block<S, 4>(n, k, a + i * lda, lda, b, ldb, c + i * ldc, ldc);
  for (; i < m; ++i) row_block<S, 1>(n, k, a + i * lda, lda, b, ldb, c + i * ldc, ldc);
}

template <class T>
void transpose_into(std::vector<T>& out, const T* src, std::size_t rows, std::size_t cols,
                    std::size_t ld) {
  out.resize(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * ld + c];
}

template <class S>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const typename S::T* a, std::size_t lda, const typename S::T* b, std::size_t ldb,
          typename S::T* c, std::size_t ldc) {
  using T = typename S::T;
  if (m == 0 || n == 0 || k == 0) return;
  thread_local std::vector<T> a_pack;
  thread_local std::vector<T> b_pack;
  if (trans_a) {
    transpose_into(a_pack, a, k, m, lda);
    a = a_pack.data();
    lda = k;
  }
  if (trans_b) {
    transpose_into(b_pack, b, n, k, ldb);
    b = b_pack.data();
    ldb = n;
  }
  gemm_nn<S>(m, n, k, a, lda, b, ldb, c, ldc);
}

template <class S>
typename S::T dot(const typename S::T* x, const typename S::T* y, std::size_t n) {
  typename S::V acc0 = S::zero(), acc1 = S::zero();
  std::size_t i = 0;
  for (; i + 2 * S::W <= n; i += 2 * S::W) {
    acc0 = S::fmadd(S::load(x + i), S::load(y + i), acc0);
    acc1 = S::fmadd(S::load(x + i + S::W), S::load(y + i + S::W), acc1);
  }
  for (; i + S::W <= n; i += S::W) acc0 = S::fmadd(S::load(x + i), S::load(y + i), acc0);
  typename S::T s = S::hsum(acc0) + S::hsum(acc1);
  for (; i < n; ++i) s += x[i] * y[i];
  return s;
}

template <class S>
void axpy(std::size_t n, typename S::T alpha, const typename S::T* x, typename S::T* y) {
  const typename S::V av = S::set1(alpha);
  std::size_t i = 0;
  for (; i + S::W <= n; i += S::W) S::store(y + i, S::fmadd(av, S::load(x + i), S::load(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

template <class S>
typename S::T sum_sq(const typename S::T* x, std::size_t n) {
  return dot<S>(x, x, n);
}

template <class S>
void scale(std::size_t n, typename S::T alpha, typename S::T* x) {
  const typename S::V av = S::set1(alpha);
  std::size_t i = 0;
  for (; i + S::W <= n; i += S::W) S::store(x + i, S::mul(av, S::load(x + i)));
  for (; i < n; ++i) x[i] *= alpha;
}

template <class S>
const KernelTable<typename S::T>& make_table() {
  static const KernelTable<typename S::T> table{&gemm<S>, &dot<S>, &axpy<S>, &sum_sq<S>,
                                                &scale<S>};
  return table;
}

}  // namespace

template <>
const KernelTable<float>& avx2_table<float>() {
  return make_table<F32>();
}
template <>
const KernelTable<double>& avx2_table<double>() {
  return make_table<F64>();
}

}  // namespace rlm::simd::detail
