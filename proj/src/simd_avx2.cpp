// Compiled with -mavx2 -mfma; only reached after a CPUID check.
#include <immintrin.h>

#include <algorithm>
#include <cmath>

#include "mmgen/simd.hpp"

namespace mmgen::simd::avx2 {
namespace {

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 sh = _mm_movehdup_ps(lo);
  __m128 s = _mm_add_ps(lo, sh);
  sh = _mm_movehl_ps(sh, s);
  s = _mm_add_ss(s, sh);
  return _mm_cvtss_f32(s);
}

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d h = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, h));
}

float dot_f32(const float* a, const float* b, std::size_t n) {
  __m256 acc = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) acc = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc);
  float s = hsum(acc);
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

void dot4_f32(const float* a, const float* b0, const float* b1, const float* b2,
              const float* b3, std::size_t n, float* out) {
  __m256 c0 = _mm256_setzero_ps(), c1 = _mm256_setzero_ps();
  __m256 c2 = _mm256_setzero_ps(), c3 = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 va = _mm256_loadu_ps(a + i);
    c0 = _mm256_fmadd_ps(va, _mm256_loadu_ps(b0 + i), c0);
    c1 = _mm256_fmadd_ps(va, _mm256_loadu_ps(b1 + i), c1);
    c2 = _mm256_fmadd_ps(va, _mm256_loadu_ps(b2 + i), c2);
    c3 = _mm256_fmadd_ps(va, _mm256_loadu_ps(b3 + i), c3);
  }
  float s0 = hsum(c0), s1 = hsum(c1), s2 = hsum(c2), s3 = hsum(c3);
  for (; i < n; ++i) {
    s0 += a[i] * b0[i];
    s1 += a[i] * b1[i];
    s2 += a[i] * b2[i];
    s3 += a[i] * b3[i];
  }
  out[0] = s0;
  out[1] = s1;
  out[2] = s2;
  out[3] = s3;
}

void axpy_f32(float alpha, const float* x, float* y, std::size_t n) {
  const __m256 va = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

float max_f32(const float* x, std::size_t n) {
  float m = x[0];
  std::size_t i = 0;
  if (n >= 8) {
    __m256 vm = _mm256_loadu_ps(x);
    for (i = 8; i + 8 <= n; i += 8) vm = _mm256_max_ps(vm, _mm256_loadu_ps(x + i));
    alignas(32) float lanes[8];
    _mm256_store_ps(lanes, vm);
    m = lanes[0];
    for (int l = 1; l < 8; ++l) m = lanes[l] > m ? lanes[l] : m;
  }
  for (; i < n; ++i) m = x[i] > m ? x[i] : m;
  return m;
}

double dot_f64(const double* a, const double* b, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) acc = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc);
  double s = hsum(acc);
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

void dot4_f64(const double* a, const double* b0, const double* b1, const double* b2,
              const double* b3, std::size_t n, double* out) {
  __m256d c0 = _mm256_setzero_pd(), c1 = _mm256_setzero_pd();
  __m256d c2 = _mm256_setzero_pd(), c3 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d va = _mm256_loadu_pd(a + i);
    c0 = _mm256_fmadd_pd(va, _mm256_loadu_pd(b0 + i), c0);
    c1 = _mm256_fmadd_pd(va, _mm256_loadu_pd(b1 + i), c1);
    c2 = _mm256_fmadd_pd(va, _mm256_loadu_pd(b2 + i), c2);
    c3 = _mm256_fmadd_pd(va, _mm256_loadu_pd(b3 + i), c3);
  }
  double s0 = hsum(c0), s1 = hsum(c1), s2 = hsum(c2), s3 = hsum(c3);
  for (; i < n; ++i) {
    s0 += a[i] * b0[i];
    s1 += a[i] * b1[i];
    s2 += a[i] * b2[i];
    s3 += a[i] * b3[i];
  }
  out[0] = s0;
  out[1] = s1;
  out[2] = s2;
  out[3] = s3;
}

void axpy_f64(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

double max_f64(const double* x, std::size_t n) {
  double m = x[0];
  std::size_t i = 0;
  if (n >= 4) {
    __m256d vm = _mm256_loadu_pd(x);
    for (i = 4; i + 4 <= n; i += 4) vm = _mm256_max_pd(vm, _mm256_loadu_pd(x + i));
    alignas(32) double lanes[4];
    _mm256_store_pd(lanes, vm);
    m = lanes[0];
    for (int l = 1; l < 4; ++l) m = lanes[l] > m ? lanes[l] : m;
  }
  for (; i < n; ++i) m = x[i] > m ? x[i] : m;
  return m;
}


template <class T>
struct Vec;
template <>
struct Vec<float> {
  using type = __m256;
  static constexpr std::size_t kLanes = 8;
  static type zero() { return _mm256_setzero_ps(); }
  static type load(const float* p) { return _mm256_loadu_ps(p); }
  static type bcast(const float* p) { return _mm256_broadcast_ss(p); }
  static type fma(type a, type b, type c) { return _mm256_fmadd_ps(a, b, c); }
  static type add(type a, type b) { return _mm256_add_ps(a, b); }
  static type sub(type a, type b) { return _mm256_sub_ps(a, b); }
  static type mul(type a, type b) { return _mm256_mul_ps(a, b); }
  static type set1(float v) { return _mm256_set1_ps(v); }
  static void store(float* p, type v) { _mm256_storeu_ps(p, v); }
  static __m256i tail_mask(std::size_t r) {
    return _mm256_cmpgt_epi32(_mm256_set1_epi32(static_cast<int>(r)),
                              _mm256_setr_epi32(0, 1, 2, 3, 4, 5, 6, 7));
  }
  static type mload(const float* p, __m256i m) { return _mm256_maskload_ps(p, m); }
  static void mstore(float* p, __m256i m, type v) { _mm256_maskstore_ps(p, m, v); }
};
template <>
struct Vec<double> {
  using type = __m256d;
  static constexpr std::size_t kLanes = 4;
  static type zero() { return _mm256_setzero_pd(); }
  static type load(const double* p) { return _mm256_loadu_pd(p); }
  static type bcast(const double* p) { return _mm256_broadcast_sd(p); }
  static type fma(type a, type b, type c) { return _mm256_fmadd_pd(a, b, c); }
  static type add(type a, type b) { return _mm256_add_pd(a, b); }
  static type sub(type a, type b) { return _mm256_sub_pd(a, b); }
  static type mul(type a, type b) { return _mm256_mul_pd(a, b); }
  static type set1(double v) { return _mm256_set1_pd(v); }
  static void store(double* p, type v) { _mm256_storeu_pd(p, v); }
  static __m256i tail_mask(std::size_t r) {
    return _mm256_cmpgt_epi64(_mm256_set1_epi64x(static_cast<long long>(r)),
                              _mm256_setr_epi64x(0, 1, 2, 3));
  }
  static type mload(const double* p, __m256i m) { return _mm256_maskload_pd(p, m); }
  static void mstore(double* p, __m256i m, type v) { _mm256_maskstore_pd(p, m, v); }
};

// MR rows by NV vectors of columns, accumulated in registers.
template <class T, int MR, int NV>
inline void gemm_block(const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c,
                       std::size_t ldc, std::size_t k, bool accumulate) {
  using V = Vec<T>;
  typename V::type r[MR][NV];
#pragma GCC unroll 8
  for (int i = 0; i < MR; ++i)
#pragma GCC unroll 4
    for (int v = 0; v < NV; ++v) r[i][v] = V::zero();
  for (std::size_t p = 0; p < k; ++p) {
    typename V::type bv[NV];
#pragma GCC unroll 4
    for (int v = 0; v < NV; ++v) bv[v] = V::load(b + p * ldb + v * V::kLanes);
#pragma GCC unroll 8
    for (int i = 0; i < MR; ++i) {
      const typename V::type av = V::bcast(a + i * lda + p);
#pragma GCC unroll 4
      for (int v = 0; v < NV; ++v) r[i][v] = V::fma(av, bv[v], r[i][v]);
    }
  }
#pragma GCC unroll 8
  for (int i = 0; i < MR; ++i)
#pragma GCC unroll 4
    for (int v = 0; v < NV; ++v) {
      T* out = c + i * ldc + v * V::kLanes;
      V::store(out, accumulate ? V::add(V::load(out), r[i][v]) : r[i][v]);
    }
}

// Fewer than one vector of columns: masked lanes are never loaded or stored.
template <class T, int MR>
inline void gemm_block_tail(const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c,
                            std::size_t ldc, std::size_t k, std::size_t cols, bool accumulate) {
  using V = Vec<T>;
  const __m256i mask = V::tail_mask(cols);
  typename V::type r[MR];
#pragma GCC unroll 8
  for (int i = 0; i < MR; ++i) r[i] = V::zero();
  for (std::size_t p = 0; p < k; ++p) {
    const typename V::type bv = V::mload(b + p * ldb, mask);
#pragma GCC unroll 8
    for (int i = 0; i < MR; ++i) r[i] = V::fma(V::bcast(a + i * lda + p), bv, r[i]);
  }
#pragma GCC unroll 8
  for (int i = 0; i < MR; ++i) {
    T* out = c + i * ldc;
    V::mstore(out, mask, accumulate ? V::add(V::mload(out, mask), r[i]) : r[i]);
  }
}

template <class T, int MR>
inline void gemm_rows(const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c,
                      std::size_t ldc, std::size_t n, std::size_t k, bool accumulate) {
  constexpr std::size_t L = Vec<T>::kLanes;
  std::size_t j = 0;
  for (; j + 2 * L <= n; j += 2 * L) gemm_block<T, MR, 2>(a, lda, b + j, ldb, c + j, ldc, k, accumulate);
  for (; j + L <= n; j += L) gemm_block<T, MR, 1>(a, lda, b + j, ldb, c + j, ldc, k, accumulate);
  if (j < n) gemm_block_tail<T, MR>(a, lda, b + j, ldb, c + j, ldc, k, n - j, accumulate);
}

template <class T>
void gemm(const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc,
          std::size_t m, std::size_t n, std::size_t k, bool accumulate) {
  std::size_t i = 0;
  for (; i + 6 <= m; i += 6) gemm_rows<T, 6>(a + i * lda, lda, b, ldb, c + i * ldc, ldc, n, k, accumulate);
  switch (m - i) {
    case 5: gemm_rows<T, 5>(a + i * lda, lda, b, ldb, c + i * ldc, ldc, n, k, accumulate); break;
    case 4: gemm_rows<T, 4>(a + i * lda, lda, b, ldb, c + i * ldc, ldc, n, k, accumulate); break;
    case 3: gemm_rows<T, 3>(a + i * lda, lda, b, ldb, c + i * ldc, ldc, n, k, accumulate); break;
    case 2: gemm_rows<T, 2>(a + i * lda, lda, b, ldb, c + i * ldc, ldc, n, k, accumulate); break;
    case 1: gemm_rows<T, 1>(a + i * lda, lda, b, ldb, c + i * ldc, ldc, n, k, accumulate); break;
    default: break;
  }
}

inline float vmax(const float* x, std::size_t n) { return max_f32(x, n); }
inline double vmax(const double* x, std::size_t n) { return max_f64(x, n); }

// exp(x) for x <= 0; the scalar reference performs the same operations.
inline __m256 exp_nonpos(__m256 x) {
  x = _mm256_max_ps(x, _mm256_set1_ps(-87.0f));
  const __m256 fx = _mm256_round_ps(_mm256_mul_ps(x, _mm256_set1_ps(1.44269504088896341f)),
                                    _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
  __m256 r = _mm256_fnmadd_ps(fx, _mm256_set1_ps(0.693359375f), x);
  r = _mm256_fnmadd_ps(fx, _mm256_set1_ps(-2.12194440e-4f), r);
  __m256 p = _mm256_set1_ps(1.9875691500e-4f);
  p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(1.3981999507e-3f));
  p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(8.3334519073e-3f));
  p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(4.1665795894e-2f));
  p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(1.6666665459e-1f));
  p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(5.0000001201e-1f));
  const __m256 y = _mm256_add_ps(_mm256_fmadd_ps(p, _mm256_mul_ps(r, r), r), _mm256_set1_ps(1.0f));
  const __m256i e = _mm256_slli_epi32(_mm256_add_epi32(_mm256_cvtps_epi32(fx), _mm256_set1_epi32(127)), 23);
  return _mm256_mul_ps(y, _mm256_castsi256_ps(e));
}

inline __m256d exp_nonpos(__m256d x) {
  x = _mm256_max_pd(x, _mm256_set1_pd(-708.0));
  const __m256d fx = _mm256_round_pd(_mm256_mul_pd(x, _mm256_set1_pd(1.4426950408889634073599)),
                                     _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
  __m256d r = _mm256_fnmadd_pd(fx, _mm256_set1_pd(6.93145751953125e-1), x);
  r = _mm256_fnmadd_pd(fx, _mm256_set1_pd(1.42860682030941723212e-6), r);
  const __m256d xx = _mm256_mul_pd(r, r);
  __m256d p = _mm256_set1_pd(1.26177193074810590878e-4);
  p = _mm256_fmadd_pd(p, xx, _mm256_set1_pd(3.02994407707441961300e-2));
  p = _mm256_fmadd_pd(p, xx, _mm256_set1_pd(9.99999999999999999910e-1));
  const __m256d px = _mm256_mul_pd(r, p);
  __m256d q = _mm256_set1_pd(3.00198505138664455042e-6);
  q = _mm256_fmadd_pd(q, xx, _mm256_set1_pd(2.52448340349684104192e-3));
  q = _mm256_fmadd_pd(q, xx, _mm256_set1_pd(2.27265548208155028766e-1));
  q = _mm256_fmadd_pd(q, xx, _mm256_set1_pd(2.00000000000000000009e0));
  const __m256d y = _mm256_fmadd_pd(_mm256_set1_pd(2.0), _mm256_div_pd(px, _mm256_sub_pd(q, px)),
                                    _mm256_set1_pd(1.0));
  const __m256i e = _mm256_slli_epi64(
      _mm256_add_epi64(_mm256_cvtepi32_epi64(_mm256_cvtpd_epi32(fx)), _mm256_set1_epi64x(1023)), 52);
  return _mm256_mul_pd(y, _mm256_castsi256_pd(e));
}

template <class T>
void softmax(T* x, std::size_t n, T scale) {
  using V = Vec<T>;
  constexpr std::size_t L = V::kLanes;
  const std::size_t nv = n - n % L;
  const auto vs = V::set1(scale);
  for (std::size_t i = 0; i < nv; i += L) V::store(x + i, V::mul(V::load(x + i), vs));
  for (std::size_t i = nv; i < n; ++i) x[i] *= scale;
  const T m = vmax(x, n);
  const auto vm = V::set1(m);
  auto acc = V::zero();
  for (std::size_t i = 0; i < nv; i += L) {
    const auto e = exp_nonpos(V::sub(V::load(x + i), vm));
    V::store(x + i, e);
    acc = V::add(acc, e);
  }
  alignas(32) T lanes[L];
  V::store(lanes, acc);
  alignas(32) T tail[L] = {};
  const std::size_t r = n - nv;
  std::copy(x + nv, x + n, tail);
  const auto et = exp_nonpos(V::sub(V::load(tail), vm));
  V::store(tail, et);
  for (std::size_t i = 0; i < r; ++i) {
    x[nv + i] = tail[i];
    lanes[i] += tail[i];
  }
  T sum = lanes[0];
  for (std::size_t l = 1; l < L; ++l) sum += lanes[l];
  const T inv = T(1) / sum;
  const auto vi = V::set1(inv);
  for (std::size_t i = 0; i < nv; i += L) V::store(x + i, V::mul(V::load(x + i), vi));
  for (std::size_t i = nv; i < n; ++i) x[i] *= inv;
}

}  // namespace

template <>
const Kernels<float>& table<float>() {
  static const Kernels<float> k{&dot_f32, &dot4_f32, &axpy_f32, &max_f32, &gemm<float>, &softmax<float>};
  return k;
}

template <>
const Kernels<double>& table<double>() {
  static const Kernels<double> k{&dot_f64, &dot4_f64, &axpy_f64, &max_f64, &gemm<double>, &softmax<double>};
  return k;
}

}  // namespace mmgen::simd::avx2
