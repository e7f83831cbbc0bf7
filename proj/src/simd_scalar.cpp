#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>

#include "mmgen/simd.hpp"

namespace mmgen::simd::scalar {
namespace {

template <class T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <class T>
void dot4(const T* a, const T* b0, const T* b1, const T* b2, const T* b3, std::size_t n,
          T* out) {
  out[0] = dot(a, b0, n);
  out[1] = dot(a, b1, n);
  out[2] = dot(a, b2, n);
  out[3] = dot(a, b3, n);
}

template <class T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <class T>
T max(const T* x, std::size_t n) {
  T m = x[0];
  for (std::size_t i = 1; i < n; ++i) m = x[i] > m ? x[i] : m;
  return m;
}

// acc[j] = fma(a, b[j], acc[j]). std::fma is an out-of-line libm call, so
// CPUs with FMA get a copy that compiles to the scalar fma instruction; both
// round once per element and give identical bits.
template <class T>
void fma_row_portable(T a, const T* b, T* acc, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) acc[j] = std::fma(a, b[j], acc[j]);
}

#if defined(__x86_64__)
#define MMGEN_FMA_HW 1
template <class T>
__attribute__((target("fma"), optimize("no-tree-vectorize"))) void fma_row_hw(T a, const T* b, T* acc,
                                                                              std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) acc[j] = __builtin_fma(a, b[j], acc[j]);
}
template <>
__attribute__((target("fma"), optimize("no-tree-vectorize"))) void fma_row_hw<float>(float a, const float* b,
                                                                                     float* acc, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) acc[j] = __builtin_fmaf(a, b[j], acc[j]);
}
#endif

template <class T>
auto pick_fma_row() {
#ifdef MMGEN_FMA_HW
  if (__builtin_cpu_supports("fma")) return &fma_row_hw<T>;
#endif
  return &fma_row_portable<T>;
}

template <class T>
void gemm(const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc,
          std::size_t m, std::size_t n, std::size_t k, bool accumulate) {
  static const auto fma_row = pick_fma_row<T>();
  // Row-at-a-time so B is read contiguously; each element still sees one
  // ascending fma chain from zero.
  constexpr std::size_t kTile = 256;
  T s[kTile];
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j0 = 0; j0 < n; j0 += kTile) {
      const std::size_t w = std::min(kTile, n - j0);
      for (std::size_t j = 0; j < w; ++j) s[j] = 0;
      for (std::size_t p = 0; p < k; ++p) fma_row(a[i * lda + p], b + p * ldb + j0, s, w);
      T* out = c + i * ldc + j0;
      for (std::size_t j = 0; j < w; ++j) out[j] = accumulate ? out[j] + s[j] : s[j];
    }
}

// exp(x) for x <= 0, mirrored operation by operation in the AVX2 variant.
float exp_nonpos(float x) {
  x = std::max(x, -87.0f);
  const float fx = std::nearbyint(x * 1.44269504088896341f);
  float r = std::fma(-fx, 0.693359375f, x);
  r = std::fma(-fx, -2.12194440e-4f, r);
  float p = 1.9875691500e-4f;
  p = std::fma(p, r, 1.3981999507e-3f);
  p = std::fma(p, r, 8.3334519073e-3f);
  p = std::fma(p, r, 4.1665795894e-2f);
  p = std::fma(p, r, 1.6666665459e-1f);
  p = std::fma(p, r, 5.0000001201e-1f);
  const float y = std::fma(p, r * r, r) + 1.0f;
  const auto bits = static_cast<std::uint32_t>(static_cast<std::int32_t>(fx) + 127) << 23;
  return y * std::bit_cast<float>(bits);
}

double exp_nonpos(double x) {
  x = std::max(x, -708.0);
  const double fx = std::nearbyint(x * 1.4426950408889634073599);
  double r = std::fma(-fx, 6.93145751953125e-1, x);
  r = std::fma(-fx, 1.42860682030941723212e-6, r);
  const double xx = r * r;
  double p = 1.26177193074810590878e-4;
  p = std::fma(p, xx, 3.02994407707441961300e-2);
  p = std::fma(p, xx, 9.99999999999999999910e-1);
  const double px = r * p;
  double q = 3.00198505138664455042e-6;
  q = std::fma(q, xx, 2.52448340349684104192e-3);
  q = std::fma(q, xx, 2.27265548208155028766e-1);
  q = std::fma(q, xx, 2.00000000000000000009e0);
  const double y = std::fma(2.0, px / (q - px), 1.0);
  const auto bits = static_cast<std::uint64_t>(static_cast<std::int64_t>(fx) + 1023) << 52;
  return y * std::bit_cast<double>(bits);
}

template <class T>
void softmax(T* x, std::size_t n, T scale) {
  constexpr std::size_t kLanes = 32 / sizeof(T);
  for (std::size_t i = 0; i < n; ++i) x[i] *= scale;
  const T m = max(x, n);
  T acc[kLanes] = {};
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = exp_nonpos(x[i] - m);
    acc[i < n - n % kLanes ? i % kLanes : i - (n - n % kLanes)] += x[i];
  }
  T sum = acc[0];
  for (std::size_t l = 1; l < kLanes; ++l) sum += acc[l];
  const T inv = T(1) / sum;
  for (std::size_t i = 0; i < n; ++i) x[i] *= inv;
}

}  // namespace

template <class T>
const Kernels<T>& table() {
  static const Kernels<T> k{&dot<T>, &dot4<T>, &axpy<T>, &max<T>, &gemm<T>, &softmax<T>};
  return k;
}

template const Kernels<float>& table<float>();
template const Kernels<double>& table<double>();

}  // namespace mmgen::simd::scalar
