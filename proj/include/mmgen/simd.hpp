#pragma once

// Inner-loop arithmetic kernels. Each kernel has a portable scalar reference
// and an AVX2+FMA variant; the variant is chosen once at startup from CPUID
// and can be pinned with MMGEN_SIMD=scalar|avx2 or set_isa().
//
// Contract shared by all variants: dot4(a, b0..b3) writes exactly the values
// dot(a, b0)..dot(a, b3) would return, so blocking a matmul over B rows
// never changes its result. gemm computes every output element as one fused
// multiply-add chain over k in ascending order, starting from zero, so all
// variants agree bitwise and no element depends on its neighbours. softmax
// uses the same polynomial exponential and the same lane-striped sum in every
// variant, so it also agrees bitwise.

#include <cstddef>
#include <string_view>

namespace mmgen::simd {

enum class Isa { kScalar, kAvx2 };

template <class T>
struct Kernels {
  T (*dot)(const T* a, const T* b, std::size_t n);
  void (*dot4)(const T* a, const T* b0, const T* b1, const T* b2, const T* b3,
               std::size_t n, T* out);
  // y += alpha * x
  void (*axpy)(T alpha, const T* x, T* y, std::size_t n);
  // max_i x[i]
  T (*max)(const T* x, std::size_t n);
  // C[m, n] (+)= A[m, k] * B[k, n], row-major with leading dimensions.
  void (*gemm)(const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc,
               std::size_t m, std::size_t n, std::size_t k, bool accumulate);
  // In place: x <- softmax(scale * x) over n >= 1 entries.
  void (*softmax)(T* x, std::size_t n, T scale);
};

bool cpu_supports(Isa isa);
Isa detect_isa();
Isa active_isa();
// Throws ConfigError if the CPU lacks the requested extension.
void set_isa(Isa isa);
std::string_view isa_name(Isa isa);
Isa parse_isa(std::string_view name);

template <class T>
const Kernels<T>& kernels(Isa isa);

template <class T>
const Kernels<T>& active_kernels() {
  return kernels<T>(active_isa());
}

namespace scalar {
template <class T>
const Kernels<T>& table();
}
namespace avx2 {
template <class T>
const Kernels<T>& table();
}

}  // namespace mmgen::simd
