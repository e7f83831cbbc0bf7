#include "mmgen/tensor.hpp"

#include "mmgen/simd.hpp"

namespace mmgen {

template <class T>
void matmul_nt(const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc,
               std::size_t m, std::size_t n, std::size_t k, bool accumulate) {
  const auto& kern = simd::active_kernels<T>();
  const std::size_t n4 = n - n % 4;
  T tmp[4];
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * lda;
    T* ci = c + i * ldc;
    for (std::size_t j = 0; j < n4; j += 4) {
      kern.dot4(ai, b + j * ldb, b + (j + 1) * ldb, b + (j + 2) * ldb, b + (j + 3) * ldb, k, tmp);
      if (accumulate) {
        ci[j] += tmp[0];
        ci[j + 1] += tmp[1];
        ci[j + 2] += tmp[2];
        ci[j + 3] += tmp[3];
      } else {
        ci[j] = tmp[0];
        ci[j + 1] = tmp[1];
        ci[j + 2] = tmp[2];
        ci[j + 3] = tmp[3];
      }
    }
    for (std::size_t j = n4; j < n; ++j) {
      const T v = kern.dot(ai, b + j * ldb, k);
      ci[j] = accumulate ? ci[j] + v : v;
    }
  }
}

template <class T>
void matmul_nn(const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc,
               std::size_t m, std::size_t n, std::size_t k, bool accumulate) {
  if (m == 0 || n == 0) return;
  simd::active_kernels<T>().gemm(a, lda, b, ldb, c, ldc, m, n, k, accumulate);
}

template <class T>
void transpose(const T* in, std::size_t ld_in, std::size_t rows, std::size_t cols, T* out,
               std::size_t ld_out) {
  constexpr std::size_t kTile = 32;
  for (std::size_t r0 = 0; r0 < rows; r0 += kTile)
    for (std::size_t c0 = 0; c0 < cols; c0 += kTile) {
      const std::size_t r1 = r0 + kTile < rows ? r0 + kTile : rows;
      const std::size_t c1 = c0 + kTile < cols ? c0 + kTile : cols;
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t cc = c0; cc < c1; ++cc) out[cc * ld_out + r] = in[r * ld_in + cc];
    }
}

template <class T>
Matrix<T> linear(const Matrix<T>& x, const T* w, std::size_t out_features) {
  Matrix<T> y(x.rows, out_features);
  matmul_nt(x.data.data(), x.cols, w, x.cols, y.data.data(), out_features, x.rows, out_features,
            x.cols, false);
  return y;
}

#define MMGEN_INSTANTIATE(T)                                                                    \
  template void matmul_nt<T>(const T*, std::size_t, const T*, std::size_t, T*, std::size_t,     \
                             std::size_t, std::size_t, std::size_t, bool);                      \
  template void matmul_nn<T>(const T*, std::size_t, const T*, std::size_t, T*, std::size_t,     \
                             std::size_t, std::size_t, std::size_t, bool);                      \
  template void transpose<T>(const T*, std::size_t, std::size_t, std::size_t, T*, std::size_t); \
  template Matrix<T> linear<T>(const Matrix<T>&, const T*, std::size_t);

MMGEN_INSTANTIATE(float)
MMGEN_INSTANTIATE(double)
#undef MMGEN_INSTANTIATE

}  // namespace mmgen
