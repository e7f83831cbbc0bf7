#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace mmgen {

// Dense row-major matrix. Rows are contiguous.
template <class T>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, T fill = T(0)) : rows(r), cols(c), data(r * c, fill) {}

  T* row(std::size_t r) { return data.data() + r * cols; }
  const T* row(std::size_t r) const { return data.data() + r * cols; }
  std::span<T> row_span(std::size_t r) { return {row(r), cols}; }
  std::span<const T> row_span(std::size_t r) const { return {row(r), cols}; }
  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  bool operator==(const Matrix&) const = default;
};

// C[m, n] (+)= sum_k A[m, k] * B[n, k]. All operands row-major with explicit
// leading dimensions; each output element is a single kernel dot product, so
// its value does not depend on m, n or how rows are grouped.
template <class T>
void matmul_nt(const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc,
               std::size_t m, std::size_t n, std::size_t k, bool accumulate);

// C[m, n] (+)= A[m, k] * B[k, n]. Each output element is one fused
// multiply-add chain over k, independent of m, n and of the active ISA.
template <class T>
void matmul_nn(const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc,
               std::size_t m, std::size_t n, std::size_t k, bool accumulate);

// out[c, r] = in[r, c] for an r x c block with leading dimension ld_in.
template <class T>
void transpose(const T* in, std::size_t ld_in, std::size_t rows, std::size_t cols, T* out,
               std::size_t ld_out);

// Convenience: Y = X * W^T where W is [out x in].
template <class T>
Matrix<T> linear(const Matrix<T>& x, const T* w, std::size_t out_features);

}  // namespace mmgen
