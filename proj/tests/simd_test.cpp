#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <vector>

#include "mmgen/rng.hpp"
#include "mmgen/simd.hpp"
#include "mmgen/tensor.hpp"

namespace mmgen {
namespace {

template <class T>
std::vector<T> random_vec(Rng& rng, std::size_t n) {
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(2.0 * rng.uniform01() - 1.0);
  return v;
}

template <class T>
class SimdEquivalence : public ::testing::Test {};
using Scalars = ::testing::Types<float, double>;
TYPED_TEST_SUITE(SimdEquivalence, Scalars);

TYPED_TEST(SimdEquivalence, VariantsAgreeWithScalarReference) {
  using T = TypeParam;
  if (!simd::cpu_supports(simd::Isa::kAvx2)) GTEST_SKIP() << "no AVX2 on this host";
  const auto& ref = simd::kernels<T>(simd::Isa::kScalar);
  const auto& fast = simd::kernels<T>(simd::Isa::kAvx2);
  const double tol = std::is_same_v<T, float> ? 1e-5 : 1e-13;
  Rng rng(11);
  for (std::size_t n : {1u, 3u, 4u, 7u, 8u, 15u, 16u, 17u, 64u, 100u, 128u, 333u}) {
    const auto a = random_vec<T>(rng, n);
    const auto b = random_vec<T>(rng, n);
    double mag = 0;
    for (std::size_t i = 0; i < n; ++i) mag += std::abs(double(a[i]) * double(b[i]));
    EXPECT_NEAR(ref.dot(a.data(), b.data(), n), fast.dot(a.data(), b.data(), n), tol * (mag + 1));
    EXPECT_EQ(ref.max(a.data(), n), fast.max(a.data(), n));

    auto y_ref = random_vec<T>(rng, n);
    auto y_fast = y_ref;
    ref.axpy(T(0.75), a.data(), y_ref.data(), n);
    fast.axpy(T(0.75), a.data(), y_fast.data(), n);
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(y_ref[i], y_fast[i], tol * 4);
  }
}

TYPED_TEST(SimdEquivalence, Dot4MatchesDotBitwiseForEveryVariant) {
  using T = TypeParam;
  Rng rng(5);
  for (auto isa : {simd::Isa::kScalar, simd::Isa::kAvx2}) {
    if (!simd::cpu_supports(isa)) continue;
    const auto& k = simd::kernels<T>(isa);
    for (std::size_t n : {1u, 9u, 16u, 37u, 128u}) {
      const auto a = random_vec<T>(rng, n);
      std::vector<std::vector<T>> b;
      for (int j = 0; j < 4; ++j) b.push_back(random_vec<T>(rng, n));
      T out[4];
      k.dot4(a.data(), b[0].data(), b[1].data(), b[2].data(), b[3].data(), n, out);
      for (int j = 0; j < 4; ++j) EXPECT_EQ(out[j], k.dot(a.data(), b[j].data(), n));
    }
  }
}

TYPED_TEST(SimdEquivalence, MatmulMatchesNaiveTripleLoop) {
  using T = TypeParam;
  Rng rng(3);
  const std::size_t m = 7, n = 13, k = 21;
  const auto a = random_vec<T>(rng, m * k);
  const auto b = random_vec<T>(rng, n * k);
  std::vector<T> c(m * n, T(1));
  matmul_nt(a.data(), k, b.data(), k, c.data(), n, m, n, k, true);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double ref = 1;
      for (std::size_t t = 0; t < k; ++t) ref += double(a[i * k + t]) * double(b[j * k + t]);
      const double tol = std::is_same_v<T, float> ? 1e-4 : 1e-12;
      EXPECT_NEAR(c[i * n + j], ref, tol);
    }
}

TYPED_TEST(SimdEquivalence, GemmVariantsAgreeBitwise) {
  using T = TypeParam;
  Rng rng(8);
  const auto& ref = simd::kernels<T>(simd::Isa::kScalar);
  for (auto [m, n, k] : {std::array<std::size_t, 3>{1, 1, 1}, {3, 5, 7}, {4, 16, 16},
                         {9, 37, 20}, {17, 332, 128}, {6, 8, 3}}) {
    const auto a = random_vec<T>(rng, m * k);
    const auto b = random_vec<T>(rng, k * n);
    std::vector<T> c_ref(m * n), c_fast(m * n);
    ref.gemm(a.data(), k, b.data(), n, c_ref.data(), n, m, n, k, false);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double naive = 0;
        for (std::size_t t = 0; t < k; ++t) naive += double(a[i * k + t]) * double(b[t * n + j]);
        const double tol = std::is_same_v<T, float> ? 1e-4 : 1e-12;
        EXPECT_NEAR(c_ref[i * n + j], naive, tol);
      }
    if (!simd::cpu_supports(simd::Isa::kAvx2)) continue;
    simd::kernels<T>(simd::Isa::kAvx2).gemm(a.data(), k, b.data(), n, c_fast.data(), n, m, n, k, false);
    EXPECT_EQ(c_ref, c_fast) << m << "x" << n << "x" << k;

    // Accumulation adds the finished chain to C; single rows match full blocks.
    std::vector<T> acc(m * n, T(0.5)), row(n, T(0.5));
    matmul_nn(a.data(), k, b.data(), n, acc.data(), n, m, n, k, true);
    matmul_nn(a.data() + (m - 1) * k, k, b.data(), n, row.data(), n, 1, n, k, true);
    for (std::size_t j = 0; j < n; ++j) {
      EXPECT_EQ(acc[j], T(0.5) + c_ref[j]);
      EXPECT_EQ(row[j], acc[(m - 1) * n + j]);
    }
  }
}

TYPED_TEST(SimdEquivalence, SoftmaxAgreesBitwiseAndMatchesLibm) {
  using T = TypeParam;
  Rng rng(21);
  const double tol = std::is_same_v<T, float> ? 2e-6 : 1e-14;
  for (std::size_t n : {1u, 2u, 5u, 8u, 13u, 64u, 100u, 257u}) {
    auto x = random_vec<T>(rng, n);
    for (auto& v : x) v *= T(30);
    std::vector<double> ref(n);
    double m = -1e300, sum = 0;
    for (std::size_t i = 0; i < n; ++i) m = std::max(m, double(x[i]) * 0.25);
    for (std::size_t i = 0; i < n; ++i) sum += ref[i] = std::exp(double(x[i]) * 0.25 - m);
    auto y_ref = x;
    simd::kernels<T>(simd::Isa::kScalar).softmax(y_ref.data(), n, T(0.25));
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(y_ref[i], ref[i] / sum, tol);
    if (!simd::cpu_supports(simd::Isa::kAvx2)) continue;
    auto y_fast = x;
    simd::kernels<T>(simd::Isa::kAvx2).softmax(y_fast.data(), n, T(0.25));
    EXPECT_EQ(y_ref, y_fast) << n;
  }
}

TEST(SimdDispatch, IsaCanBePinnedAndRestored) {
  const auto before = simd::active_isa();
  simd::set_isa(simd::Isa::kScalar);
  EXPECT_EQ(simd::active_isa(), simd::Isa::kScalar);
  EXPECT_EQ(&simd::active_kernels<float>(), &simd::kernels<float>(simd::Isa::kScalar));
  simd::set_isa(before);
  EXPECT_EQ(simd::parse_isa("avx2"), simd::Isa::kAvx2);
  EXPECT_THROW(simd::parse_isa("sse9"), std::exception);
}

TEST(Tensor, TransposeRoundTrips) {
  std::vector<double> a(6 * 5);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = double(i);
  std::vector<double> t(5 * 6), back(6 * 5);
  transpose(a.data(), 5, 6, 5, t.data(), 6);
  transpose(t.data(), 6, 5, 6, back.data(), 5);
  EXPECT_EQ(a, back);
  EXPECT_EQ(t[1 * 6 + 2], a[2 * 5 + 1]);
}

}  // namespace
}  // namespace mmgen
