#include <doctest.h>

#include <vector>

#include "key2mesh/simd/kernels.hpp"
#include "support.hpp"

using namespace k2m;
using namespace k2m::simd;
using k2m::test::random_tensor;

namespace {

std::vector<double> gemm_with(const KernelTable& kt, Trans ta, Trans tb, std::size_t m, std::size_t n,
                              std::size_t k, double alpha, const Tensor& a, const Tensor& b, double beta,
                              const Tensor& c0) {
  std::vector<double> c(c0.values());
  const std::size_t lda = ta == Trans::No ? k : m;
  const std::size_t ldb = tb == Trans::No ? n : k;
  kt.gemm(ta, tb, m, n, k, alpha, a.data(), lda, b.data(), ldb, beta, c.data(), n);
  return c;
}

std::vector<double> gemm_oracle(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, double alpha,
                                const Tensor& a, const Tensor& b, double beta, const Tensor& c0) {
  std::vector<double> c(c0.values());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ta == Trans::No ? a[i * k + p] : a[p * m + i];
        const double bv = tb == Trans::No ? b[p * n + j] : b[j * k + p];
        s += av * bv;
      }
      c[i * n + j] = beta * c[i * n + j] + alpha * s;
    }
  }
  return c;
}

}  // namespace

TEST_CASE("scalar gemm matches the triple-loop oracle") {
  Rng rng(31);
  for (Trans ta : {Trans::No, Trans::Yes}) {
    for (Trans tb : {Trans::No, Trans::Yes}) {
      const std::size_t m = 7, n = 5, k = 9;
      const Tensor a = random_tensor({m * k}, rng), b = random_tensor({k * n}, rng), c = random_tensor({m * n}, rng);
      const auto got = gemm_with(scalar_kernels(), ta, tb, m, n, k, 0.7, a, b, 0.3, c);
      const auto want = gemm_oracle(ta, tb, m, n, k, 0.7, a, b, 0.3, c);
      for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-13));
    }
  }
}

TEST_CASE("AVX2 kernels agree with the scalar reference") {
  if (!cpu_supports(Isa::Avx2)) {
    MESSAGE("AVX2 not available; equivalence check skipped");
    return;
  }
  Rng rng(32);
  const std::size_t shapes[][3] = {{1, 1, 1},    {1, 1024, 24}, {3, 17, 5},    {4, 130, 70},
                                   {5, 9, 300},  {64, 64, 64},  {37, 129, 260}, {300, 40, 3}};
  for (const auto& s : shapes) {
    for (Trans ta : {Trans::No, Trans::Yes}) {
      for (Trans tb : {Trans::No, Trans::Yes}) {
        for (double beta : {0.0, 1.0, 0.5}) {
          const std::size_t m = s[0], n = s[1], k = s[2];
          const Tensor a = random_tensor({m * k}, rng), b = random_tensor({k * n}, rng);
          const Tensor c = random_tensor({m * n}, rng);
          const auto x = gemm_with(scalar_kernels(), ta, tb, m, n, k, 1.3, a, b, beta, c);
          const auto y = gemm_with(avx2_kernels(), ta, tb, m, n, k, 1.3, a, b, beta, c);
          double worst = 0.0;
          for (std::size_t i = 0; i < x.size(); ++i) {
            worst = std::max(worst, std::abs(x[i] - y[i]) / std::max(1.0, std::abs(x[i])));
          }
          INFO("m=" << m << " n=" << n << " k=" << k);
          CHECK(worst <= 1e-12);
        }
      }
    }
  }

  const Tensor x = random_tensor({1031}, rng);
  std::vector<double> y1(x.size(), 0.5), y2(x.size(), 0.5);
  scalar_kernels().axpy(x.size(), -0.7, x.data(), y1.data());
  avx2_kernels().axpy(x.size(), -0.7, x.data(), y2.data());
  for (std::size_t i = 0; i < y1.size(); ++i) CHECK(y1[i] == doctest::Approx(y2[i]).epsilon(1e-15));

  const Tensor g = random_tensor({1031}, rng);
  std::vector<double> p1(x.values()), p2(x.values()), m1(x.size(), 0.1), m2(m1), v1(x.size(), 0.2), v2(v1);
  scalar_kernels().adam(x.size(), p1.data(), g.data(), m1.data(), v1.data(), 0.9, 0.999, 1e-3, 0.01, 1e-8);
  avx2_kernels().adam(x.size(), p2.data(), g.data(), m2.data(), v2.data(), 0.9, 0.999, 1e-3, 0.01, 1e-8);
  for (std::size_t i = 0; i < p1.size(); ++i) {
    CHECK(p1[i] == doctest::Approx(p2[i]).epsilon(1e-14));
    CHECK(m1[i] == doctest::Approx(m2[i]).epsilon(1e-14));
    CHECK(v1[i] == doctest::Approx(v2[i]).epsilon(1e-14));
  }
}

TEST_CASE("forcing the scalar table switches dispatch") {
  force_isa(Isa::Scalar);
  CHECK(kernels().isa == Isa::Scalar);
  if (cpu_supports(Isa::Avx2)) {
    force_isa(Isa::Avx2);
    CHECK(kernels().isa == Isa::Avx2);
  }
}
