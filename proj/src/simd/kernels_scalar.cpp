#include "key2mesh/simd/kernels.hpp"

#include <cmath>

namespace k2m::simd {
namespace {

inline double load(const double* p, std::size_t ld, Trans t, std::size_t r, std::size_t c) {
  return t == Trans::No ? p[r * ld + c] : p[c * ld + r];
}

void gemm_scalar(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, double alpha,
                 const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta,
                 double* c, std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * ldc;
    if (beta == 0.0) {
      for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
    } else if (beta != 1.0) {
      for (std::size_t j = 0; j < n; ++j) crow[j] *= beta;
    }
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = alpha * load(a, lda, ta, i, p);
      if (aip == 0.0) continue;
      if (tb == Trans::No) {
        const double* brow = b + p * ldb;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      } else {
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * b[j * ldb + p];
      }
    }
  }
}

void axpy_scalar(std::size_t n, double alpha, const double* x, double* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void adam_scalar(std::size_t n, double* param, const double* grad, double* m, double* v,
                 double beta1, double beta2, double step_size, double corr2, double eps) {
  const double sqrt_corr2 = std::sqrt(corr2);
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grad[i];
    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
    param[i] -= step_size * m[i] / (std::sqrt(v[i]) / sqrt_corr2 + eps);
  }
}

}  // namespace

const KernelTable& scalar_kernels() {
  static const KernelTable table{Isa::Scalar, &gemm_scalar, &axpy_scalar, &adam_scalar};
  return table;
}

}  // namespace k2m::simd
