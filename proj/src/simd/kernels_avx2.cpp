// Compiled with -mavx2 -mfma. Nothing here may run before cpu_supports(Isa::Avx2).
#include "key2mesh/simd/kernels.hpp"

#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

namespace k2m::simd {
namespace {

constexpr std::size_t kMr = 6;
constexpr std::size_t kNr = 8;
constexpr std::size_t kKc = 256;
constexpr std::size_t kMc = 72;
constexpr std::size_t kNc = 1024;

struct PackBuffers {
  std::vector<double> a;
  std::vector<double> b;
};

PackBuffers& buffers() {
  thread_local PackBuffers buf;
  return buf;
}

// Packs an mc x kc block of op(A) into kMr-row panels, zero-padded.
void pack_a(Trans ta, const double* a, std::size_t lda, std::size_t i0, std::size_t p0,
            std::size_t mc, std::size_t kc, double* dst) {
  for (std::size_t ir = 0; ir < mc; ir += kMr) {
    const std::size_t rows = std::min(kMr, mc - ir);
    for (std::size_t p = 0; p < kc; ++p) {
      for (std::size_t r = 0; r < kMr; ++r) {
        double val = 0.0;
        if (r < rows) {
          const std::size_t row = i0 + ir + r;
          const std::size_t col = p0 + p;
          val = ta == Trans::No ? a[row * lda + col] : a[col * lda + row];
        }
        *dst++ = val;
      }
    }
  }
}

// Packs a kc x nc block of op(B) into kNr-column panels, zero-padded.
void pack_b(Trans tb, const double* b, std::size_t ldb, std::size_t p0, std::size_t j0,
            std::size_t kc, std::size_t nc, double* dst) {
  for (std::size_t jr = 0; jr < nc; jr += kNr) {
    const std::size_t cols = std::min(kNr, nc - jr);
    for (std::size_t p = 0; p < kc; ++p) {
      const std::size_t row = p0 + p;
      if (tb == Trans::No && cols == kNr) {
        std::memcpy(dst, b + row * ldb + j0 + jr, kNr * sizeof(double));
        dst += kNr;
        continue;
      }
      for (std::size_t c = 0; c < kNr; ++c) {
        double val = 0.0;
        if (c < cols) {
          const std::size_t col = j0 + jr + c;
          val = tb == Trans::No ? b[row * ldb + col] : b[col * ldb + row];
        }
        *dst++ = val;
      }
    }
  }
}

// 6x8 register tile: acc = Apanel * Bpanel over kc, then C = alpha*acc + C.
void micro_kernel(std::size_t kc, const double* ap, const double* bp, double alpha, double* c,
                  std::size_t ldc, std::size_t rows, std::size_t cols) {
  __m256d c00 = _mm256_setzero_pd(), c01 = _mm256_setzero_pd();
  __m256d c10 = _mm256_setzero_pd(), c11 = _mm256_setzero_pd();
  __m256d c20 = _mm256_setzero_pd(), c21 = _mm256_setzero_pd();
  __m256d c30 = _mm256_setzero_pd(), c31 = _mm256_setzero_pd();
  __m256d c40 = _mm256_setzero_pd(), c41 = _mm256_setzero_pd();
  __m256d c50 = _mm256_setzero_pd(), c51 = _mm256_setzero_pd();
  for (std::size_t p = 0; p < kc; ++p) {
    const __m256d b0 = _mm256_loadu_pd(bp);
    const __m256d b1 = _mm256_loadu_pd(bp + 4);
    __m256d a = _mm256_broadcast_sd(ap + 0);
    c00 = _mm256_fmadd_pd(a, b0, c00);
    c01 = _mm256_fmadd_pd(a, b1, c01);
    a = _mm256_broadcast_sd(ap + 1);
    c10 = _mm256_fmadd_pd(a, b0, c10);
    c11 = _mm256_fmadd_pd(a, b1, c11);
    a = _mm256_broadcast_sd(ap + 2);
    c20 = _mm256_fmadd_pd(a, b0, c20);
    c21 = _mm256_fmadd_pd(a, b1, c21);
    a = _mm256_broadcast_sd(ap + 3);
    c30 = _mm256_fmadd_pd(a, b0, c30);
    c31 = _mm256_fmadd_pd(a, b1, c31);
    a = _mm256_broadcast_sd(ap + 4);
    c40 = _mm256_fmadd_pd(a, b0, c40);
    c41 = _mm256_fmadd_pd(a, b1, c41);
    a = _mm256_broadcast_sd(ap + 5);
    c50 = _mm256_fmadd_pd(a, b0, c50);
    c51 = _mm256_fmadd_pd(a, b1, c51);
    ap += kMr;
    bp += kNr;
  }
  alignas(32) double tile[kMr * kNr];
  const __m256d va = _mm256_set1_pd(alpha);
  _mm256_store_pd(tile + 0, _mm256_mul_pd(va, c00));
  _mm256_store_pd(tile + 4, _mm256_mul_pd(va, c01));
  _mm256_store_pd(tile + 8, _mm256_mul_pd(va, c10));
  _mm256_store_pd(tile + 12, _mm256_mul_pd(va, c11));
  _mm256_store_pd(tile + 16, _mm256_mul_pd(va, c20));
  _mm256_store_pd(tile + 20, _mm256_mul_pd(va, c21));
  _mm256_store_pd(tile + 24, _mm256_mul_pd(va, c30));
  _mm256_store_pd(tile + 28, _mm256_mul_pd(va, c31));
  _mm256_store_pd(tile + 32, _mm256_mul_pd(va, c40));
  _mm256_store_pd(tile + 36, _mm256_mul_pd(va, c41));
  _mm256_store_pd(tile + 40, _mm256_mul_pd(va, c50));
  _mm256_store_pd(tile + 44, _mm256_mul_pd(va, c51));
  if (rows == kMr && cols == kNr) {
    for (std::size_t r = 0; r < kMr; ++r) {
      double* crow = c + r * ldc;
      _mm256_storeu_pd(crow, _mm256_add_pd(_mm256_loadu_pd(crow), _mm256_load_pd(tile + r * kNr)));
      _mm256_storeu_pd(crow + 4,
                       _mm256_add_pd(_mm256_loadu_pd(crow + 4), _mm256_load_pd(tile + r * kNr + 4)));
    }
    return;
  }
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < cols; ++j) c[r * ldc + j] += tile[r * kNr + j];
  }
}

void gemm_avx2(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, double alpha,
               const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta,
               double* c, std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * ldc;
    if (beta == 0.0) {
      std::fill(crow, crow + n, 0.0);
    } else if (beta != 1.0) {
      for (std::size_t j = 0; j < n; ++j) crow[j] *= beta;
    }
  }
  if (k == 0 || alpha == 0.0) return;

  // Few rows: stream B once instead of packing it.
  if (m <= 4 && ta == Trans::No && tb == Trans::No) {
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * ldb;
      for (std::size_t i = 0; i < m; ++i) {
        const double s = alpha * a[i * lda + p];
        if (s == 0.0) continue;
        const __m256d vs = _mm256_set1_pd(s);
        double* crow = c + i * ldc;
        std::size_t j = 0;
        for (; j + 4 <= n; j += 4) {
          _mm256_storeu_pd(crow + j, _mm256_fmadd_pd(vs, _mm256_loadu_pd(brow + j),
                                                     _mm256_loadu_pd(crow + j)));
        }
        for (; j < n; ++j) crow[j] += s * brow[j];
      }
    }
    return;
  }

  auto& buf = buffers();
  buf.a.resize(((kMc + kMr - 1) / kMr) * kMr * kKc);
  buf.b.resize(((kNc + kNr - 1) / kNr) * kNr * kKc);

  for (std::size_t jc = 0; jc < n; jc += kNc) {
    const std::size_t nc = std::min(kNc, n - jc);
    for (std::size_t pc = 0; pc < k; pc += kKc) {
      const std::size_t kc = std::min(kKc, k - pc);
      pack_b(tb, b, ldb, pc, jc, kc, nc, buf.b.data());
      for (std::size_t ic = 0; ic < m; ic += kMc) {
        const std::size_t mc = std::min(kMc, m - ic);
        pack_a(ta, a, lda, ic, pc, mc, kc, buf.a.data());
        for (std::size_t jr = 0; jr < nc; jr += kNr) {
          const double* bp = buf.b.data() + (jr / kNr) * kNr * kc;
          const std::size_t cols = std::min(kNr, nc - jr);
          for (std::size_t ir = 0; ir < mc; ir += kMr) {
            const double* ap = buf.a.data() + (ir / kMr) * kMr * kc;
            const std::size_t rows = std::min(kMr, mc - ir);
            micro_kernel(kc, ap, bp, alpha, c + (ic + ir) * ldc + jc + jr, ldc, rows, cols);
          }
        }
      }
    }
  }
}

void axpy_avx2(std::size_t n, double alpha, const double* x, double* y) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void adam_avx2(std::size_t n, double* param, const double* grad, double* m, double* v,
               double beta1, double beta2, double step_size, double corr2, double eps) {
  const double inv_sqrt_corr2 = 1.0 / std::sqrt(corr2);
  const __m256d vb1 = _mm256_set1_pd(beta1);
  const __m256d vb1c = _mm256_set1_pd(1.0 - beta1);
  const __m256d vb2 = _mm256_set1_pd(beta2);
  const __m256d vb2c = _mm256_set1_pd(1.0 - beta2);
  const __m256d vstep = _mm256_set1_pd(step_size);
  const __m256d vinv = _mm256_set1_pd(inv_sqrt_corr2);
  const __m256d veps = _mm256_set1_pd(eps);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d g = _mm256_loadu_pd(grad + i);
    __m256d mi = _mm256_loadu_pd(m + i);
    __m256d vi = _mm256_loadu_pd(v + i);
    mi = _mm256_add_pd(_mm256_mul_pd(vb1, mi), _mm256_mul_pd(vb1c, g));
    vi = _mm256_add_pd(_mm256_mul_pd(vb2, vi), _mm256_mul_pd(vb2c, _mm256_mul_pd(g, g)));
    const __m256d denom = _mm256_add_pd(_mm256_mul_pd(_mm256_sqrt_pd(vi), vinv), veps);
    const __m256d upd = _mm256_div_pd(_mm256_mul_pd(vstep, mi), denom);
    _mm256_storeu_pd(param + i, _mm256_sub_pd(_mm256_loadu_pd(param + i), upd));
    _mm256_storeu_pd(m + i, mi);
    _mm256_storeu_pd(v + i, vi);
  }
  for (; i < n; ++i) {
    const double g = grad[i];
    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
    param[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_corr2 + eps);
  }
}

}  // namespace

const KernelTable& avx2_kernels() {
  static const KernelTable table{Isa::Avx2, &gemm_avx2, &axpy_avx2, &adam_avx2};
  return table;
}

}  // namespace k2m::simd
