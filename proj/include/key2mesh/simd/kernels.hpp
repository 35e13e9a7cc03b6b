#pragma once
// Dense double-precision kernels with a scalar reference path and an
// AVX2/FMA path selected at runtime.
//
// All matrices are row-major. Every kernel in the table has identical
// semantics across ISAs; results may differ only by floating-point
// reassociation (FMA contraction and blocked accumulation order).

#include <cstddef>
#include <string_view>

namespace k2m::simd {

enum class Isa { Scalar, Avx2 };

enum class Trans { No, Yes };

/// C = alpha * op(A) * op(B) + beta * C, with op(A) M x K and op(B) K x N.
/// beta == 0 overwrites C without reading it.
using GemmFn = void (*)(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
                        double alpha, const double* a, std::size_t lda, const double* b,
                        std::size_t ldb, double beta, double* c, std::size_t ldc);

/// y += alpha * x
using AxpyFn = void (*)(std::size_t n, double alpha, const double* x, double* y);

/// Bias-corrected Adam update over n contiguous coordinates.
/// step_size = lr / (1 - beta1^t), corr2 = 1 - beta2^t.
using AdamFn = void (*)(std::size_t n, double* param, const double* grad, double* m, double* v,
                        double beta1, double beta2, double step_size, double corr2, double eps);

struct KernelTable {
  Isa isa;
  GemmFn gemm;
  AxpyFn axpy;
  AdamFn adam;
};

// Per-ISA tables. The AVX2 table must only be called when cpu_supports(Isa::Avx2).
const KernelTable& scalar_kernels();
const KernelTable& avx2_kernels();

bool cpu_supports(Isa isa);

/// Active table. Chosen once from CPU features; K2M_SIMD=scalar|avx2 overrides.
const KernelTable& kernels();

/// Switch the active table (tests, benchmarks). Throws if the CPU lacks the ISA.
void force_isa(Isa isa);

std::string_view isa_name(Isa isa);

}  // namespace k2m::simd
