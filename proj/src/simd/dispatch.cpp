#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "key2mesh/simd/kernels.hpp"

namespace k2m::simd {
namespace {

const KernelTable& detect() {
  if (const char* env = std::getenv("K2M_SIMD")) {
    const std::string want(env);
    if (want == "scalar") return scalar_kernels();
    if (want == "avx2" && cpu_supports(Isa::Avx2)) return avx2_kernels();
  }
  return cpu_supports(Isa::Avx2) ? avx2_kernels() : scalar_kernels();
}

std::atomic<const KernelTable*>& active() {
  static std::atomic<const KernelTable*> table{&detect()};
  return table;
}

}  // namespace

bool cpu_supports(Isa isa) {
  switch (isa) {
    case Isa::Scalar:
      return true;
    case Isa::Avx2:
#if defined(__x86_64__) || defined(__i386__)
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
  }
  return false;
}

const KernelTable& kernels() { return *active().load(std::memory_order_acquire); }

void force_isa(Isa isa) {
  if (!cpu_supports(isa)) {
    throw std::runtime_error("CPU does not support ISA " + std::string(isa_name(isa)));
  }
  active().store(isa == Isa::Avx2 ? &avx2_kernels() : &scalar_kernels(),
                 std::memory_order_release);
}

std::string_view isa_name(Isa isa) { return isa == Isa::Avx2 ? "avx2" : "scalar"; }

}  // namespace k2m::simd
