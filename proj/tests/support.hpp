#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "key2mesh/rng.hpp"
#include "key2mesh/tensor.hpp"

namespace k2m::test {

inline constexpr double kFdStep = 1e-5;

/// |a - n| / max(|a|, |n|, floor). The floor keeps near-zero gradients from
/// turning round-off in the difference quotient into a large ratio.
inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Central difference of f with respect to *x.
inline double central_difference(double* x, const std::function<double()>& f, double h = kFdStep) {
  const double orig = *x;
  *x = orig + h;
  const double plus = f();
  *x = orig - h;
  const double minus = f();
  *x = orig;
  return (plus - minus) / (2.0 * h);
}

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.span()) v = rng.uniform(lo, hi);
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline bool bit_identical(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && a.values() == b.values();
}

}  // namespace k2m::test
