#include <doctest.h>

#include <cmath>
#include <numbers>

#include "key2mesh/error.hpp"
#include "key2mesh/rotation.hpp"
#include "support.hpp"

using namespace k2m;
using k2m::test::rel_error;

namespace {

constexpr double kPi = std::numbers::pi;

Mat3 quaternion_matrix(const Vec3& a) {
  const double th = std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
  const double s = std::sin(th / 2.0) / th;
  const double w = std::cos(th / 2.0), x = a[0] * s, y = a[1] * s, z = a[2] * s;
  return {1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),
          2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
          2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y)};
}

double max_diff(const Mat3& a, const Mat3& b) {
  double m = 0.0;
  for (int i = 0; i < 9; ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Vec3 random_axis_angle(Rng& rng, double max_angle = kPi) {
  Vec3 a{rng.normal(), rng.normal(), rng.normal()};
  const double n = std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
  const double th = rng.uniform(0.0, max_angle);
  for (double& x : a) x *= th / n;
  return a;
}

}  // namespace

TEST_CASE("rodrigues examples") {
  CHECK(rodrigues({0, 0, 0}) == identity3());
  const Vec3 x = apply3(rodrigues({0, 0, kPi / 2}), {1, 0, 0});
  CHECK(std::abs(x[0]) <= 1e-12);
  CHECK(std::abs(x[1] - 1.0) <= 1e-12);
  CHECK(std::abs(x[2]) <= 1e-12);
}

TEST_CASE("rodrigues matches the quaternion oracle and is a proper rotation") {
  Rng rng(41);
  for (int i = 0; i < 1000; ++i) {
    const Vec3 a = random_axis_angle(rng);
    const Mat3 r = rodrigues(a);
    CHECK(orthonormality_error(r) <= 1e-10);
    CHECK(std::abs(det3(r) - 1.0) <= 1e-10);
    CHECK(max_diff(r, quaternion_matrix(a)) <= 1e-10);
  }
}

TEST_CASE("rodrigues near zero angle uses the series without division by zero") {
  const Vec3 a{1e-10, -2e-10, 3e-10};
  const Mat3 r = rodrigues(a);
  CHECK(orthonormality_error(r) <= 1e-12);
  CHECK(r[7] == doctest::Approx(1e-10).epsilon(1e-6));
  CHECK(r[5] == doctest::Approx(-1e-10).epsilon(1e-6));
}

TEST_CASE("axis-angle round trip") {
  Rng rng(42);
  for (int i = 0; i < 200; ++i) {
    const Vec3 a = random_axis_angle(rng, 3.0);
    const Vec3 b = matrix_to_axis_angle(rodrigues(a));
    for (int c = 0; c < 3; ++c) CHECK(std::abs(a[c] - b[c]) <= 1e-9);
  }
}

TEST_CASE("6D decode examples") {
  const Rot6 id{1, 0, 0, 0, 1, 0};
  CHECK(max_diff(rot6d_to_matrix(id), identity3()) == 0.0);
  CHECK(matrix_to_rot6d(identity3()) == id);
  const Rot6 z = matrix_to_rot6d(rot_z(kPi / 2));
  const Rot6 want{0, 1, 0, -1, 0, 0};
  for (int i = 0; i < 6; ++i) CHECK(std::abs(z[i] - want[i]) <= 1e-15);
}

TEST_CASE("6D round trip and Gram-Schmidt scale/shear invariance") {
  Rng rng(43);
  for (int i = 0; i < 200; ++i) {
    const Mat3 r = rodrigues(random_axis_angle(rng));
    const Rot6 six = matrix_to_rot6d(r);
    CHECK(max_diff(rot6d_to_matrix(six), r) <= 1e-10);
    // columns (2 c1, c2 + 0.3 c1)
    const Rot6 sheared{2 * six[0], 2 * six[1], 2 * six[2],
                       six[3] + 0.3 * six[0], six[4] + 0.3 * six[1], six[5] + 0.3 * six[2]};
    const Mat3 back = rot6d_to_matrix(sheared);
    CHECK(max_diff(back, r) <= 1e-10);
    CHECK(orthonormality_error(back) <= 1e-9);
    CHECK(std::abs(det3(back) - 1.0) <= 1e-9);
  }
}

TEST_CASE("6D decode of arbitrary inputs gives proper rotations") {
  Rng rng(44);
  for (int i = 0; i < 1000; ++i) {
    Rot6 r;
    for (double& x : r) x = rng.normal();
    const Mat3 m = rot6d_to_matrix(r);
    CHECK(orthonormality_error(m) <= 1e-9);
    CHECK(std::abs(det3(m) - 1.0) <= 1e-9);
  }
}

TEST_CASE("degenerate 6D inputs and non-rotations are rejected") {
  auto code = [](auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      return e.code();
    }
    FAIL("expected an error");
    return ErrorCode::Contract;
  };
  CHECK(code([] { rot6d_to_matrix(Rot6{0, 0, 0, 0, 1, 0}); }) == ErrorCode::Degenerate);
  CHECK(code([] { rot6d_to_matrix(Rot6{1, 2, 3, 2, 4, 6}); }) == ErrorCode::Degenerate);
  Mat3 bad = identity3();
  bad[0] = 1.01;
  CHECK(code([&] { matrix_to_rot6d(bad); }) == ErrorCode::Validation);
}

TEST_CASE("6D decode vector-Jacobian product matches finite differences") {
  Rng rng(45);
  for (int trial = 0; trial < 20; ++trial) {
    Rot6 r;
    for (double& x : r) x = rng.normal();
    std::array<double, 9> w;
    for (double& x : w) x = rng.uniform(-1.0, 1.0);
    std::array<double, 6> d{};
    rot6d_to_matrix_vjp(r, w, d);
    for (int i = 0; i < 6; ++i) {
      const double num = k2m::test::central_difference(&r[i], [&] {
        const Mat3 m = rot6d_to_matrix(r);
        double s = 0.0;
        for (int j = 0; j < 9; ++j) s += w[j] * m[j];
        return s;
      });
      CHECK(rel_error(d[i], num) <= 1e-6);
    }
  }
}
