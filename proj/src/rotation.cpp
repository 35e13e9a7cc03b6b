#include "key2mesh/rotation.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "key2mesh/error.hpp"

namespace k2m {
namespace {

constexpr double kDegenerateNorm = 1e-8;

Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

}  // namespace

Mat3 identity3() { return {1, 0, 0, 0, 1, 0, 0, 0, 1}; }

Mat3 matmul3(const Mat3& a, const Mat3& b) {
  Mat3 c{};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      c[i * 3 + j] = a[i * 3] * b[j] + a[i * 3 + 1] * b[3 + j] + a[i * 3 + 2] * b[6 + j];
    }
  }
  return c;
}

Mat3 transpose3(const Mat3& a) { return {a[0], a[3], a[6], a[1], a[4], a[7], a[2], a[5], a[8]}; }

Vec3 apply3(const Mat3& r, const Vec3& v) {
  return {r[0] * v[0] + r[1] * v[1] + r[2] * v[2], r[3] * v[0] + r[4] * v[1] + r[5] * v[2],
          r[6] * v[0] + r[7] * v[1] + r[8] * v[2]};
}

double det3(const Mat3& a) {
  return a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6]) +
         a[2] * (a[3] * a[7] - a[4] * a[6]);
}

double orthonormality_error(const Mat3& r) {
  const Mat3 p = matmul3(r, transpose3(r));
  const Mat3 id = identity3();
  double s = 0.0;
  for (int i = 0; i < 9; ++i) s += (p[i] - id[i]) * (p[i] - id[i]);
  return std::sqrt(s);
}

Mat3 rot_x(double t) {
  const double c = std::cos(t), s = std::sin(t);
  return {1, 0, 0, 0, c, -s, 0, s, c};
}

Mat3 rot_y(double t) {
  const double c = std::cos(t), s = std::sin(t);
  return {c, 0, s, 0, 1, 0, -s, 0, c};
}

Mat3 rot_z(double t) {
  const double c = std::cos(t), s = std::sin(t);
  return {c, -s, 0, s, c, 0, 0, 0, 1};
}

Mat3 rodrigues(const Vec3& a) {
  const double theta2 = dot(a, a);
  const double theta = std::sqrt(theta2);
  // R = I + A [a]x + B [a]x^2
  double ca, cb;
  if (theta < 1e-8) {
    ca = 1.0 - theta2 / 6.0;
    cb = 0.5 - theta2 / 24.0;
  } else {
    ca = std::sin(theta) / theta;
    cb = (1.0 - std::cos(theta)) / theta2;
  }
  const Mat3 k{0, -a[2], a[1], a[2], 0, -a[0], -a[1], a[0], 0};
  const Mat3 k2 = matmul3(k, k);
  Mat3 r = identity3();
  for (int i = 0; i < 9; ++i) r[i] += ca * k[i] + cb * k2[i];
  return r;
}

Vec3 matrix_to_axis_angle(const Mat3& r) {
  // Via unit quaternion (Shepperd's method) for stability near pi.
  const double tr = r[0] + r[4] + r[8];
  double w, x, y, z;
  if (tr > 0.0) {
    const double s = std::sqrt(tr + 1.0) * 2.0;
    w = 0.25 * s;
    x = (r[7] - r[5]) / s;
    y = (r[2] - r[6]) / s;
    z = (r[3] - r[1]) / s;
  } else if (r[0] > r[4] && r[0] > r[8]) {
    const double s = std::sqrt(1.0 + r[0] - r[4] - r[8]) * 2.0;
    w = (r[7] - r[5]) / s;
    x = 0.25 * s;
    y = (r[1] + r[3]) / s;
    z = (r[2] + r[6]) / s;
  } else if (r[4] > r[8]) {
    const double s = std::sqrt(1.0 + r[4] - r[0] - r[8]) * 2.0;
    w = (r[2] - r[6]) / s;
    x = (r[1] + r[3]) / s;
    y = 0.25 * s;
    z = (r[5] + r[7]) / s;
  } else {
    const double s = std::sqrt(1.0 + r[8] - r[0] - r[4]) * 2.0;
    w = (r[3] - r[1]) / s;
    x = (r[2] + r[6]) / s;
    y = (r[5] + r[7]) / s;
    z = 0.25 * s;
  }
  if (w < 0.0) {
    w = -w;
    x = -x;
    y = -y;
    z = -z;
  }
  const double sin_half = std::sqrt(x * x + y * y + z * z);
  if (sin_half < 1e-12) return {2.0 * x, 2.0 * y, 2.0 * z};
  const double angle = 2.0 * std::atan2(sin_half, w);
  const double f = angle / sin_half;
  return {x * f, y * f, z * f};
}

Mat3 rot6d_to_matrix(std::span<const double, 6> r) {
  const Vec3 a1{r[0], r[1], r[2]};
  const Vec3 a2{r[3], r[4], r[5]};
  const double n1 = std::sqrt(dot(a1, a1));
  if (!(n1 > kDegenerateNorm)) throw Error(ErrorCode::Degenerate, "6D rotation: zero first column");
  const Vec3 b1{a1[0] / n1, a1[1] / n1, a1[2] / n1};
  const double proj = dot(b1, a2);
  const Vec3 u{a2[0] - proj * b1[0], a2[1] - proj * b1[1], a2[2] - proj * b1[2]};
  const double n2 = std::sqrt(dot(u, u));
  if (!(n2 > kDegenerateNorm)) {
    throw Error(ErrorCode::Degenerate, "6D rotation: second column parallel to first");
  }
  const Vec3 b2{u[0] / n2, u[1] / n2, u[2] / n2};
  const Vec3 b3 = cross(b1, b2);
  return {b1[0], b2[0], b3[0], b1[1], b2[1], b3[1], b1[2], b2[2], b3[2]};
}

void rot6d_to_matrix_vjp(std::span<const double, 6> r, std::span<const double, 9> dm,
                         std::span<double, 6> d_r) {
  const Vec3 a1{r[0], r[1], r[2]};
  const Vec3 a2{r[3], r[4], r[5]};
  const double n1 = std::sqrt(dot(a1, a1));
  const Vec3 b1{a1[0] / n1, a1[1] / n1, a1[2] / n1};
  const double proj = dot(b1, a2);
  const Vec3 u{a2[0] - proj * b1[0], a2[1] - proj * b1[1], a2[2] - proj * b1[2]};
  const double n2 = std::sqrt(dot(u, u));
  const Vec3 b2{u[0] / n2, u[1] / n2, u[2] / n2};

  Vec3 db1{dm[0], dm[3], dm[6]};
  Vec3 db2{dm[1], dm[4], dm[7]};
  const Vec3 db3{dm[2], dm[5], dm[8]};

  // b3 = b1 x b2
  const Vec3 t1 = cross(b2, db3);
  const Vec3 t2 = cross(db3, b1);
  for (int i = 0; i < 3; ++i) {
    db1[i] += t1[i];
    db2[i] += t2[i];
  }
  // b2 = u / |u|
  const double b2_db2 = dot(b2, db2);
  Vec3 du;
  for (int i = 0; i < 3; ++i) du[i] = (db2[i] - b2[i] * b2_db2) / n2;
  // u = a2 - (b1 . a2) b1
  const double b1_du = dot(b1, du);
  for (int i = 0; i < 3; ++i) {
    d_r[3 + i] += du[i] - b1[i] * b1_du;
    db1[i] -= proj * du[i] + b1_du * a2[i];
  }
  // b1 = a1 / |a1|
  const double b1_db1 = dot(b1, db1);
  for (int i = 0; i < 3; ++i) d_r[i] += (db1[i] - b1[i] * b1_db1) / n1;
}

Rot6 matrix_to_rot6d(const Mat3& r) {
  const double err = orthonormality_error(r);
  if (!(err <= 1e-4) || det3(r) < 0.0) {
    throw Error(ErrorCode::Validation,
                "matrix is not a rotation (orthonormality error " + std::to_string(err) + ")");
  }
  return {r[0], r[3], r[6], r[1], r[4], r[7]};
}

}  // namespace k2m
