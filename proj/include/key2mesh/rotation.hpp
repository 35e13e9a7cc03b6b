#pragma once
// 3x3 rotations stored row-major in std::array<double, 9>.

#include <array>
#include <span>

namespace k2m {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<double, 9>;
using Rot6 = std::array<double, 6>;

Mat3 identity3();
Mat3 matmul3(const Mat3& a, const Mat3& b);
Mat3 transpose3(const Mat3& a);
Vec3 apply3(const Mat3& r, const Vec3& v);
double det3(const Mat3& a);
/// ||R R^T - I||_F
double orthonormality_error(const Mat3& r);

Mat3 rot_x(double angle);
Mat3 rot_y(double angle);
Mat3 rot_z(double angle);

/// Axis-angle to matrix. Below 1e-8 rad a second-order series is used.
Mat3 rodrigues(const Vec3& axis_angle);
/// Inverse of rodrigues with angle in [0, pi].
Vec3 matrix_to_axis_angle(const Mat3& r);

/// Gram-Schmidt decode of two stacked columns (c1, c2) into (b1, b2, b1 x b2).
/// Throws Degenerate when c1 or the residual of c2 vanishes.
Mat3 rot6d_to_matrix(std::span<const double, 6> r);
/// Vector-Jacobian product of rot6d_to_matrix: accumulates into `d_r`.
void rot6d_to_matrix_vjp(std::span<const double, 6> r, std::span<const double, 9> d_matrix,
                         std::span<double, 6> d_r);
/// First two columns. Throws Validation unless R is orthonormal within 1e-4.
Rot6 matrix_to_rot6d(const Mat3& r);

}  // namespace k2m
