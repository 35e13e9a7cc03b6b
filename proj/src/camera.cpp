#include "key2mesh/camera.hpp"

#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Dense>

namespace k2m {

void FixedCamera::validate() const {
  if (!(focal > 0.0)) throw Error(ErrorCode::Validation, "camera focal length must be > 0");
  if (!(orthonormality_error(rotation) <= 1e-9) || det3(rotation) <= 0.0) {
    throw Error(ErrorCode::Validation, "camera rotation is not a rotation matrix");
  }
}

Tensor project(const Tensor& points, const FixedCamera& cam) {
  if (points.rank() != 2 || points.dim(1) != 3) {
    throw Error(ErrorCode::Dimension, "project expects [k x 3], got " + shape_string(points.shape()));
  }
  const std::size_t k = points.dim(0);
  Tensor out({k, 2});
  std::string behind;
  for (std::size_t i = 0; i < k; ++i) {
    Vec3 p = apply3(cam.rotation, {points(i, 0), points(i, 1), points(i, 2)});
    for (int c = 0; c < 3; ++c) p[c] += cam.translation[c];
    if (!(p[2] > kMinDepth)) {
      behind += (behind.empty() ? "" : ", ") + std::to_string(i);
      continue;
    }
    out(i, 0) = cam.focal * p[0] / p[2] + cam.cx;
    out(i, 1) = cam.focal * p[1] / p[2] + cam.cy;
  }
  if (!behind.empty()) throw Error(ErrorCode::BehindCamera, "keypoints [" + behind + "]");
  return out;
}

namespace {

struct Problem {
  std::vector<Vec3> cam_points;  // R X + t_cam
  std::vector<double> u, v;      // principal-point-relative detections
  double focal;
};

// Residual for camera-space shift s; +inf if any point falls behind.
double residual(const Problem& pb, const Vec3& s) {
  double r = 0.0;
  for (std::size_t i = 0; i < pb.cam_points.size(); ++i) {
    const Vec3& p = pb.cam_points[i];
    const double z = p[2] + s[2];
    if (!(z > kMinDepth)) return std::numeric_limits<double>::infinity();
    const double du = pb.focal * (p[0] + s[0]) / z - pb.u[i];
    const double dv = pb.focal * (p[1] + s[1]) / z - pb.v[i];
    r += du * du + dv * dv;
  }
  return r;
}

}  // namespace

TranslationFit fit_translation(const Tensor& points, const Tensor& detections,
                               std::span<const double> vis, const FixedCamera& cam,
                               const TranslationFitOptions& options) {
  const std::size_t k = points.dim(0);
  if (points.shape() != Shape{k, 3} || detections.shape() != Shape{k, 2} || vis.size() != k) {
    throw Error(ErrorCode::Dimension, "fit_translation: inconsistent keypoint counts");
  }
  Problem pb;
  pb.focal = cam.focal;
  for (std::size_t i = 0; i < k; ++i) {
    if (vis[i] <= 0.0) continue;
    Vec3 p = apply3(cam.rotation, {points(i, 0), points(i, 1), points(i, 2)});
    for (int c = 0; c < 3; ++c) p[c] += cam.translation[c];
    pb.cam_points.push_back(p);
    pb.u.push_back(detections(i, 0) - cam.cx);
    pb.v.push_back(detections(i, 1) - cam.cy);
  }
  const std::size_t n = pb.cam_points.size();
  if (n < 3) {
    throw Error(ErrorCode::Underdetermined,
                "fit_translation needs >= 3 visible keypoints, got " + std::to_string(n));
  }

  // f (p_x + s_x) - u (p_z + s_z) = 0 and likewise for y: linear in s.
  Eigen::MatrixXd a(2 * n, 3);
  Eigen::VectorXd b(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3& p = pb.cam_points[i];
    a.row(2 * i) << pb.focal, 0.0, -pb.u[i];
    b(2 * i) = pb.u[i] * p[2] - pb.focal * p[0];
    a.row(2 * i + 1) << 0.0, pb.focal, -pb.v[i];
    b(2 * i + 1) = pb.v[i] * p[2] - pb.focal * p[1];
  }
  Eigen::Vector3d s0 = a.colPivHouseholderQr().solve(b);
  Vec3 s{s0(0), s0(1), s0(2)};
  double r = residual(pb, s);
  if (!std::isfinite(r)) {
    s = {0.0, 0.0, 0.0};
    r = residual(pb, s);
  }

  TranslationFit fit;
  fit.residual_history.push_back(r);
  int failures = 0;
  for (int it = 0; it < options.max_iterations; ++it) {
    fit.iterations = it + 1;
    Eigen::Matrix3d jtj = Eigen::Matrix3d::Zero();
    Eigen::Vector3d jtr = Eigen::Vector3d::Zero();
    for (std::size_t i = 0; i < n; ++i) {
      const Vec3& p = pb.cam_points[i];
      const double z = p[2] + s[2];
      const double x = p[0] + s[0], y = p[1] + s[1];
      Eigen::Vector3d ju(pb.focal / z, 0.0, -pb.focal * x / (z * z));
      Eigen::Vector3d jv(0.0, pb.focal / z, -pb.focal * y / (z * z));
      const double ru = pb.focal * x / z - pb.u[i];
      const double rv = pb.focal * y / z - pb.v[i];
      jtj += ju * ju.transpose() + jv * jv.transpose();
      jtr += ju * ru + jv * rv;
    }
    const Eigen::Vector3d step = -jtj.ldlt().solve(jtr);
    if (!step.allFinite()) break;
    const double step_norm = step.norm();
    if (step_norm < options.step_tolerance) break;

    double alpha = 1.0;
    bool accepted = false;
    for (int h = 0; h < 30; ++h, alpha *= 0.5) {
      const Vec3 trial{s[0] + alpha * step(0), s[1] + alpha * step(1), s[2] + alpha * step(2)};
      const double tr = residual(pb, trial);
      if (tr <= r) {
        s = trial;
        r = tr;
        accepted = true;
        break;
      }
    }
    if (accepted) {
      failures = 0;
      fit.residual_history.push_back(r);
      if (alpha * step_norm < options.step_tolerance) break;
    } else if (alpha * step_norm < options.step_tolerance) {
      // no decrease even below the step tolerance: stationary up to round-off
      break;
    } else if (++failures >= options.max_failed_iterations) {
      throw NonConvergenceError("residual failed to decrease for " + std::to_string(failures) +
                                    " consecutive iterations",
                                apply3(transpose3(cam.rotation), s));
    }
  }
  // camera-space shift s = R t  =>  t = R^T s
  const Vec3 t = apply3(transpose3(cam.rotation), s);
  fit.translation = t;
  fit.residual = r;
  return fit;
}

}  // namespace k2m
