#pragma once

#include <span>
#include <vector>

#include "key2mesh/error.hpp"
#include "key2mesh/rotation.hpp"
#include "key2mesh/tensor.hpp"

namespace k2m {

/// Pinhole camera fixed for synthesis and reprojection.
struct FixedCamera {
  double focal = 1000.0;  // pixels
  double cx = 0.0;
  double cy = 0.0;
  Mat3 rotation = identity3();
  Vec3 translation{0.0, 0.0, 5.0};  // meters

  /// Throws Validation unless focal > 0 and rotation is orthonormal.
  void validate() const;
};

inline constexpr double kMinDepth = 1e-6;

/// Pinhole projection of [k x 3] world points to [k x 2] pixels.
/// Throws BehindCamera listing every keypoint with depth <= 1e-6.
Tensor project(const Tensor& points, const FixedCamera& cam);

struct TranslationFitOptions {
  int max_iterations = 20;
  double step_tolerance = 1e-8;
  int max_failed_iterations = 5;
};

struct TranslationFit {
  Vec3 translation{};
  int iterations = 0;
  double residual = 0.0;  // sum of squared pixel residuals over visible points
  std::vector<double> residual_history;  // residual after each accepted step, starting at init
};

/// Raised when the residual fails to decrease for too many consecutive iterations.
class NonConvergenceError : public Error {
 public:
  NonConvergenceError(const std::string& what, Vec3 last)
      : Error(ErrorCode::NonConvergence, what), last_iterate(last) {}
  Vec3 last_iterate;
};

/// World translation t minimising sum_vis ||project(X + t) - x_det||^2.
/// Closed-form linear initialisation, then Gauss-Newton with step halving.
TranslationFit fit_translation(const Tensor& points, const Tensor& detections,
                               std::span<const double> vis, const FixedCamera& cam,
                               const TranslationFitOptions& options = {});

}  // namespace k2m
