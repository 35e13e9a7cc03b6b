#pragma once
// Pose and shape errors in millimetres.

#include <vector>

#include "key2mesh/archive.hpp"
#include "key2mesh/body_model.hpp"
#include "key2mesh/rotation.hpp"
#include "key2mesh/tensor.hpp"

namespace k2m {

/// q ~ s R p + t
struct Similarity {
  double scale = 1.0;
  Mat3 rotation = identity3();
  Vec3 translation{};
};

/// Least-squares similarity from P to Q (both [k x 3]) by centring and an
/// SVD of the cross-covariance with reflection correction.
/// Throws Degenerate when k < 3 or P has zero spread.
Similarity procrustes_align(const Tensor& P, const Tensor& Q);
Tensor apply_similarity(const Tensor& P, const Similarity& sim);

/// Mean joint distance after Procrustes alignment, in mm.
double pa_mpjpe(const Tensor& pred, const Tensor& gt);
/// Mean joint distance after subtracting row `root` from each set, in mm.
double mpjpe(const Tensor& pred, const Tensor& gt, std::size_t root);
/// Same with externally supplied root positions (e.g. the posed pelvis).
double mpjpe(const Tensor& pred, const Tensor& gt, const Vec3& pred_root, const Vec3& gt_root);
/// Mean vertex distance after root-joint centring, in mm.
double pve(const Tensor& pred, const Tensor& gt, const Vec3& pred_root, const Vec3& gt_root);

struct MetricsReport {
  std::vector<double> pa_mpjpe_mm;
  std::vector<double> mpjpe_mm;
  std::vector<double> pve_mm;
  double mean_pa_mpjpe_mm = 0.0;
  double mean_mpjpe_mm = 0.0;
  double mean_pve_mm = 0.0;
  std::size_t n_frames = 0;
  std::size_t n_skipped = 0;

  void add(double pa, double mp, double pv);
  void finalize();
  Json to_json(const Json& config_echo, bool per_frame) const;
};

/// Per-frame metrics of predicted against ground-truth body parameters.
/// Rotations are [N x 9K], shapes [N x 10]. PA-MPJPE and MPJPE use the
/// regressed keypoints; MPJPE and PVE are centred on the posed root joint.
MetricsReport evaluate_bodies(const BodyModel& model, const Tensor& pred_rot, const Tensor& pred_beta,
                              const Tensor& gt_rot, const Tensor& gt_beta);

}  // namespace k2m
