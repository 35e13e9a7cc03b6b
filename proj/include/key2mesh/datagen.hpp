#pragma once
// Synthesis of (augmented 2D keypoints -> body parameters) training pairs
// from unpaired motion-capture poses, and the keypoint normalisation shared
// with detection ingestion.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "key2mesh/body_model.hpp"
#include "key2mesh/camera.hpp"
#include "key2mesh/rng.hpp"
#include "key2mesh/tensor.hpp"

namespace k2m {

/// Unpaired poses: axis-angle [N x K x 3] and shapes [N x 10].
struct MocapSet {
  Tensor poses;
  Tensor betas;

  std::size_t size() const { return poses.empty() ? 0 : poses.dim(0); }
  std::size_t num_joints() const { return poses.empty() ? 0 : poses.dim(1); }
  void validate() const;
};

void save_mocap(const MocapSet& set, const std::filesystem::path& path);
MocapSet load_mocap(const std::filesystem::path& path);

struct AugConfig {
  double yaw_range_deg = 180.0;   // yaw ~ U(-r, r)
  double pitch_range_deg = 20.0;
  double roll_range_deg = 20.0;
  double occlusion = 0.2;         // per-keypoint drop probability
  double jitter_px = 1.0;         // Gaussian sigma in pixels
};

/// Angles in radians.
struct ViewAngles {
  double yaw = 0.0;
  double pitch = 0.0;
  double roll = 0.0;
};

struct NormParams {
  double center_x = 0.0;
  double center_y = 0.0;
  double scale = 1.0;
};

/// Axis-angle pose [K x 3] plus shape [10].
struct PoseParams {
  std::vector<double> theta;
  std::vector<double> beta;
};

ViewAngles sample_view(const AugConfig& aug, Rng& rng);

/// Root rotation pre-multiplied by R_yaw(y) R_pitch(x) R_roll(z); other joints untouched.
PoseParams augment_global_rotation(const PoseParams& pose, const ViewAngles& view);
PoseParams augment_global_rotation(const PoseParams& pose, const AugConfig& aug, Rng& rng);

/// Independent Bernoulli keep mask with drop probability p (1 = visible).
std::vector<double> sample_visibility(std::size_t k, double p, Rng& rng);

/// Zeroes the coordinates of invisible keypoints.
Tensor occlude(const Tensor& x, std::span<const double> vis);

/// Adds i.i.d. N(0, sigma^2) pixel noise to every coordinate.
Tensor jitter(const Tensor& x_px, double sigma, Rng& rng);

/// Bounding-box normalisation over visible keypoints: centre at the box
/// midpoint, scale = max(width, height) / 2. Invisible entries become 0.
/// Throws Degenerate with fewer than 2 visible keypoints or a zero-size box.
std::pair<Tensor, NormParams> normalize_keypoints(const Tensor& x_px, std::span<const double> vis);

/// (x - centre) / scale for every entry.
Tensor apply_normalization(const Tensor& x_px, const NormParams& norm);
Tensor undo_normalization(const Tensor& x_norm, const NormParams& norm);

struct TrainingPair {
  Tensor input;    // k x 2 normalised, occluded entries exactly 0
  Tensor vis;      // k
  Tensor theta;    // K x 3 after view augmentation
  Tensor rot;      // K x 9 rotation matrices of theta
  Tensor beta;     // 10
  Tensor X;        // k x 3 keypoints, root-centred
  Tensor x_clean;  // k x 2 normalised projection before jitter
  NormParams norm;
  Vec3 root{};     // world position of the root joint
};

/// Full synthesis pipeline for mocap sample `idx`:
/// view augmentation -> skin -> regress -> project -> jitter -> normalise -> occlude.
/// A behind-camera projection triggers up to 10 fresh view draws.
TrainingPair make_pair(const MocapSet& mocap, std::size_t idx, const BodyModel& model,
                       const FixedCamera& cam, const AugConfig& aug, Rng& rng);

/// Deterministic pair for (seed, epoch, idx), independent of generation order.
TrainingPair make_pair_seeded(const MocapSet& mocap, std::size_t idx, const BodyModel& model,
                              const FixedCamera& cam, const AugConfig& aug, std::uint64_t seed,
                              std::uint64_t epoch);

/// Detection-style sample: pixel keypoints with confidences, normalised from
/// the visible keypoints alone. Ground truth kept for evaluation only.
struct DetectionSample {
  std::int64_t frame = 0;
  Tensor keypoints_px;  // k x 2, 0 where undetected
  Tensor confidence;    // k
  Tensor input;         // k x 2 normalised
  Tensor vis;           // k
  NormParams norm;
  bool has_ground_truth = false;
  Tensor theta;  // K x 3
  Tensor beta;   // 10
};

/// Target-domain frame from the synthesis pipeline: view augmentation,
/// jitter and occlusion as configured, normalisation from visible keypoints.
DetectionSample make_detection_sample(const MocapSet& mocap, std::size_t idx,
                                      const BodyModel& model, const FixedCamera& cam,
                                      const AugConfig& aug, std::uint64_t seed);

/// Row-stacked mini-batch of pairs or detection samples.
struct Batch {
  std::size_t size = 0;
  Tensor input;        // B x 2k
  Tensor vis;          // B x k
  Tensor center;       // B x 2
  Tensor scale;        // B
  // Supervision (pairs only)
  Tensor rot;          // B x 9K
  Tensor beta;         // B x 10
  Tensor X;            // B x 3k root-centred
  Tensor x_clean;      // B x 2k
  Tensor root;         // B x 3
};

Batch make_batch(std::span<const TrainingPair> pairs);
Batch make_batch(std::span<const DetectionSample> samples);

}  // namespace k2m
