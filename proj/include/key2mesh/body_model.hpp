#pragma once
// Parametric body: shape/pose blendshapes, kinematic chain, linear blend
// skinning and the linear keypoint regressor X = W M.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "key2mesh/rotation.hpp"
#include "key2mesh/tensor.hpp"

namespace k2m {

inline constexpr std::size_t kNumBetas = 10;

/// Immutable after construction; all lengths in meters.
struct BodyModel {
  std::size_t num_vertices = 0;   // V
  std::size_t num_joints = 0;     // K
  std::size_t num_keypoints = 0;  // k
  Tensor template_vertices;       // V x 3
  Tensor shape_dirs;              // V x 3 x 10
  Tensor pose_dirs;               // V x 3 x 9(K-1), empty when absent
  Tensor joint_regressor;         // K x V
  Tensor skin_weights;            // V x K
  std::vector<int> parents;       // K, parents[0] == -1, parents[j] < j
  Tensor keypoint_regressor;      // k x V

  bool has_pose_dirs() const { return !pose_dirs.empty(); }
  /// Throws Invariant naming the first violated row or field.
  void validate() const;
};

/// Output of skin() plus intermediates reused by skin_vjp().
struct SkinResult {
  Tensor vertices;     // V x 3 posed mesh
  Tensor joints;       // K x 3 posed joints
  Tensor shaped;       // V x 3 template after shape and pose blendshapes
  Tensor rest_joints;  // K x 3
  Tensor world_rot;    // K x 9
  Tensor world_trans;  // K x 3
};

/// Forward kinematics and LBS. `rot` holds K row-major 3x3 matrices.
/// Throws Validation if any ||R R^T - I||_F exceeds 1e-3.
SkinResult skin(const BodyModel& model, std::span<const double> rot, std::span<const double> beta);

/// Reverse-mode product through skin(): accumulates into d_rot (K*9) and
/// d_beta (10). Either cotangent may be empty.
void skin_vjp(const BodyModel& model, std::span<const double> rot, const SkinResult& fwd,
              std::span<const double> d_vertices, std::span<const double> d_joints,
              std::span<double> d_rot, std::span<double> d_beta);

/// X = W M with M: V x 3, W: k x V.
Tensor regress_keypoints(const Tensor& vertices, const Tensor& regressor);

/// Rest position of joint 0 for shape beta; a global rotation pivots here.
Vec3 rest_root(const BodyModel& model, std::span<const double> beta);

/// Axis-angle pose [K x 3] to stacked rotation matrices [K x 9].
std::vector<double> pose_to_matrices(std::span<const double> axis_angle, std::size_t num_joints);

/// Deterministic miniature human-like model. Values are rounded to float32
/// so that a save/load round trip is exact.
BodyModel make_toy_model(std::uint64_t seed, std::size_t num_vertices = 64,
                         std::size_t num_joints = 16, std::size_t num_keypoints = 12);

/// Joint index driving each keypoint of make_toy_model().
std::vector<std::size_t> toy_keypoint_joints(std::size_t num_joints, std::size_t num_keypoints);

void save_model(const BodyModel& model, const std::filesystem::path& path);
BodyModel load_model(const std::filesystem::path& path);

}  // namespace k2m
