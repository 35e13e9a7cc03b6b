#pragma once
// Graph ops wrapping the body model and the fixed camera for batched rows.

#include "key2mesh/body_model.hpp"
#include "key2mesh/camera.hpp"
#include "key2mesh/graph.hpp"

namespace k2m::ops {

/// [B x 6K] stacked 6D rotations -> [B x 9K] row-major matrices.
/// Throws Degenerate naming the row and joint.
Var decode_rot6d(Var r6);

/// Keypoints X = W M(rot, beta) per row: [B x 9K], [B x 10] -> [B x 3k].
/// With `root_centered` the posed root joint is subtracted.
Var body_keypoints(const BodyModel& model, Var rot, Var beta, bool root_centered);

/// Pinhole projection of X + offset followed by (x - center) / scale.
/// X: [B x 3k], offset: [B x 3], center: [B x 2], scale: [B] -> [B x 2k].
/// With min_depth <= 0, throws BehindCamera when any depth is <= 1e-6.
/// Otherwise depths are floored at min_depth (no gradient through the floor),
/// which keeps training losses finite for implausible predictions.
Var project_normalized(const FixedCamera& cam, Var X, const Tensor& offset, const Tensor& center,
                       const Tensor& scale, double min_depth = 0.0);

/// Depth floor used by the training losses, in meters.
inline constexpr double kLossMinDepth = 0.5;

}  // namespace k2m::ops
