#include "key2mesh/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "key2mesh/archive.hpp"
#include "key2mesh/error.hpp"

namespace k2m {
namespace {

constexpr int kMaxViewRetries = 10;

double deg2rad(double d) { return d * std::numbers::pi / 180.0; }

void check_keypoints(const Tensor& x, const char* what) {
  if (x.rank() != 2 || x.dim(1) != 2) {
    throw Error(ErrorCode::Dimension,
                std::string(what) + " expects [k x 2], got " + shape_string(x.shape()));
  }
}

void check_vis(const Tensor& x, std::span<const double> vis) {
  if (vis.size() != x.dim(0)) {
    throw Error(ErrorCode::Dimension, "visibility has " + std::to_string(vis.size()) +
                                          " entries for " + std::to_string(x.dim(0)) + " keypoints");
  }
}

PoseParams pose_at(const MocapSet& mocap, std::size_t idx) {
  if (idx >= mocap.size()) {
    throw Error(ErrorCode::Dimension, "mocap index " + std::to_string(idx) + " out of range " +
                                          std::to_string(mocap.size()));
  }
  const std::size_t n = mocap.num_joints() * 3;
  PoseParams p;
  p.theta.assign(mocap.poses.data() + idx * n, mocap.poses.data() + (idx + 1) * n);
  p.beta.assign(mocap.betas.data() + idx * kNumBetas, mocap.betas.data() + (idx + 1) * kNumBetas);
  return p;
}

struct Posed {
  PoseParams pose;
  std::vector<double> rot;
  Tensor X;      // k x 3 world
  Tensor x_px;   // k x 2 clean projection
  Vec3 root{};
};

// View augmentation + skinning + projection, redrawing the view while any
// keypoint lands behind the camera.
Posed pose_and_project(const MocapSet& mocap, std::size_t idx, const BodyModel& model,
                       const FixedCamera& cam, const AugConfig& aug, Rng& rng) {
  if (mocap.num_joints() != model.num_joints) {
    throw Error(ErrorCode::Dimension, "mocap has " + std::to_string(mocap.num_joints()) +
                                          " joints, model has " + std::to_string(model.num_joints));
  }
  const PoseParams base = pose_at(mocap, idx);
  for (int attempt = 0;; ++attempt) {
    Posed out;
    out.pose = augment_global_rotation(base, aug, rng);
    out.rot = pose_to_matrices(out.pose.theta, model.num_joints);
    const SkinResult s = skin(model, out.rot, out.pose.beta);
    out.X = regress_keypoints(s.vertices, model.keypoint_regressor);
    out.root = {s.joints(0, 0), s.joints(0, 1), s.joints(0, 2)};
    try {
      out.x_px = project(out.X, cam);
      return out;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::BehindCamera || attempt >= kMaxViewRetries) throw;
    }
  }
}

Tensor root_centered(const Tensor& X, const Vec3& root) {
  Tensor out = X;
  for (std::size_t i = 0; i < X.dim(0); ++i) {
    for (int c = 0; c < 3; ++c) out(i, c) -= root[c];
  }
  return out;
}

}  // namespace

void MocapSet::validate() const {
  if (poses.rank() != 3 || poses.dim(2) != 3 || poses.dim(0) == 0) {
    throw Error(ErrorCode::Invariant, "mocap poses must be [N x K x 3] with N >= 1, got " +
                                          shape_string(poses.shape()));
  }
  if (betas.shape() != Shape{poses.dim(0), kNumBetas}) {
    throw Error(ErrorCode::Invariant, "mocap betas must be [N x 10], got " + shape_string(betas.shape()));
  }
  if (!poses.all_finite() || !betas.all_finite()) {
    throw Error(ErrorCode::Invariant, "mocap contains non-finite values");
  }
}

void save_mocap(const MocapSet& set, const std::filesystem::path& path) {
  set.validate();
  const Json header = {{"version", 1}, {"N", set.size()}, {"K", set.num_joints()}};
  PayloadWriter w;
  w.put_f32(set.poses.span());
  w.put_f32(set.betas.span());
  write_container(path, "MCP1", header, w.bytes());
}

MocapSet load_mocap(const std::filesystem::path& path) {
  Container c = read_container(path, "MCP1");
  std::size_t N = 0, K = 0;
  try {
    if (c.header.at("version").get<int>() != 1) {
      throw Error(ErrorCode::Parse, "unsupported mocap version");
    }
    N = c.header.at("N").get<std::size_t>();
    K = c.header.at("K").get<std::size_t>();
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::Parse, std::string("mocap header: ") + e.what());
  }
  PayloadReader r(c.payload);
  MocapSet set;
  set.poses = Tensor({N, K, 3}, r.get_f32(N * K * 3));
  set.betas = Tensor({N, kNumBetas}, r.get_f32(N * kNumBetas));
  if (r.remaining() != 0) throw Error(ErrorCode::Parse, "trailing bytes after mocap payload");
  set.validate();
  return set;
}

ViewAngles sample_view(const AugConfig& aug, Rng& rng) {
  ViewAngles v;
  v.yaw = deg2rad(rng.uniform(-aug.yaw_range_deg, aug.yaw_range_deg));
  v.pitch = deg2rad(rng.uniform(-aug.pitch_range_deg, aug.pitch_range_deg));
  v.roll = deg2rad(rng.uniform(-aug.roll_range_deg, aug.roll_range_deg));
  return v;
}

PoseParams augment_global_rotation(const PoseParams& pose, const ViewAngles& view) {
  if (pose.theta.size() < 3) throw Error(ErrorCode::Dimension, "pose has no root rotation");
  const Mat3 aug = matmul3(matmul3(rot_y(view.yaw), rot_x(view.pitch)), rot_z(view.roll));
  const Mat3 root = rodrigues({pose.theta[0], pose.theta[1], pose.theta[2]});
  const Vec3 a = matrix_to_axis_angle(matmul3(aug, root));
  PoseParams out = pose;
  std::copy(a.begin(), a.end(), out.theta.begin());
  return out;
}

PoseParams augment_global_rotation(const PoseParams& pose, const AugConfig& aug, Rng& rng) {
  return augment_global_rotation(pose, sample_view(aug, rng));
}

std::vector<double> sample_visibility(std::size_t k, double p, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw Error(ErrorCode::InvalidProbability, "occlusion probability " + std::to_string(p));
  }
  std::vector<double> vis(k);
  for (double& v : vis) v = rng.uniform() < p ? 0.0 : 1.0;
  return vis;
}

Tensor occlude(const Tensor& x, std::span<const double> vis) {
  check_keypoints(x, "occlude");
  check_vis(x, vis);
  Tensor out = x;
  for (std::size_t i = 0; i < vis.size(); ++i) {
    if (vis[i] == 0.0) out(i, 0) = out(i, 1) = 0.0;
  }
  return out;
}

Tensor jitter(const Tensor& x_px, double sigma, Rng& rng) {
  if (!(sigma >= 0.0)) throw Error(ErrorCode::Validation, "jitter sigma must be >= 0");
  Tensor out = x_px;
  if (sigma == 0.0) return out;
  for (double& v : out.span()) v += rng.normal(0.0, sigma);
  return out;
}

std::pair<Tensor, NormParams> normalize_keypoints(const Tensor& x_px, std::span<const double> vis) {
  check_keypoints(x_px, "normalize_keypoints");
  check_vis(x_px, vis);
  double lo[2] = {INFINITY, INFINITY}, hi[2] = {-INFINITY, -INFINITY};
  std::size_t visible = 0;
  for (std::size_t i = 0; i < vis.size(); ++i) {
    if (vis[i] == 0.0) continue;
    ++visible;
    for (int c = 0; c < 2; ++c) {
      lo[c] = std::min(lo[c], x_px(i, c));
      hi[c] = std::max(hi[c], x_px(i, c));
    }
  }
  if (visible < 2) {
    throw Error(ErrorCode::Degenerate, "normalization needs >= 2 visible keypoints, got " +
                                           std::to_string(visible));
  }
  NormParams norm;
  norm.center_x = 0.5 * (lo[0] + hi[0]);
  norm.center_y = 0.5 * (lo[1] + hi[1]);
  norm.scale = 0.5 * std::max(hi[0] - lo[0], hi[1] - lo[1]);
  if (!(norm.scale > 0.0) || !std::isfinite(norm.scale)) {
    throw Error(ErrorCode::Degenerate, "visible keypoints span a zero-size box");
  }
  Tensor out = occlude(apply_normalization(x_px, norm), vis);
  return {std::move(out), norm};
}

Tensor apply_normalization(const Tensor& x_px, const NormParams& norm) {
  check_keypoints(x_px, "apply_normalization");
  Tensor out = x_px;
  for (std::size_t i = 0; i < x_px.dim(0); ++i) {
    out(i, 0) = (x_px(i, 0) - norm.center_x) / norm.scale;
    out(i, 1) = (x_px(i, 1) - norm.center_y) / norm.scale;
  }
  return out;
}

Tensor undo_normalization(const Tensor& x_norm, const NormParams& norm) {
  check_keypoints(x_norm, "undo_normalization");
  Tensor out = x_norm;
  for (std::size_t i = 0; i < x_norm.dim(0); ++i) {
    out(i, 0) = x_norm(i, 0) * norm.scale + norm.center_x;
    out(i, 1) = x_norm(i, 1) * norm.scale + norm.center_y;
  }
  return out;
}

TrainingPair make_pair(const MocapSet& mocap, std::size_t idx, const BodyModel& model,
                       const FixedCamera& cam, const AugConfig& aug, Rng& rng) {
  Posed p = pose_and_project(mocap, idx, model, cam, aug, rng);
  const std::size_t k = model.num_keypoints, K = model.num_joints;
  const std::vector<double> all(k, 1.0);

  TrainingPair pair;
  auto [x_clean, norm] = normalize_keypoints(p.x_px, all);
  pair.x_clean = std::move(x_clean);
  pair.norm = norm;
  const Tensor noisy = apply_normalization(jitter(p.x_px, aug.jitter_px, rng), norm);
  const std::vector<double> vis = sample_visibility(k, aug.occlusion, rng);
  pair.input = occlude(noisy, vis);
  pair.vis = Tensor({k}, vis);
  pair.theta = Tensor({K, 3}, p.pose.theta);
  pair.rot = Tensor({K, 9}, p.rot);
  pair.beta = Tensor({kNumBetas}, p.pose.beta);
  pair.X = root_centered(p.X, p.root);
  pair.root = p.root;
  return pair;
}

TrainingPair make_pair_seeded(const MocapSet& mocap, std::size_t idx, const BodyModel& model,
                              const FixedCamera& cam, const AugConfig& aug, std::uint64_t seed,
                              std::uint64_t epoch) {
  Rng rng(derive_seed(seed, epoch, idx));
  return make_pair(mocap, idx, model, cam, aug, rng);
}

DetectionSample make_detection_sample(const MocapSet& mocap, std::size_t idx,
                                      const BodyModel& model, const FixedCamera& cam,
                                      const AugConfig& aug, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x7461'7267, idx));
  Posed p = pose_and_project(mocap, idx, model, cam, aug, rng);
  const std::size_t k = model.num_keypoints;

  DetectionSample s;
  s.frame = static_cast<std::int64_t>(idx);
  const Tensor noisy = jitter(p.x_px, aug.jitter_px, rng);
  const std::vector<double> vis = sample_visibility(k, aug.occlusion, rng);
  s.keypoints_px = occlude(noisy, vis);
  s.confidence = Tensor({k});
  for (std::size_t i = 0; i < k; ++i) s.confidence[i] = vis[i] > 0 ? rng.uniform(0.3, 1.0) : 0.0;
  s.vis = Tensor({k}, vis);
  if (std::count(vis.begin(), vis.end(), 1.0) >= 2) {
    auto [x, norm] = normalize_keypoints(noisy, vis);
    s.input = std::move(x);
    s.norm = norm;
  } else {
    // Left for the frame filter to discard.
    s.input = Tensor({k, 2});
  }
  s.has_ground_truth = true;
  s.theta = Tensor({model.num_joints, 3}, p.pose.theta);
  s.beta = Tensor({kNumBetas}, p.pose.beta);
  return s;
}

namespace {

void put_norm(Batch& b, std::size_t r, const NormParams& n) {
  b.center(r, 0) = n.center_x;
  b.center(r, 1) = n.center_y;
  b.scale[r] = n.scale;
}

void copy_row(Tensor& dst, std::size_t r, const Tensor& src) {
  if (src.size() != dst.cols()) {
    throw Error(ErrorCode::Dimension, "batch row width " + std::to_string(src.size()) +
                                          " != " + std::to_string(dst.cols()));
  }
  std::copy(src.data(), src.data() + src.size(), dst.data() + r * dst.cols());
}

}  // namespace

Batch make_batch(std::span<const TrainingPair> pairs) {
  if (pairs.empty()) throw Error(ErrorCode::DegenerateBatch, "empty batch");
  const std::size_t B = pairs.size(), k = pairs[0].vis.size(), K = pairs[0].rot.dim(0);
  Batch b;
  b.size = B;
  b.input = Tensor({B, 2 * k});
  b.vis = Tensor({B, k});
  b.center = Tensor({B, 2});
  b.scale = Tensor({B});
  b.rot = Tensor({B, 9 * K});
  b.beta = Tensor({B, kNumBetas});
  b.X = Tensor({B, 3 * k});
  b.x_clean = Tensor({B, 2 * k});
  b.root = Tensor({B, 3});
  for (std::size_t r = 0; r < B; ++r) {
    const TrainingPair& p = pairs[r];
    copy_row(b.input, r, p.input);
    copy_row(b.vis, r, p.vis);
    copy_row(b.rot, r, p.rot);
    copy_row(b.beta, r, p.beta);
    copy_row(b.X, r, p.X);
    copy_row(b.x_clean, r, p.x_clean);
    for (int c = 0; c < 3; ++c) b.root(r, c) = p.root[c];
    put_norm(b, r, p.norm);
  }
  return b;
}

Batch make_batch(std::span<const DetectionSample> samples) {
  if (samples.empty()) throw Error(ErrorCode::DegenerateBatch, "empty batch");
  const std::size_t B = samples.size(), k = samples[0].vis.size();
  Batch b;
  b.size = B;
  b.input = Tensor({B, 2 * k});
  b.vis = Tensor({B, k});
  b.center = Tensor({B, 2});
  b.scale = Tensor({B});
  for (std::size_t r = 0; r < B; ++r) {
    copy_row(b.input, r, samples[r].input);
    copy_row(b.vis, r, samples[r].vis);
    put_norm(b, r, samples[r].norm);
  }
  return b;
}

}  // namespace k2m
