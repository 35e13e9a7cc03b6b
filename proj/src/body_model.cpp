#include "key2mesh/body_model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "key2mesh/archive.hpp"
#include "key2mesh/error.hpp"
#include "key2mesh/rng.hpp"

namespace k2m {
namespace {

constexpr double kRowSumTol = 1e-6;

void check_row_sums(const Tensor& t, std::size_t rows, std::size_t cols, const char* what) {
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = t[r * cols + c];
      if (!std::isfinite(v)) {
        throw Error(ErrorCode::Invariant, std::string(what) + " row " + std::to_string(r) +
                                              " has a non-finite entry");
      }
      s += v;
    }
    if (std::abs(s - 1.0) > kRowSumTol) {
      throw Error(ErrorCode::Invariant, std::string(what) + " row " + std::to_string(r) +
                                            " sums to " + std::to_string(s));
    }
  }
}

void expect_shape(const Tensor& t, const Shape& shape, const char* what) {
  if (t.shape() != shape) {
    throw Error(ErrorCode::Invariant, std::string(what) + " has shape " + shape_string(t.shape()) +
                                          ", expected " + shape_string(shape));
  }
}

Mat3 mat_at(std::span<const double> stacked, std::size_t j) {
  Mat3 m;
  std::copy_n(stacked.begin() + static_cast<std::ptrdiff_t>(9 * j), 9, m.begin());
  return m;
}

void round_tensor(Tensor& t) {
  for (double& v : t.span()) v = round_f32(v);
}

// Rest skeleton of the 16-joint toy body (y up, meters).
struct ToyJoint {
  int parent;
  Vec3 pos;
  double radius;
};

const std::vector<ToyJoint>& toy_skeleton() {
  static const std::vector<ToyJoint> joints = {
      {-1, {0.0, 0.0, 0.0}, 0.13},       // 0 pelvis
      {0, {0.0, 0.25, 0.0}, 0.12},       // 1 spine
      {1, {0.0, 0.50, 0.0}, 0.13},       // 2 chest
      {2, {0.0, 0.78, 0.0}, 0.09},       // 3 head
      {2, {0.18, 0.46, 0.0}, 0.06},      // 4 left shoulder
      {4, {0.45, 0.46, 0.0}, 0.045},     // 5 left elbow
      {5, {0.70, 0.46, 0.0}, 0.035},     // 6 left wrist
      {2, {-0.18, 0.46, 0.0}, 0.06},     // 7 right shoulder
      {7, {-0.45, 0.46, 0.0}, 0.045},    // 8 right elbow
      {8, {-0.70, 0.46, 0.0}, 0.035},    // 9 right wrist
      {0, {0.10, -0.06, 0.0}, 0.08},     // 10 left hip
      {10, {0.10, -0.50, 0.0}, 0.06},    // 11 left knee
      {11, {0.10, -0.92, 0.0}, 0.045},   // 12 left ankle
      {0, {-0.10, -0.06, 0.0}, 0.08},    // 13 right hip
      {13, {-0.10, -0.50, 0.0}, 0.06},   // 14 right knee
      {14, {-0.10, -0.92, 0.0}, 0.045},  // 15 right ankle
  };
  return joints;
}

std::vector<ToyJoint> toy_joints(std::size_t num_joints) {
  const auto& base = toy_skeleton();
  std::vector<ToyJoint> out(base.begin(), base.begin() + std::min(num_joints, base.size()));
  // Extra joints extend the extremities.
  static const int tips[] = {6, 9, 12, 15, 3};
  std::size_t t = 0;
  while (out.size() < num_joints) {
    const int tip = tips[t % 5];
    int last = tip;
    for (std::size_t j = 0; j < out.size(); ++j) {
      if (out[j].parent == last) last = static_cast<int>(j);
    }
    const ToyJoint& end = out[static_cast<std::size_t>(last)];
    const ToyJoint& prev = out[static_cast<std::size_t>(std::max(end.parent, 0))];
    Vec3 dir{end.pos[0] - prev.pos[0], end.pos[1] - prev.pos[1], end.pos[2] - prev.pos[2]};
    const double n = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
    for (double& d : dir) d = n > 0 ? d / n : 0.0;
    out.push_back({last, {end.pos[0] + 0.08 * dir[0], end.pos[1] + 0.08 * dir[1],
                          end.pos[2] + 0.08 * dir[2]}, 0.03});
    ++t;
  }
  return out;
}

}  // namespace

void BodyModel::validate() const {
  const std::size_t V = num_vertices, K = num_joints, k = num_keypoints;
  if (V == 0 || K == 0 || k == 0) throw Error(ErrorCode::Invariant, "model dimensions must be > 0");
  if (K > V || k > V) throw Error(ErrorCode::Invariant, "model needs K <= V and k <= V");
  expect_shape(template_vertices, {V, 3}, "template");
  expect_shape(shape_dirs, {V, 3, kNumBetas}, "shape_dirs");
  if (has_pose_dirs()) expect_shape(pose_dirs, {V, 3, 9 * (K - 1)}, "pose_dirs");
  expect_shape(joint_regressor, {K, V}, "joint_regressor");
  expect_shape(skin_weights, {V, K}, "skin_weights");
  expect_shape(keypoint_regressor, {k, V}, "keypoint_regressor");
  if (parents.size() != K || parents[0] != -1) {
    throw Error(ErrorCode::Invariant, "parents must have K entries with parents[0] == -1");
  }
  for (std::size_t j = 1; j < K; ++j) {
    if (parents[j] < 0 || static_cast<std::size_t>(parents[j]) >= j) {
      throw Error(ErrorCode::Invariant, "parents[" + std::to_string(j) + "] = " +
                                            std::to_string(parents[j]) +
                                            " does not precede its child");
    }
  }
  if (!template_vertices.all_finite() || !shape_dirs.all_finite() || !pose_dirs.all_finite()) {
    throw Error(ErrorCode::Invariant, "non-finite template or blendshape entry");
  }
  for (double w : skin_weights.span()) {
    if (w < 0.0) throw Error(ErrorCode::Invariant, "negative skin weight");
  }
  check_row_sums(skin_weights, V, K, "skin_weights");
  check_row_sums(joint_regressor, K, V, "joint_regressor");
  check_row_sums(keypoint_regressor, k, V, "keypoint_regressor");
}

SkinResult skin(const BodyModel& model, std::span<const double> rot, std::span<const double> beta) {
  const std::size_t V = model.num_vertices, K = model.num_joints;
  if (rot.size() != 9 * K || beta.size() != kNumBetas) {
    throw Error(ErrorCode::Dimension, "skin expects " + std::to_string(9 * K) + " rotation and " +
                                          std::to_string(kNumBetas) + " shape values");
  }
  for (std::size_t j = 0; j < K; ++j) {
    const double err = orthonormality_error(mat_at(rot, j));
    if (!(err <= 1e-3)) {
      throw Error(ErrorCode::Validation, "joint " + std::to_string(j) +
                                             " rotation deviates from orthonormal by " +
                                             std::to_string(err));
    }
  }

  SkinResult r;
  r.shaped = model.template_vertices;
  const double* sd = model.shape_dirs.data();
  for (std::size_t i = 0; i < 3 * V; ++i) {
    double s = 0.0;
    for (std::size_t b = 0; b < kNumBetas; ++b) s += sd[i * kNumBetas + b] * beta[b];
    r.shaped[i] += s;
  }

  r.rest_joints = Tensor({K, 3});
  for (std::size_t j = 0; j < K; ++j) {
    for (std::size_t v = 0; v < V; ++v) {
      const double w = model.joint_regressor(j, v);
      if (w == 0.0) continue;
      for (int c = 0; c < 3; ++c) r.rest_joints(j, c) += w * r.shaped(v, c);
    }
  }

  if (model.has_pose_dirs()) {
    const std::size_t F = 9 * (K - 1);
    std::vector<double> feat(F);
    for (std::size_t j = 1; j < K; ++j) {
      for (int e = 0; e < 9; ++e) feat[(j - 1) * 9 + e] = rot[9 * j + e] - (e % 4 == 0 ? 1.0 : 0.0);
    }
    const double* pd = model.pose_dirs.data();
    for (std::size_t i = 0; i < 3 * V; ++i) {
      double s = 0.0;
      for (std::size_t f = 0; f < F; ++f) s += pd[i * F + f] * feat[f];
      r.shaped[i] += s;
    }
  }

  r.world_rot = Tensor({K, 9});
  r.world_trans = Tensor({K, 3});
  for (std::size_t j = 0; j < K; ++j) {
    const Mat3 local = mat_at(rot, j);
    const Vec3 rj{r.rest_joints(j, 0), r.rest_joints(j, 1), r.rest_joints(j, 2)};
    Mat3 world;
    Vec3 t;
    if (j == 0) {
      world = local;
      t = rj;
    } else {
      const auto p = static_cast<std::size_t>(model.parents[j]);
      const Mat3 pw = mat_at(r.world_rot.span(), p);
      world = matmul3(pw, local);
      const Vec3 e{rj[0] - r.rest_joints(p, 0), rj[1] - r.rest_joints(p, 1),
                   rj[2] - r.rest_joints(p, 2)};
      const Vec3 pe = apply3(pw, e);
      for (int c = 0; c < 3; ++c) t[c] = pe[c] + r.world_trans(p, c);
    }
    std::copy(world.begin(), world.end(), r.world_rot.data() + 9 * j);
    for (int c = 0; c < 3; ++c) r.world_trans(j, c) = t[c];
  }
  r.joints = r.world_trans;

  // v_i = sum_j w_ij (B_j x_i + c_j), c_j = t_j - B_j J_j
  std::vector<double> offsets(3 * K);
  for (std::size_t j = 0; j < K; ++j) {
    const Mat3 b = mat_at(r.world_rot.span(), j);
    const Vec3 bj = apply3(b, {r.rest_joints(j, 0), r.rest_joints(j, 1), r.rest_joints(j, 2)});
    for (int c = 0; c < 3; ++c) offsets[3 * j + c] = r.world_trans(j, c) - bj[c];
  }
  r.vertices = Tensor({V, 3});
  for (std::size_t v = 0; v < V; ++v) {
    Mat3 blend{};
    Vec3 off{};
    for (std::size_t j = 0; j < K; ++j) {
      const double w = model.skin_weights(v, j);
      if (w == 0.0) continue;
      const double* b = r.world_rot.data() + 9 * j;
      for (int e = 0; e < 9; ++e) blend[e] += w * b[e];
      for (int c = 0; c < 3; ++c) off[c] += w * offsets[3 * j + c];
    }
    const Vec3 x = apply3(blend, {r.shaped(v, 0), r.shaped(v, 1), r.shaped(v, 2)});
    for (int c = 0; c < 3; ++c) r.vertices(v, c) = x[c] + off[c];
  }
  return r;
}

void skin_vjp(const BodyModel& model, std::span<const double> rot, const SkinResult& fwd,
              std::span<const double> d_vertices, std::span<const double> d_joints,
              std::span<double> d_rot, std::span<double> d_beta) {
  const std::size_t V = model.num_vertices, K = model.num_joints;
  std::vector<double> d_world(9 * K, 0.0);  // dB_j
  std::vector<double> d_trans(3 * K, 0.0);  // dt_j
  std::vector<double> d_rest(3 * K, 0.0);   // dJ_j
  std::vector<double> d_shaped(3 * V, 0.0);  // dT''

  if (!d_vertices.empty()) {
    std::vector<double> d_off(3 * K, 0.0);  // dc_j
    for (std::size_t v = 0; v < V; ++v) {
      const double* dv = d_vertices.data() + 3 * v;
      const double* x = fwd.shaped.data() + 3 * v;
      for (std::size_t j = 0; j < K; ++j) {
        const double w = model.skin_weights(v, j);
        if (w == 0.0) continue;
        const double* b = fwd.world_rot.data() + 9 * j;
        for (int r = 0; r < 3; ++r) {
          const double wd = w * dv[r];
          for (int c = 0; c < 3; ++c) {
            d_world[9 * j + 3 * r + c] += wd * x[c];
            d_shaped[3 * v + c] += wd * b[3 * r + c];
          }
          d_off[3 * j + r] += wd;
        }
      }
    }
    for (std::size_t j = 0; j < K; ++j) {
      const double* b = fwd.world_rot.data() + 9 * j;
      const double* jr = fwd.rest_joints.data() + 3 * j;
      for (int r = 0; r < 3; ++r) {
        const double dc = d_off[3 * j + r];
        d_trans[3 * j + r] += dc;
        for (int c = 0; c < 3; ++c) {
          d_world[9 * j + 3 * r + c] -= dc * jr[c];
          d_rest[3 * j + c] -= b[3 * r + c] * dc;
        }
      }
    }
  }
  if (!d_joints.empty()) {
    for (std::size_t i = 0; i < 3 * K; ++i) d_trans[i] += d_joints[i];
  }

  for (std::size_t j = K; j-- > 1;) {
    const auto p = static_cast<std::size_t>(model.parents[j]);
    const Mat3 pw = mat_at(fwd.world_rot.span(), p);
    const Mat3 local = mat_at(rot, j);
    const double* db = d_world.data() + 9 * j;
    // B_j = P R_j
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) {
        double to_parent = 0.0, to_local = 0.0;
        for (int m = 0; m < 3; ++m) {
          to_parent += db[3 * r + m] * local[3 * c + m];
          to_local += pw[3 * m + r] * db[3 * m + c];
        }
        d_world[9 * p + 3 * r + c] += to_parent;
        d_rot[9 * j + 3 * r + c] += to_local;
      }
    }
    // t_j = P (J_j - J_p) + t_p
    const double* dt = d_trans.data() + 3 * j;
    Vec3 e;
    for (int c = 0; c < 3; ++c) e[c] = fwd.rest_joints(j, c) - fwd.rest_joints(p, c);
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) d_world[9 * p + 3 * r + c] += dt[r] * e[c];
    }
    for (int c = 0; c < 3; ++c) {
      double de = 0.0;
      for (int r = 0; r < 3; ++r) de += pw[3 * r + c] * dt[r];
      d_rest[3 * j + c] += de;
      d_rest[3 * p + c] -= de;
      d_trans[3 * p + c] += dt[c];
    }
  }
  for (int e = 0; e < 9; ++e) d_rot[e] += d_world[e];
  for (int c = 0; c < 3; ++c) d_rest[c] += d_trans[c];

  if (model.has_pose_dirs()) {
    const std::size_t F = 9 * (K - 1);
    const double* pd = model.pose_dirs.data();
    for (std::size_t i = 0; i < 3 * V; ++i) {
      const double g = d_shaped[i];
      if (g == 0.0) continue;
      for (std::size_t f = 0; f < F; ++f) d_rot[9 + f] += pd[i * F + f] * g;
    }
  }
  // rest joints regress from the shape-only template
  for (std::size_t j = 0; j < K; ++j) {
    for (std::size_t v = 0; v < V; ++v) {
      const double w = model.joint_regressor(j, v);
      if (w == 0.0) continue;
      for (int c = 0; c < 3; ++c) d_shaped[3 * v + c] += w * d_rest[3 * j + c];
    }
  }
  const double* sd = model.shape_dirs.data();
  for (std::size_t i = 0; i < 3 * V; ++i) {
    const double g = d_shaped[i];
    if (g == 0.0) continue;
    for (std::size_t b = 0; b < kNumBetas; ++b) d_beta[b] += sd[i * kNumBetas + b] * g;
  }
}

Tensor regress_keypoints(const Tensor& vertices, const Tensor& regressor) {
  if (vertices.rank() != 2 || vertices.dim(1) != 3 || regressor.rank() != 2 ||
      regressor.dim(1) != vertices.dim(0)) {
    throw Error(ErrorCode::Dimension, "regress_keypoints: W " + shape_string(regressor.shape()) +
                                          " vs M " + shape_string(vertices.shape()));
  }
  const std::size_t k = regressor.dim(0), V = vertices.dim(0);
  Tensor x({k, 3});
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t v = 0; v < V; ++v) {
      const double w = regressor(i, v);
      if (w == 0.0) continue;
      for (int c = 0; c < 3; ++c) x(i, c) += w * vertices(v, c);
    }
  }
  return x;
}

Vec3 rest_root(const BodyModel& model, std::span<const double> beta) {
  Vec3 root{};
  const double* sd = model.shape_dirs.data();
  for (std::size_t v = 0; v < model.num_vertices; ++v) {
    const double w = model.joint_regressor(0, v);
    if (w == 0.0) continue;
    for (int c = 0; c < 3; ++c) {
      double p = model.template_vertices(v, c);
      for (std::size_t b = 0; b < kNumBetas; ++b) p += sd[(3 * v + c) * kNumBetas + b] * beta[b];
      root[c] += w * p;
    }
  }
  return root;
}

std::vector<double> pose_to_matrices(std::span<const double> axis_angle, std::size_t num_joints) {
  if (axis_angle.size() != 3 * num_joints) {
    throw Error(ErrorCode::Dimension, "pose has " + std::to_string(axis_angle.size()) +
                                          " values, expected " + std::to_string(3 * num_joints));
  }
  std::vector<double> out(9 * num_joints);
  for (std::size_t j = 0; j < num_joints; ++j) {
    const Mat3 r = rodrigues({axis_angle[3 * j], axis_angle[3 * j + 1], axis_angle[3 * j + 2]});
    std::copy(r.begin(), r.end(), out.begin() + static_cast<std::ptrdiff_t>(9 * j));
  }
  return out;
}

std::vector<std::size_t> toy_keypoint_joints(std::size_t num_joints, std::size_t num_keypoints) {
  static const std::size_t order[] = {4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 3, 2, 0, 1};
  std::vector<std::size_t> candidates;
  for (std::size_t j : order) {
    if (j < num_joints) candidates.push_back(j);
  }
  for (std::size_t j = 16; j < num_joints; ++j) candidates.push_back(j);
  std::vector<std::size_t> out(num_keypoints);
  for (std::size_t i = 0; i < num_keypoints; ++i) out[i] = candidates[i % candidates.size()];
  return out;
}

BodyModel make_toy_model(std::uint64_t seed, std::size_t V, std::size_t K, std::size_t k) {
  if (V == 0 || K == 0 || k == 0 || K > V || k > V) {
    throw Error(ErrorCode::Validation, "toy model needs 0 < K <= V and 0 < k <= V (V=" +
                                           std::to_string(V) + ", K=" + std::to_string(K) +
                                           ", k=" + std::to_string(k) + ")");
  }
  Rng rng(derive_seed(seed, 0x70'79));
  const std::vector<ToyJoint> joints = toy_joints(K);

  BodyModel m;
  m.num_vertices = V;
  m.num_joints = K;
  m.num_keypoints = k;
  m.parents.resize(K);
  for (std::size_t j = 0; j < K; ++j) m.parents[j] = joints[j].parent;

  // Vertex v belongs to joint v % K; each joint gets a ring of vertices in
  // the plane orthogonal to its bone, slid partway toward the parent.
  std::vector<std::size_t> owner(V);
  std::vector<std::vector<std::size_t>> ring(K);
  for (std::size_t v = 0; v < V; ++v) {
    owner[v] = v % K;
    ring[owner[v]].push_back(v);
  }
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  m.template_vertices = Tensor({V, 3});
  for (std::size_t j = 0; j < K; ++j) {
    const ToyJoint& jt = joints[j];
    const Vec3 parent_pos = jt.parent < 0 ? Vec3{0.0, -0.1, 0.0}
                                          : joints[static_cast<std::size_t>(jt.parent)].pos;
    Vec3 axis{jt.pos[0] - parent_pos[0], jt.pos[1] - parent_pos[1], jt.pos[2] - parent_pos[2]};
    const double len = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
    for (double& a : axis) a /= len;
    // orthonormal frame (u, w) around axis
    Vec3 helper = std::abs(axis[2]) < 0.9 ? Vec3{0, 0, 1} : Vec3{1, 0, 0};
    Vec3 u{axis[1] * helper[2] - axis[2] * helper[1], axis[2] * helper[0] - axis[0] * helper[2],
           axis[0] * helper[1] - axis[1] * helper[0]};
    const double un = std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
    for (double& a : u) a /= un;
    const Vec3 w{axis[1] * u[2] - axis[2] * u[1], axis[2] * u[0] - axis[0] * u[2],
                 axis[0] * u[1] - axis[1] * u[0]};
    const std::size_t n = ring[j].size();
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t v = ring[j][i];
      const double ang = phase + 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n);
      const double rad = n == 1 ? 0.0 : jt.radius * rng.uniform(0.85, 1.15);
      const double slide = -rng.uniform(0.0, 0.2) * len;
      for (int c = 0; c < 3; ++c) {
        m.template_vertices(v, c) = jt.pos[c] + slide * axis[c] +
                                    rad * (std::cos(ang) * u[c] + std::sin(ang) * w[c]);
      }
    }
  }

  // Shape basis: smooth per-joint displacement fields, orthonormalised, scaled.
  const std::size_t n3 = 3 * V;
  std::vector<std::vector<double>> basis(kNumBetas, std::vector<double>(n3));
  for (std::size_t b = 0; b < kNumBetas; ++b) {
    std::vector<double> field(3 * K);
    for (double& f : field) f = rng.normal();
    for (std::size_t v = 0; v < V; ++v) {
      for (int c = 0; c < 3; ++c) {
        basis[b][3 * v + c] = field[3 * owner[v] + c] + 0.2 * rng.normal();
      }
    }
    for (std::size_t p = 0; p < b; ++p) {
      double d = 0.0;
      for (std::size_t i = 0; i < n3; ++i) d += basis[b][i] * basis[p][i];
      for (std::size_t i = 0; i < n3; ++i) basis[b][i] -= d * basis[p][i];
    }
    double norm = 0.0;
    for (double x : basis[b]) norm += x * x;
    norm = std::sqrt(norm);
    for (double& x : basis[b]) x /= norm;
  }
  const double shape_scale = 0.05 * std::sqrt(static_cast<double>(V) / 4.0);
  m.shape_dirs = Tensor({V, 3, kNumBetas});
  for (std::size_t i = 0; i < n3; ++i) {
    for (std::size_t b = 0; b < kNumBetas; ++b) {
      m.shape_dirs[i * kNumBetas + b] = shape_scale * basis[b][i];
    }
  }

  // Joint regressor: uniform over each joint's ring.
  m.joint_regressor = Tensor({K, V});
  for (std::size_t j = 0; j < K; ++j) {
    for (std::size_t v : ring[j]) {
      m.joint_regressor(j, v) = 1.0 / static_cast<double>(ring[j].size());
    }
  }

  // Skin weights: Gaussian falloff to the three nearest joints.
  m.skin_weights = Tensor({V, K});
  const double sigma = 0.08;
  for (std::size_t v = 0; v < V; ++v) {
    std::vector<std::pair<double, std::size_t>> dist;
    for (std::size_t j = 0; j < K; ++j) {
      double d2 = 0.0;
      for (int c = 0; c < 3; ++c) {
        const double d = m.template_vertices(v, c) - joints[j].pos[c];
        d2 += d * d;
      }
      dist.emplace_back(d2, j);
    }
    std::sort(dist.begin(), dist.end());
    const std::size_t keep = std::min<std::size_t>(3, K);
    double total = 0.0;
    std::vector<double> w(keep);
    for (std::size_t i = 0; i < keep; ++i) {
      w[i] = std::exp(-dist[i].first / (2.0 * sigma * sigma)) + (i == 0 ? 1e-3 : 0.0);
      total += w[i];
    }
    for (std::size_t i = 0; i < keep; ++i) m.skin_weights(v, dist[i].second) = w[i] / total;
  }

  // Keypoint regressor: random convex weights over the driving joint's ring.
  m.keypoint_regressor = Tensor({k, V});
  const std::vector<std::size_t> kp_joint = toy_keypoint_joints(K, k);
  for (std::size_t i = 0; i < k; ++i) {
    const auto& verts = ring[kp_joint[i]];
    std::vector<double> w(verts.size());
    double total = 0.0;
    for (double& x : w) {
      x = rng.uniform(0.5, 1.5);
      total += x;
    }
    for (std::size_t a = 0; a < verts.size(); ++a) m.keypoint_regressor(i, verts[a]) = w[a] / total;
  }

  round_tensor(m.template_vertices);
  round_tensor(m.shape_dirs);
  // Snap convex rows to multiples of 2^-24: exact in float32, and the row sums
  // are exactly 1 in double so the rest pose reproduces the template exactly.
  auto fix_rows = [](Tensor& t, std::size_t rows, std::size_t cols) {
    constexpr double grid = 16777216.0;
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      std::size_t largest = 0;
      for (std::size_t c = 0; c < cols; ++c) {
        t[r * cols + c] = std::round(t[r * cols + c] * grid) / grid;
        if (t[r * cols + c] > t[r * cols + largest]) largest = c;
      }
      for (std::size_t c = 0; c < cols; ++c) {
        if (c != largest) s += t[r * cols + c];
      }
      t[r * cols + largest] = 1.0 - s;
    }
  };
  fix_rows(m.joint_regressor, K, V);
  fix_rows(m.skin_weights, V, K);
  fix_rows(m.keypoint_regressor, k, V);
  m.validate();
  return m;
}

void save_model(const BodyModel& model, const std::filesystem::path& path) {
  model.validate();
  Json header = {{"version", 1},
                 {"V", model.num_vertices},
                 {"K", model.num_joints},
                 {"k", model.num_keypoints},
                 {"has_pose_dirs", model.has_pose_dirs()},
                 {"order",
                  {"template", "shape_dirs", "pose_dirs", "joint_regressor", "skin_weights",
                   "parents", "keypoint_regressor"}}};
  PayloadWriter w;
  w.put_f32(model.template_vertices.span());
  w.put_f32(model.shape_dirs.span());
  if (model.has_pose_dirs()) w.put_f32(model.pose_dirs.span());
  w.put_f32(model.joint_regressor.span());
  w.put_f32(model.skin_weights.span());
  w.put_i32(model.parents);
  w.put_f32(model.keypoint_regressor.span());
  write_container(path, "K2M1", header, w.bytes());
}

BodyModel load_model(const std::filesystem::path& path) {
  Container c = read_container(path, "K2M1");
  BodyModel m;
  bool pose = false;
  try {
    if (c.header.at("version").get<int>() != 1) {
      throw Error(ErrorCode::Parse, "unsupported model version");
    }
    m.num_vertices = c.header.at("V").get<std::size_t>();
    m.num_joints = c.header.at("K").get<std::size_t>();
    m.num_keypoints = c.header.at("k").get<std::size_t>();
    pose = c.header.at("has_pose_dirs").get<bool>();
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::Parse, std::string("model header: ") + e.what());
  }
  const std::size_t V = m.num_vertices, K = m.num_joints, k = m.num_keypoints;
  if (V == 0 || K == 0 || k == 0) throw Error(ErrorCode::Invariant, "model dimensions must be > 0");
  PayloadReader r(c.payload);
  m.template_vertices = Tensor({V, 3}, r.get_f32(V * 3));
  m.shape_dirs = Tensor({V, 3, kNumBetas}, r.get_f32(V * 3 * kNumBetas));
  if (pose) m.pose_dirs = Tensor({V, 3, 9 * (K - 1)}, r.get_f32(V * 3 * 9 * (K - 1)));
  m.joint_regressor = Tensor({K, V}, r.get_f32(K * V));
  m.skin_weights = Tensor({V, K}, r.get_f32(V * K));
  m.parents = r.get_i32(K);
  m.keypoint_regressor = Tensor({k, V}, r.get_f32(k * V));
  if (r.remaining() != 0) throw Error(ErrorCode::Parse, "trailing bytes after model payload");
  m.validate();
  return m;
}

}  // namespace k2m
