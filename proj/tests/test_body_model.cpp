#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <vector>

#include "key2mesh/body_model.hpp"
#include "key2mesh/error.hpp"
#include "support.hpp"

using namespace k2m;
using k2m::test::random_tensor;
using k2m::test::rel_error;

namespace {

std::vector<double> identity_rots(std::size_t K) {
  std::vector<double> r(9 * K, 0.0);
  for (std::size_t j = 0; j < K; ++j) r[9 * j] = r[9 * j + 4] = r[9 * j + 8] = 1.0;
  return r;
}

std::vector<double> random_rots(std::size_t K, Rng& rng, double spread) {
  std::vector<double> r;
  for (std::size_t j = 0; j < K; ++j) {
    const Mat3 m = rodrigues({rng.normal(0, spread), rng.normal(0, spread), rng.normal(0, spread)});
    r.insert(r.end(), m.begin(), m.end());
  }
  return r;
}

// Three joints in a line along +y, one extra vertex bound only to the middle joint.
BodyModel chain_model() {
  BodyModel m;
  m.num_vertices = 4;
  m.num_joints = 3;
  m.num_keypoints = 1;
  m.template_vertices = Tensor::matrix(4, 3, {0, 0, 0, 0, 1, 0, 0, 2, 0, 0.5, 1.5, 0.2});
  m.shape_dirs = Tensor({4, 3, kNumBetas}, 0.0);
  m.joint_regressor = Tensor::matrix(3, 4, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0});
  m.skin_weights = Tensor::matrix(4, 3, {1, 0, 0, 1, 0, 0, 0, 0, 1, 0, 1, 0});
  m.parents = {-1, 0, 1};
  m.keypoint_regressor = Tensor::matrix(1, 4, {0.25, 0.25, 0.25, 0.25});
  m.validate();
  return m;
}

std::filesystem::path temp_path(const char* name) {
  return std::filesystem::temp_directory_path() / (std::string("k2m_test_") + name);
}

}  // namespace

TEST_CASE("toy model is deterministic and satisfies the model invariants") {
  const BodyModel a = make_toy_model(3), b = make_toy_model(3);
  CHECK(a.template_vertices.values() == b.template_vertices.values());
  CHECK(a.shape_dirs.values() == b.shape_dirs.values());
  CHECK(a.skin_weights.values() == b.skin_weights.values());
  CHECK(a.keypoint_regressor.values() == b.keypoint_regressor.values());
  CHECK_NOTHROW(a.validate());
  CHECK(a.num_vertices == 64);
  CHECK(a.num_joints == 16);
  CHECK(a.num_keypoints == 12);
  CHECK_FALSE(a.has_pose_dirs());
  for (std::size_t v = 0; v < a.num_vertices; ++v) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.num_joints; ++j) {
      CHECK(a.skin_weights(v, j) >= 0.0);
      s += a.skin_weights(v, j);
    }
    CHECK(std::abs(s - 1.0) <= 1e-6);
  }
  const BodyModel c = make_toy_model(4);
  CHECK(c.template_vertices.values() != a.template_vertices.values());
}

TEST_CASE("toy keypoints are driven by the limb joints") {
  const auto map = toy_keypoint_joints(16, 12);
  REQUIRE(map.size() == 12);
  for (std::size_t i = 0; i < 12; ++i) CHECK(map[i] == i + 4);
}

TEST_CASE("rest pose reproduces the template") {
  const BodyModel m = make_toy_model(1);
  const std::vector<double> beta(kNumBetas, 0.0);
  const SkinResult s = skin(m, identity_rots(m.num_joints), beta);
  CHECK(k2m::test::max_abs_diff(s.vertices, m.template_vertices) <= 1e-12);
  CHECK(k2m::test::max_abs_diff(s.joints, s.rest_joints) <= 1e-12);
}

TEST_CASE("rest pose identity holds with pose blendshapes present") {
  BodyModel m = make_toy_model(2);
  Rng rng(51);
  m.pose_dirs = random_tensor({m.num_vertices, 3, 9 * (m.num_joints - 1)}, rng, -0.01, 0.01);
  const SkinResult s = skin(m, identity_rots(m.num_joints), std::vector<double>(kNumBetas, 0.0));
  CHECK(k2m::test::max_abs_diff(s.vertices, m.template_vertices) <= 1e-12);
}

TEST_CASE("a root rotation rigidly rotates the rest mesh about the root joint") {
  const BodyModel m = make_toy_model(5);
  Rng rng(52);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> beta(kNumBetas);
    for (double& b : beta) b = rng.normal();
    const SkinResult rest = skin(m, identity_rots(m.num_joints), beta);
    std::vector<double> rots = identity_rots(m.num_joints);
    const Mat3 R = rodrigues({rng.normal(), rng.normal(), rng.normal()});
    std::copy(R.begin(), R.end(), rots.begin());
    const SkinResult posed = skin(m, rots, beta);
    const Vec3 root = rest_root(m, beta);
    for (std::size_t v = 0; v < m.num_vertices; ++v) {
      const Vec3 p = apply3(R, {rest.vertices(v, 0) - root[0], rest.vertices(v, 1) - root[1],
                                rest.vertices(v, 2) - root[2]});
      for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(posed.vertices(v, c) - (p[c] + root[c])) <= 1e-9);
    }
  }
}

TEST_CASE("skinning a three-joint chain matches the per-vertex transform oracle") {
  const BodyModel m = chain_model();
  Rng rng(53);
  for (int trial = 0; trial < 50; ++trial) {
    const Mat3 R0 = rodrigues({rng.normal(), rng.normal(), rng.normal()});
    const Mat3 R1 = trial == 0 ? rot_z(std::numbers::pi / 2) : rodrigues({rng.normal(), rng.normal(), rng.normal()});
    const Mat3 R2 = rodrigues({rng.normal(), rng.normal(), rng.normal()});
    std::vector<double> rots(R0.begin(), R0.end());
    rots.insert(rots.end(), R1.begin(), R1.end());
    rots.insert(rots.end(), R2.begin(), R2.end());
    const SkinResult s = skin(m, rots, std::vector<double>(kNumBetas, 0.0));

    const Vec3 J0{0, 0, 0}, J1{0, 1, 0}, v3{0.5, 1.5, 0.2};
    // world(v3) = J0 + R0 (J1 - J0) + R0 R1 (v3 - J1)
    const Vec3 a = apply3(R0, {J1[0] - J0[0], J1[1] - J0[1], J1[2] - J0[2]});
    const Vec3 b = apply3(matmul3(R0, R1), {v3[0] - J1[0], v3[1] - J1[1], v3[2] - J1[2]});
    for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(s.vertices(3, c) - (J0[c] + a[c] + b[c])) <= 1e-10);
    // joint 2 sits where joint 1 sends the segment J2 - J1
    const Vec3 j2 = apply3(matmul3(R0, R1), {0, 1, 0});
    for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(s.joints(2, c) - (a[c] + j2[c])) <= 1e-10);
  }
  {
    // 90 degree bend about z at joint 1 with an identity root, by hand
    std::vector<double> rots = identity_rots(3);
    const Mat3 bend = rot_z(std::numbers::pi / 2);
    std::copy(bend.begin(), bend.end(), rots.begin() + 9);
    const SkinResult s = skin(m, rots, std::vector<double>(kNumBetas, 0.0));
    // v3 - J1 = (0.5, 0.5, 0.2) rotates to (-0.5, 0.5, 0.2)
    CHECK(std::abs(s.vertices(3, 0) + 0.5) <= 1e-10);
    CHECK(std::abs(s.vertices(3, 1) - 1.5) <= 1e-10);
    CHECK(std::abs(s.vertices(3, 2) - 0.2) <= 1e-10);
  }
}

TEST_CASE("non-rotation input is rejected") {
  const BodyModel m = make_toy_model(1);
  std::vector<double> rots = identity_rots(m.num_joints);
  rots[9 * 3] = 1.1;
  try {
    skin(m, rots, std::vector<double>(kNumBetas, 0.0));
    FAIL("expected Validation");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Validation);
  }
}

TEST_CASE("skin vector-Jacobian product matches finite differences") {
  BodyModel m = make_toy_model(6, 24, 8, 6);
  Rng rng(54);
  for (bool with_pose_dirs : {false, true}) {
    if (with_pose_dirs) m.pose_dirs = random_tensor({m.num_vertices, 3, 9 * (m.num_joints - 1)}, rng, -0.05, 0.05);
    std::vector<double> rots = random_rots(m.num_joints, rng, 0.5);
    std::vector<double> beta(kNumBetas);
    for (double& b : beta) b = rng.normal();
    const Tensor wv = random_tensor({m.num_vertices, 3}, rng), wj = random_tensor({m.num_joints, 3}, rng);
    auto f = [&] {
      const SkinResult s = skin(m, rots, beta);
      double t = 0.0;
      for (std::size_t i = 0; i < wv.size(); ++i) t += wv[i] * s.vertices[i];
      for (std::size_t i = 0; i < wj.size(); ++i) t += wj[i] * s.joints[i];
      return t;
    };
    const SkinResult fwd = skin(m, rots, beta);
    std::vector<double> d_rot(rots.size(), 0.0), d_beta(kNumBetas, 0.0);
    skin_vjp(m, rots, fwd, wv.span(), wj.span(), d_rot, d_beta);
    for (std::size_t i = 0; i < rots.size(); ++i) {
      CHECK(rel_error(d_rot[i], k2m::test::central_difference(&rots[i], f)) <= 1e-5);
    }
    for (std::size_t i = 0; i < kNumBetas; ++i) {
      CHECK(rel_error(d_beta[i], k2m::test::central_difference(&beta[i], f)) <= 1e-5);
    }
  }
}

TEST_CASE("keypoint regression") {
  Rng rng(55);
  const Tensor M = random_tensor({6, 3}, rng);
  Tensor onehot({2, 6}, 0.0);
  onehot(0, 4) = 1.0;
  onehot(1, 1) = 1.0;
  const Tensor X = regress_keypoints(M, onehot);
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(X(0, c) == M(4, c));
    CHECK(X(1, c) == M(1, c));
  }
  const Tensor uniform({1, 6}, 1.0 / 6.0);
  const Tensor centroid = regress_keypoints(M, uniform);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0.0;
    for (std::size_t v = 0; v < 6; ++v) s += M(v, c);
    CHECK(centroid(0, c) == doctest::Approx(s / 6.0).epsilon(1e-14));
  }
  const Tensor W = random_tensor({3, 6}, rng), M2 = random_tensor({6, 3}, rng);
  Tensor combo = M;
  for (std::size_t i = 0; i < combo.size(); ++i) combo[i] = 0.7 * M[i] - 1.3 * M2[i];
  const Tensor lhs = regress_keypoints(combo, W), a = regress_keypoints(M, W), b = regress_keypoints(M2, W);
  for (std::size_t i = 0; i < lhs.size(); ++i) CHECK(std::abs(lhs[i] - (0.7 * a[i] - 1.3 * b[i])) <= 1e-12);
  CHECK_THROWS_AS(regress_keypoints(M, Tensor({2, 5}, 0.2)), Error);
}

TEST_CASE("pose_to_matrices applies rodrigues per joint") {
  Rng rng(56);
  std::vector<double> aa(3 * 5);
  for (double& x : aa) x = rng.normal();
  const std::vector<double> r = pose_to_matrices(aa, 5);
  for (std::size_t j = 0; j < 5; ++j) {
    const Mat3 m = rodrigues({aa[3 * j], aa[3 * j + 1], aa[3 * j + 2]});
    for (std::size_t i = 0; i < 9; ++i) CHECK(r[9 * j + i] == m[i]);
  }
}

TEST_CASE("model files round trip exactly") {
  BodyModel m = make_toy_model(7);
  const auto path = temp_path("model.k2m");
  save_model(m, path);
  const BodyModel l = load_model(path);
  CHECK(l.template_vertices.values() == m.template_vertices.values());
  CHECK(l.shape_dirs.values() == m.shape_dirs.values());
  CHECK(l.joint_regressor.values() == m.joint_regressor.values());
  CHECK(l.skin_weights.values() == m.skin_weights.values());
  CHECK(l.keypoint_regressor.values() == m.keypoint_regressor.values());
  CHECK(l.parents == m.parents);
  CHECK_FALSE(l.has_pose_dirs());

  Rng rng(57);
  m.pose_dirs = random_tensor({m.num_vertices, 3, 9 * (m.num_joints - 1)}, rng, -0.01, 0.01);
  for (double& x : m.pose_dirs.span()) x = static_cast<double>(static_cast<float>(x));
  save_model(m, path);
  CHECK(load_model(path).pose_dirs.values() == m.pose_dirs.values());
  std::filesystem::remove(path);
}

TEST_CASE("corrupted model files give typed errors") {
  const BodyModel m = make_toy_model(8);
  const auto path = temp_path("bad.k2m");
  auto read = [&] {
    std::ifstream in(path, std::ios::binary);
    return std::vector<char>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  };
  auto write = [&](const std::vector<char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  };
  auto load_code = [&] {
    try {
      load_model(path);
    } catch (const Error& e) {
      return std::make_pair(e.code(), std::string(e.what()));
    }
    FAIL("expected a load error");
    return std::make_pair(ErrorCode::Contract, std::string());
  };

  save_model(m, path);
  std::vector<char> bytes = read();
  bytes[0] = 'X';
  write(bytes);
  CHECK(load_code().first == ErrorCode::BadMagic);

  save_model(m, path);
  bytes = read();
  bytes.resize(bytes.size() - 10);
  write(bytes);
  CHECK(load_code().first == ErrorCode::Truncated);

  // scale skin_weights row 5 to sum 0.9
  save_model(m, path);
  bytes = read();
  std::uint32_t header_len = 0;
  std::memcpy(&header_len, bytes.data() + 4, 4);
  const std::size_t V = m.num_vertices, K = m.num_joints;
  const std::size_t skin_offset = 8 + header_len + 4 * (V * 3 + V * 3 * kNumBetas + K * V);
  for (std::size_t j = 0; j < K; ++j) {
    float w;
    char* at = bytes.data() + skin_offset + 4 * (5 * K + j);
    std::memcpy(&w, at, 4);
    w *= 0.9f;
    std::memcpy(at, &w, 4);
  }
  write(bytes);
  const auto [code, what] = load_code();
  CHECK(code == ErrorCode::Invariant);
  CHECK(what.find("skin_weights row 5") != std::string::npos);
  std::filesystem::remove(path);
}
