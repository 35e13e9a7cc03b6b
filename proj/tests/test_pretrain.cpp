#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "key2mesh/body_ops.hpp"
#include "key2mesh/dataio.hpp"
#include "key2mesh/error.hpp"
#include "key2mesh/pretrain.hpp"
#include "support.hpp"

using namespace k2m;
using k2m::test::random_tensor;

namespace {

const BodyModel& model() {
  static const BodyModel m = make_toy_model(0);
  return m;
}

const MocapSet& mocap() {
  static const MocapSet s = synth_mocap(2, 600, model());
  return s;
}

Batch pair_batch(std::size_t n, std::uint64_t seed) {
  std::vector<TrainingPair> pairs;
  for (std::size_t i = 0; i < n; ++i) {
    pairs.push_back(make_pair_seeded(mocap(), i, model(), FixedCamera{}, AugConfig{}, seed, 0));
  }
  return make_batch(pairs);
}

HeadOutput fixed_head(Graph& g, const Tensor& rot, const Tensor& beta) {
  HeadOutput h;
  h.rot = g.leaf(rot);
  h.beta = g.leaf(beta);
  return h;
}

// Rotation matrices for random 6D vectors, as a head would produce them.
Tensor random_rotations(std::size_t B, std::size_t K, Rng& rng) {
  Tensor rot({B, 9 * K});
  for (std::size_t r = 0; r < B; ++r) {
    for (std::size_t j = 0; j < K; ++j) {
      Rot6 six;
      for (double& x : six) x = rng.normal();
      const Mat3 m = rot6d_to_matrix(six);
      std::copy(m.begin(), m.end(), rot.data() + r * 9 * K + 9 * j);
    }
  }
  return rot;
}

PretrainConfig small_run(std::size_t epochs) {
  PretrainConfig c;
  c.epochs = epochs;
  c.batch = 32;
  c.eval_every = 0;
  c.seed = 3;
  return c;
}

NetConfig small_net() {
  NetConfig c;
  c.width = 64;
  return c;
}

}  // namespace

TEST_CASE("ground-truth predictions are a fixed point of the loss") {
  const Batch b = pair_batch(16, 1);
  Graph g;
  const LossVars l = pretrain_loss(model(), FixedCamera{}, fixed_head(g, b.rot, b.beta), b, LossWeights{});
  const LossBreakdown v = l.values();
  CHECK(v.theta <= 1e-9);
  CHECK(v.beta <= 1e-9);
  CHECK(v.kp2d <= 1e-9);
  CHECK(v.kp3d <= 1e-9);
  CHECK(v.total <= 1e-9);
}

TEST_CASE("a unit shape offset costs exactly w2 in the shape term") {
  const Batch b = pair_batch(16, 2);
  Tensor beta = b.beta;
  for (double& x : beta.span()) x += 1.0;
  Graph g;
  const LossBreakdown v =
      pretrain_loss(model(), FixedCamera{}, fixed_head(g, b.rot, beta), b, LossWeights{}).values();
  CHECK(v.theta == 0.0);
  CHECK(v.beta == doctest::Approx(1.0).epsilon(1e-12));
  // the keypoint terms see the changed body; with them weighted out the total is w2
  Graph h;
  const LossBreakdown only = pretrain_loss(model(), FixedCamera{}, fixed_head(h, b.rot, beta), b,
                                           LossWeights{100.0, 100.0, 0.0, 0.0})
                                 .values();
  CHECK(only.total == doctest::Approx(100.0).epsilon(1e-12));
  CHECK(v.total == doctest::Approx(100.0 + 50.0 * v.kp2d + 50.0 * v.kp3d).epsilon(1e-12));
}

TEST_CASE("loss terms match a scalar recomputation") {
  Rng rng(101);
  const Batch b = pair_batch(12, 3);
  const std::size_t B = b.size, K = model().num_joints, k = model().num_keypoints;
  const Tensor rot = random_rotations(B, K, rng);
  const Tensor beta = random_tensor({B, kNumBetas}, rng, -1.5, 1.5);
  const LossWeights w{3.0, 5.0, 7.0, 11.0};
  Graph g;
  const LossBreakdown v = pretrain_loss(model(), FixedCamera{}, fixed_head(g, rot, beta), b, w).values();

  double lt = 0.0, lb = 0.0, l3 = 0.0, l2 = 0.0, visible = 0.0;
  for (std::size_t i = 0; i < rot.size(); ++i) lt += std::abs(rot[i] - b.rot[i]);
  for (std::size_t i = 0; i < beta.size(); ++i) lb += std::abs(beta[i] - b.beta[i]);
  const FixedCamera cam;
  for (std::size_t r = 0; r < B; ++r) {
    const SkinResult s = skin(model(), std::span<const double>(rot.data() + r * 9 * K, 9 * K),
                              std::span<const double>(beta.data() + r * kNumBetas, kNumBetas));
    const Tensor X = regress_keypoints(s.vertices, model().keypoint_regressor);
    Tensor world({k, 3});
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t d = 0; d < 3; ++d) {
        const double centred = X(i, d) - s.joints(0, d);
        l3 += std::abs(centred - b.X(r, 3 * i + d));
        world(i, d) = centred + b.root(r, d);
      }
    }
    const Tensor px = project(world, cam);
    for (std::size_t i = 0; i < k; ++i) {
      const double vis = b.vis(r, i);
      const double u = (px(i, 0) - b.center(r, 0)) / b.scale[r];
      const double v2 = (px(i, 1) - b.center(r, 1)) / b.scale[r];
      l2 += vis * (std::abs(u - b.x_clean(r, 2 * i)) + std::abs(v2 - b.x_clean(r, 2 * i + 1)));
      visible += 2.0 * vis;
    }
  }
  lt /= static_cast<double>(rot.size());
  lb /= static_cast<double>(beta.size());
  l3 /= static_cast<double>(B * 3 * k);
  l2 /= visible;
  CHECK(std::abs(v.theta - lt) <= 1e-10);
  CHECK(std::abs(v.beta - lb) <= 1e-10);
  CHECK(std::abs(v.kp3d - l3) <= 1e-10);
  CHECK(std::abs(v.kp2d - l2) <= 1e-10);
  CHECK(std::abs(v.total - (3.0 * lt + 5.0 * lb + 7.0 * l2 + 11.0 * l3)) <= 1e-10);
  CHECK(std::abs(v.total - (w.theta * v.theta + w.beta * v.beta + w.kp2d * v.kp2d + w.kp3d * v.kp3d)) <= 1e-9);
}

TEST_CASE("every trainable parameter receives gradient at step 0") {
  Networks n = init_networks(small_net(), 4);
  const Batch b = pair_batch(32, 4);
  std::vector<Parameter*> params = n.F.parameters();
  for (Parameter* p : n.H.parameters()) params.push_back(p);
  for (Parameter* p : params) p->zero_grad();
  Graph g;
  Rng rng(5);
  const Var phi = n.features(g, g.constant(b.input), Mode::Train, rng);
  const LossVars l = pretrain_loss(model(), FixedCamera{}, n.head(g, phi, Mode::Train, rng), b, LossWeights{});
  g.backward(l.total);
  for (Parameter* p : params) {
    double m = 0.0;
    for (double v : p->grad.span()) m = std::max(m, std::abs(v));
    INFO(p->name);
    CHECK(m > 0.0);
  }
  for (Parameter* p : n.D.parameters()) {
    const bool untouched = p->grad.empty() || p->grad.values() == std::vector<double>(p->grad.size(), 0.0);
    CHECK(untouched);
  }
}

TEST_CASE("a zero learning rate leaves parameters unchanged") {
  Networks n = init_networks(small_net(), 5);
  const Mlp F0 = n.F.clone_frozen("F0"), H0 = n.H.clone_frozen("H0");
  PretrainConfig c = small_run(1);
  c.lr = 0.0;
  const MocapSet set = synth_mocap(6, 128, model());
  run_pretrain(n, model(), set, FixedCamera{}, c);
  const auto a = n.F.parameters();
  const auto b = F0.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->value.values() == b[i]->value.values());
  const auto h = n.H.parameters();
  const auto h0 = H0.parameters();
  for (std::size_t i = 0; i < h.size(); ++i) CHECK(h[i]->value.values() == h0[i]->value.values());
}

TEST_CASE("training is deterministic per seed and reduces the loss") {
  const MocapSet set = synth_mocap(7, 1600, model());
  PretrainConfig c = small_run(3);
  Networks a = init_networks(small_net(), 8), b = init_networks(small_net(), 8);
  const PretrainResult ra = run_pretrain(a, model(), set, FixedCamera{}, c);
  const PretrainResult rb = run_pretrain(b, model(), set, FixedCamera{}, c);
  REQUIRE(ra.history.size() == rb.history.size());
  for (std::size_t i = 0; i < ra.history.size(); ++i) CHECK(ra.history[i].total == rb.history[i].total);

  const std::size_t n = ra.history.size(), w = std::max<std::size_t>(1, n / 20);
  auto median = [&](std::size_t from) {
    std::vector<double> v;
    for (std::size_t i = from; i < from + w; ++i) v.push_back(ra.history[i].total);
    std::nth_element(v.begin(), v.begin() + static_cast<long>(v.size() / 2), v.end());
    return v[v.size() / 2];
  };
  CHECK(median(n - w) < median(0));
  for (const LossBreakdown& l : ra.history) {
    CHECK(l.theta >= 0.0);
    CHECK(l.kp2d >= 0.0);
  }
  CHECK(ra.evals.size() == 1);
  CHECK(ra.holdout_size == 80);
}

TEST_CASE("holdout split") {
  CHECK(holdout_start(100, 0.05) == 95);
  CHECK(holdout_start(10, 0.0) == 10);
  CHECK(holdout_start(3, 0.5) == 1);
}

TEST_CASE("invalid pretraining configs are rejected") {
  PretrainConfig c;
  c.batch = 1;
  CHECK_THROWS_AS(c.validate(), Error);
  c = PretrainConfig{};
  c.weights.kp3d = -1.0;
  CHECK_THROWS_AS(c.validate(), Error);
}
