#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "key2mesh/error.hpp"
#include "key2mesh/network.hpp"
#include "key2mesh/optim.hpp"
#include "support.hpp"

using namespace k2m;
using k2m::test::random_tensor;
using k2m::test::rel_error;

namespace {

NetConfig small_config(std::size_t width = 32) {
  NetConfig c;
  c.width = width;
  return c;
}

Tensor run(Mlp& net, const Tensor& x, Mode mode = Mode::Eval, std::uint64_t seed = 0) {
  Graph g;
  Rng rng(seed);
  return net.forward(g, g.constant(x), mode, rng).value();
}

bool same_params(const Mlp& a, const Mlp& b) {
  const auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (!k2m::test::bit_identical(pa[i]->value, pb[i]->value)) return false;
  }
  return true;
}

Eigen::MatrixXd as_matrix(const Tensor& t) {
  Eigen::MatrixXd m(t.rows(), t.cols());
  for (std::size_t r = 0; r < t.rows(); ++r) {
    for (std::size_t c = 0; c < t.cols(); ++c) m(r, c) = t(r, c);
  }
  return m;
}

}  // namespace

TEST_CASE("layer widths") {
  const Networks n = init_networks(NetConfig{}, 1);
  CHECK(n.F.in_width() == 24);
  CHECK(n.F.out_width() == 1024);
  CHECK(n.H.in_width() == 1024);
  CHECK(n.H.out_width() == 106);
  CHECK(n.D.out_width() == 1);
  CHECK(n.F.blocks().size() == 5);
  CHECK(n.H.blocks().size() == 2);
  CHECK(n.D.blocks().size() == 2);
  CHECK_FALSE(n.F.blocks()[0].skip);
  for (std::size_t i = 1; i < 5; ++i) CHECK(n.F.blocks()[i].skip);
  CHECK(n.H.blocks()[1].skip);
  for (const Block& b : n.D.blocks()) CHECK_FALSE(b.normalize);
  CHECK(n.D.dropout() == 0.0);

  NetConfig full;
  full.num_joints = 24;
  full.num_keypoints = 25;
  CHECK(full.head_width() == 154);
  Networks f = init_networks(full, 1);
  CHECK(f.H.out_width() == 154);
  CHECK(run(f.F, Tensor({3, 50}, 0.1)).shape() == Shape{3, 1024});
}

TEST_CASE("eval-mode features are pure and finite at zero input") {
  Networks n = init_networks(NetConfig{}, 2);
  Rng rng(91);
  const Tensor x = random_tensor({8, 24}, rng);
  CHECK(run(n.F, x).values() == run(n.F, x).values());
  CHECK(run(n.F, Tensor({4, 24}, 0.0)).all_finite());
  CHECK_THROWS_AS(run(n.F, Tensor({4, 23}, 0.0)), Error);
}

TEST_CASE("the initial head decodes zero features to the rest pose") {
  Networks n = init_networks(small_config(), 3);
  Graph g;
  Rng rng(0);
  const HeadOutput h = n.head(g, g.constant(Tensor({2, 32}, 0.0)), Mode::Eval, rng);
  const Tensor rot = h.rot.value(), beta = h.beta.value();
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t j = 0; j < 16; ++j) {
      for (std::size_t i = 0; i < 9; ++i) CHECK(rot(r, 9 * j + i) == (i % 4 == 0 ? 1.0 : 0.0));
    }
    for (std::size_t i = 0; i < kNumBetas; ++i) CHECK(beta(r, i) == 0.0);
  }
}

TEST_CASE("decoded head rotations are orthonormal") {
  Networks n = init_networks(small_config(), 4);
  Rng rng(92);
  const Prediction p = predict(n.F, n.H, random_tensor({64, 24}, rng, -2.0, 2.0));
  for (std::size_t r = 0; r < 64; ++r) {
    for (std::size_t j = 0; j < 16; ++j) {
      Mat3 m;
      std::copy(p.rot.data() + r * 144 + 9 * j, p.rot.data() + r * 144 + 9 * j + 9, m.begin());
      CHECK(orthonormality_error(m) <= 1e-6);
      CHECK(std::abs(det3(m) - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("initialisation") {
  const Networks a = init_networks(small_config(), 5), b = init_networks(small_config(), 5);
  CHECK(same_params(a.F, b.F));
  CHECK(same_params(a.H, b.H));
  CHECK(same_params(a.D, b.D));
  const Networks c = init_networks(small_config(), 6);
  CHECK_FALSE(same_params(a.F, c.F));
  for (const Mlp* m : {&a.F, &a.H, &a.D}) {
    for (const Block& blk : m->blocks()) {
      const double bound = std::sqrt(6.0 / static_cast<double>(blk.weight.value.rows()));
      for (double w : blk.weight.value.span()) CHECK(std::abs(w) <= bound);
      for (double v : blk.bias.value.span()) CHECK(v == 0.0);
      for (double v : blk.slope.value.span()) CHECK(v == 0.25);
      for (double v : blk.stats.mean.span()) CHECK(v == 0.0);
      for (double v : blk.stats.var.span()) CHECK(v == 1.0);
    }
  }
}

TEST_CASE("a linear-equivalent critic collapses to an affine map") {
  Networks n = init_networks(small_config(16), 7);
  Mlp& D = n.D;
  for (Block& b : D.blocks()) {
    b.slope.value.fill(1.0);
    b.bias.value.fill(0.0);
  }
  Rng rng(93);
  D.final_bias().value.fill(0.4);
  const Tensor phi = random_tensor({5, 16}, rng);
  const Tensor out = run(D, phi);
  CHECK(out.shape() == Shape{5, 1});
  Eigen::MatrixXd h = as_matrix(phi);
  for (const Block& b : D.blocks()) {
    const Eigen::MatrixXd y = h * as_matrix(b.weight.value);
    h = b.skip ? Eigen::MatrixXd(y + h) : y;
  }
  const Eigen::MatrixXd want = (h * as_matrix(D.final_weight().value)).array() + 0.4;
  for (std::size_t r = 0; r < 5; ++r) CHECK(out(r, 0) == doctest::Approx(want(r, 0)).epsilon(1e-12));

  D.final_bias().value.fill(0.0);
  const Tensor base = run(D, phi);
  for (double& w : D.final_weight().value.span()) w *= 2.0;
  const Tensor doubled = run(D, phi);
  for (std::size_t r = 0; r < 5; ++r) CHECK(doubled[r] == doctest::Approx(2.0 * base[r]).epsilon(1e-14));
}

TEST_CASE("frozen clones") {
  Networks n = init_networks(small_config(), 8);
  Mlp F_pt = n.F.clone_frozen("F_pt");
  CHECK(same_params(F_pt, n.F));
  CHECK_FALSE(F_pt.trainable());
  CHECK(n.F.trainable());
  CHECK_THROWS_AS(Adam(F_pt.parameters(), AdamConfig{}), Error);
  Rng rng(94);
  const Tensor x = random_tensor({6, 24}, rng);
  CHECK(run(F_pt, x).values() == run(n.F, x).values());
  // deep copy: changing the source leaves the clone alone
  n.F.blocks()[0].weight.value[0] += 1.0;
  CHECK_FALSE(same_params(F_pt, n.F));
}

TEST_CASE("train mode uses dropout and batch statistics") {
  Networks n = init_networks(small_config(), 9);
  Rng rng(95);
  const Tensor x = random_tensor({16, 24}, rng);
  const Tensor a = run(n.F, x, Mode::Train, 1), b = run(n.F, x, Mode::Train, 2);
  CHECK(a.values() != b.values());
  CHECK(n.F.blocks()[0].stats.mean[0] != 0.0);
}

TEST_CASE("parameter gradients of F and H match finite differences in eval mode") {
  NetConfig cfg = small_config(8);
  cfg.num_keypoints = 3;
  cfg.num_joints = 2;
  cfg.dropout = 0.0;
  Networks n = init_networks(cfg, 10);
  Rng rng(96);
  for (Mlp* m : {&n.F, &n.H}) {
    for (Block& b : m->blocks()) {
      for (double& v : b.stats.mean.span()) v = rng.uniform(-0.2, 0.2);
      for (double& v : b.stats.var.span()) v = rng.uniform(0.5, 2.0);
      for (double& v : b.bias.value.span()) v = rng.uniform(-0.3, 0.3);
    }
  }
  const Tensor x = random_tensor({4, 6}, rng);
  auto loss = [&](Graph& g) {
    Rng unused(0);
    const Var out = n.H.forward(g, n.F.forward(g, g.constant(x), Mode::Eval, unused), Mode::Eval, unused);
    return ops::sum(ops::square(out));
  };
  std::vector<Parameter*> params = n.F.parameters();
  for (Parameter* p : n.H.parameters()) params.push_back(p);
  for (Parameter* p : params) p->zero_grad();
  {
    Graph g;
    g.backward(loss(g));
  }
  std::size_t checked = 0;
  for (Parameter* p : params) {
    for (std::size_t i = 0; i < p->value.size(); i += 3) {
      const double num = k2m::test::central_difference(&p->value[i], [&] {
        Graph g;
        return loss(g).value().item();
      });
      CHECK(rel_error(p->grad[i], num) <= 1e-5);
      ++checked;
    }
  }
  CHECK(checked > 100);
}

TEST_CASE("checkpoints round trip exactly") {
  Networks n = init_networks(small_config(), 11);
  Rng rng(97);
  for (Block& b : n.F.blocks()) {
    for (double& v : b.stats.mean.span()) v = rng.normal();
  }
  const Mlp F_pt = n.F.clone_frozen("F_pt");
  n.F.blocks()[1].weight.value[3] += 0.5;
  const auto path = std::filesystem::temp_directory_path() / "k2m_test_ckpt.k2mc";
  save_checkpoint(path, n, &F_pt, Json{{"seed", 11}}, 11, 42);
  Checkpoint c = load_checkpoint(path);
  CHECK(c.seed == 11);
  CHECK(c.step == 42);
  CHECK(c.run_config.at("seed") == 11);
  CHECK(c.config.width == 32);
  CHECK(same_params(c.nets.F, n.F));
  CHECK(same_params(c.nets.H, n.H));
  CHECK(same_params(c.nets.D, n.D));
  REQUIRE(c.has_frozen);
  CHECK(same_params(c.F_pt, F_pt));
  CHECK_FALSE(c.F_pt.trainable());
  for (std::size_t i = 0; i < n.F.blocks().size(); ++i) {
    CHECK(c.nets.F.blocks()[i].stats.mean.values() == n.F.blocks()[i].stats.mean.values());
  }
  const Tensor x = random_tensor({3, 24}, rng);
  CHECK(predict(c.nets.F, c.nets.H, x).rot.values() == predict(n.F, n.H, x).rot.values());

  save_checkpoint(path, n, nullptr, Json::object(), 1, 0);
  CHECK_FALSE(load_checkpoint(path).has_frozen);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("K2M1", 4);
  }
  try {
    load_checkpoint(path);
    FAIL("expected BadMagic");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::BadMagic);
  }
  std::filesystem::remove(path);
}

TEST_CASE("chunked prediction equals a single pass") {
  Networks n = init_networks(small_config(), 12);
  Rng rng(98);
  const Tensor x = random_tensor({23, 24}, rng);
  const Prediction a = predict(n.F, n.H, x), b = predict_chunked(n.F, n.H, x, 5);
  CHECK(a.features.values() == b.features.values());
  CHECK(a.rot.values() == b.rot.values());
  CHECK(a.beta.values() == b.beta.values());
}
