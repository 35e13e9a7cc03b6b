#include <doctest.h>

#include <cmath>
#include <limits>

#include "key2mesh/error.hpp"
#include "key2mesh/optim.hpp"
#include "support.hpp"

using namespace k2m;

TEST_CASE("zero gradient leaves parameters unchanged") {
  Parameter p{"p", Tensor::matrix(1, 3, {1, -2, 3}), Tensor(), true};
  p.zero_grad();
  Adam adam({&p}, AdamConfig{.lr = 0.1});
  adam.step();
  CHECK(p.value.values() == std::vector<double>{1, -2, 3});
}

TEST_CASE("first step moves each coordinate by about lr") {
  Parameter p{"p", Tensor::matrix(1, 3, {0, 0, 0}), Tensor(), true};
  p.grad = Tensor::matrix(1, 3, {0.5, -3.0, 1e-3});
  const double lr = 1e-3;
  Adam adam({&p}, AdamConfig{.lr = lr});
  adam.step();
  // m_hat = g, v_hat = g^2: update = lr * g / (|g| + eps)
  const double expect[3] = {-lr * 0.5 / (0.5 + 1e-8), lr * 3.0 / (3.0 + 1e-8), -lr * 1e-3 / (1e-3 + 1e-8)};
  for (int i = 0; i < 3; ++i) {
    CHECK(p.value[i] == doctest::Approx(expect[i]).epsilon(1e-12));
    CHECK(std::abs(std::abs(p.value[i]) - lr) <= 1e-5 * lr);
  }
}

TEST_CASE("50 steps on x^2 match the scalar recurrence") {
  Parameter p{"x", Tensor::scalar(1.0), Tensor(), true};
  Adam adam({&p}, AdamConfig{.lr = 0.1});
  double x = 1.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 50; ++t) {
    p.grad = Tensor::scalar(2.0 * p.value[0]);
    adam.step();
    const double g = 2.0 * x;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1.0 - std::pow(0.9, t)), vh = v / (1.0 - std::pow(0.999, t));
    x -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
    CHECK(p.value[0] == doctest::Approx(x).epsilon(1e-12));
  }
  CHECK(std::abs(p.value[0]) < 0.5);
}

TEST_CASE("non-finite gradient aborts before any update and names the parameter") {
  Parameter a{"alpha", Tensor::scalar(1.0), Tensor::scalar(1.0), true};
  Parameter b{"beta", Tensor::scalar(2.0), Tensor::scalar(std::numeric_limits<double>::quiet_NaN()), true};
  Adam adam({&a, &b}, AdamConfig{});
  try {
    adam.step();
    FAIL("expected NonFinite");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NonFinite);
    CHECK(std::string(e.what()).find("beta") != std::string::npos);
  }
  CHECK(a.value[0] == 1.0);
  CHECK(b.value[0] == 2.0);
}

TEST_CASE("frozen parameters are rejected") {
  Parameter f{"frozen", Tensor::scalar(1.0), Tensor::scalar(0.0), false};
  CHECK_THROWS_AS(Adam({&f}, AdamConfig{}), Error);
}
