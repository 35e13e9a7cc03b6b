#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "key2mesh/config.hpp"
#include "key2mesh/error.hpp"

using namespace k2m;

TEST_CASE("defaults survive a JSON round trip") {
  const RunConfig d;
  CHECK_NOTHROW(d.validate());
  const Json j = to_json(d);
  const RunConfig r = run_config_from_json(j);
  CHECK(to_json(r) == j);
  CHECK(r.camera.focal == 1000.0);
  CHECK(r.camera.translation[2] == 5.0);
  CHECK(r.toy_model.num_keypoints == 12);
  CHECK(r.target.filter.min_visible == 6);
}

TEST_CASE("partial configs merge over the defaults") {
  const RunConfig r = run_config_from_json(Json::parse(R"({"seed": 9, "pretrain": {"lr": 0.01}, "adapt": {"w6": 0}})"));
  CHECK(r.seed == 9);
  CHECK(r.pretrain.lr == 0.01);
  CHECK(r.adapt.weights.wd == 0.0);
  CHECK(r.adapt.weights.kp2d == AdaptWeights{}.kp2d);
  CHECK(r.network.width == NetConfig{}.width);
}

TEST_CASE("invalid configs are rejected") {
  auto code = [](const char* text) {
    try {
      run_config_from_json(Json::parse(text));
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::Contract;
  };
  CHECK(code(R"({"bogus": 1})") == ErrorCode::Config);
  CHECK(code(R"({"toy_model": {"K": 0}})") == ErrorCode::Config);
  CHECK(code(R"({"camera": {"focal": -1}})") == ErrorCode::Config);
  CHECK(code(R"({"target": {"aug": {"occlusion": 1.0}}})") == ErrorCode::Config);
  CHECK(code(R"({"adapt": {"k_critic": 0}})") == ErrorCode::Config);
  CHECK(code(R"({"seed": "x"})") == ErrorCode::Config);
}

TEST_CASE("config files") {
  const auto path = std::filesystem::temp_directory_path() / "k2m_test_config.json";
  {
    std::ofstream out(path);
    out << R"({"mocap": {"n": 77}})";
  }
  CHECK(load_run_config(path).mocap.n == 77);
  {
    std::ofstream out(path);
    out << "{ not json";
  }
  CHECK_THROWS_AS(load_run_config(path), Error);
  std::filesystem::remove(path);
  CHECK(load_run_config("").mocap.n == RunConfig{}.mocap.n);
}
