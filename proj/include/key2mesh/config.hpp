#pragma once
// Single JSON document holding every module's settings. Missing fields take
// their defaults; unknown top-level sections are rejected.

#include <cstdint>
#include <filesystem>
#include <string>

#include "key2mesh/adapt.hpp"
#include "key2mesh/archive.hpp"
#include "key2mesh/camera.hpp"
#include "key2mesh/dataio.hpp"
#include "key2mesh/network.hpp"
#include "key2mesh/pretrain.hpp"

namespace k2m {

struct ToyModelConfig {
  std::uint64_t seed = 0;
  std::size_t num_vertices = 64;
  std::size_t num_joints = 16;
  std::size_t num_keypoints = 12;
};

struct MocapConfig {
  std::size_t n = 20000;
  double pose_spread = 1.0;
};

struct TargetConfig {
  AugConfig aug{.yaw_range_deg = 180.0,
                .pitch_range_deg = 20.0,
                .roll_range_deg = 20.0,
                .occlusion = 0.4,
                .jitter_px = 3.0};
  std::string keypoint_map = "identity";
  DetectionFilter filter;
};

struct MetricsConfig {
  bool per_frame = false;
};

struct PathsConfig {
  std::string model;
  std::string mocap;
  std::string checkpoint;
  std::string target;
  std::string selection;
};

struct RunConfig {
  std::uint64_t seed = 0;  // network initialisation and synthetic data
  std::size_t threads = 0;
  ToyModelConfig toy_model;
  MocapConfig mocap;
  FixedCamera camera;
  NetConfig network;
  PretrainConfig pretrain;
  AdaptConfig adapt;
  TargetConfig target;
  MetricsConfig metrics;
  PathsConfig paths;

  void validate() const;
};

Json to_json(const RunConfig& c);
/// Merges `j` over the defaults. Throws Config on unknown sections or bad values.
RunConfig run_config_from_json(const Json& j);
/// Empty path yields the defaults.
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace k2m
