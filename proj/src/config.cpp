#include "key2mesh/config.hpp"

#include <fstream>
#include <set>
#include <string>

#include "key2mesh/error.hpp"

namespace k2m {
namespace {

Json aug_json(const AugConfig& a) {
  return {{"yaw_range_deg", a.yaw_range_deg}, {"pitch_range_deg", a.pitch_range_deg},
          {"roll_range_deg", a.roll_range_deg}, {"occlusion", a.occlusion},
          {"jitter_px", a.jitter_px}};
}

AugConfig aug_from(const Json& j, AugConfig a) {
  a.yaw_range_deg = j.value("yaw_range_deg", a.yaw_range_deg);
  a.pitch_range_deg = j.value("pitch_range_deg", a.pitch_range_deg);
  a.roll_range_deg = j.value("roll_range_deg", a.roll_range_deg);
  a.occlusion = j.value("occlusion", a.occlusion);
  a.jitter_px = j.value("jitter_px", a.jitter_px);
  return a;
}

Json camera_json(const FixedCamera& c) {
  return {{"focal", c.focal},
          {"cx", c.cx},
          {"cy", c.cy},
          {"rotation", std::vector<double>(c.rotation.begin(), c.rotation.end())},
          {"translation", std::vector<double>(c.translation.begin(), c.translation.end())}};
}

FixedCamera camera_from(const Json& j) {
  FixedCamera c;
  c.focal = j.value("focal", c.focal);
  c.cx = j.value("cx", c.cx);
  c.cy = j.value("cy", c.cy);
  if (j.contains("rotation")) {
    const auto r = j.at("rotation").get<std::vector<double>>();
    if (r.size() != 9) throw Error(ErrorCode::Config, "camera.rotation needs 9 entries");
    std::copy(r.begin(), r.end(), c.rotation.begin());
  }
  if (j.contains("translation")) {
    const auto t = j.at("translation").get<std::vector<double>>();
    if (t.size() != 3) throw Error(ErrorCode::Config, "camera.translation needs 3 entries");
    std::copy(t.begin(), t.end(), c.translation.begin());
  }
  return c;
}

}  // namespace

void RunConfig::validate() const {
  if (toy_model.num_vertices == 0 || toy_model.num_joints == 0 || toy_model.num_keypoints == 0) {
    throw Error(ErrorCode::Config, "toy_model sizes must be >= 1");
  }
  if (mocap.n == 0) throw Error(ErrorCode::Config, "mocap.n must be >= 1");
  if (!(mocap.pose_spread >= 0.0)) throw Error(ErrorCode::Config, "mocap.pose_spread must be >= 0");
  try {
    camera.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::Config, std::string("camera: ") + e.what());
  }
  if (!(target.aug.occlusion >= 0.0 && target.aug.occlusion < 1.0)) {
    throw Error(ErrorCode::Config, "target.aug.occlusion must lie in [0, 1)");
  }
  if (!(target.aug.jitter_px >= 0.0)) throw Error(ErrorCode::Config, "target.aug.jitter_px must be >= 0");
  pretrain.validate();
  adapt.validate();
}

Json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"threads", c.threads},
          {"toy_model",
           {{"seed", c.toy_model.seed},
            {"V", c.toy_model.num_vertices},
            {"K", c.toy_model.num_joints},
            {"k", c.toy_model.num_keypoints}}},
          {"mocap", {{"n", c.mocap.n}, {"pose_spread", c.mocap.pose_spread}}},
          {"camera", camera_json(c.camera)},
          {"network", to_json(c.network)},
          {"pretrain", to_json(c.pretrain)},
          {"adapt", to_json(c.adapt)},
          {"target",
           {{"aug", aug_json(c.target.aug)},
            {"keypoint_map", c.target.keypoint_map},
            {"min_visible", c.target.filter.min_visible},
            {"conf_threshold", c.target.filter.conf_threshold}}},
          {"metrics", {{"per_frame", c.metrics.per_frame}}},
          {"paths",
           {{"model", c.paths.model},
            {"mocap", c.paths.mocap},
            {"checkpoint", c.paths.checkpoint},
            {"target", c.paths.target},
            {"selection", c.paths.selection}}}};
}

RunConfig run_config_from_json(const Json& j) {
  if (!j.is_object()) throw Error(ErrorCode::Config, "config must be a JSON object");
  static const std::set<std::string> known = {"seed",     "threads", "toy_model", "mocap",
                                              "camera",   "network", "pretrain",  "adapt",
                                              "target",   "metrics", "paths"};
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw Error(ErrorCode::Config, "unknown config section '" + key + "'");
  }
  RunConfig c;
  const Json empty = Json::object();
  auto section = [&](const char* name) -> const Json& { return j.contains(name) ? j.at(name) : empty; };
  try {
    c.seed = j.value("seed", c.seed);
    c.threads = j.value("threads", c.threads);
    const Json& tm = section("toy_model");
    c.toy_model.seed = tm.value("seed", c.toy_model.seed);
    c.toy_model.num_vertices = tm.value("V", c.toy_model.num_vertices);
    c.toy_model.num_joints = tm.value("K", c.toy_model.num_joints);
    c.toy_model.num_keypoints = tm.value("k", c.toy_model.num_keypoints);
    const Json& mc = section("mocap");
    c.mocap.n = mc.value("n", c.mocap.n);
    c.mocap.pose_spread = mc.value("pose_spread", c.mocap.pose_spread);
    c.camera = camera_from(section("camera"));
    c.network = net_config_from_json(section("network"));
    c.pretrain = pretrain_config_from_json(section("pretrain"));
    c.adapt = adapt_config_from_json(section("adapt"));
    const Json& tg = section("target");
    if (tg.contains("aug")) c.target.aug = aug_from(tg.at("aug"), c.target.aug);
    c.target.keypoint_map = tg.value("keypoint_map", c.target.keypoint_map);
    c.target.filter.min_visible = tg.value("min_visible", c.target.filter.min_visible);
    c.target.filter.conf_threshold = tg.value("conf_threshold", c.target.filter.conf_threshold);
    c.metrics.per_frame = section("metrics").value("per_frame", c.metrics.per_frame);
    const Json& p = section("paths");
    c.paths.model = p.value("model", c.paths.model);
    c.paths.mocap = p.value("mocap", c.paths.mocap);
    c.paths.checkpoint = p.value("checkpoint", c.paths.checkpoint);
    c.paths.target = p.value("target", c.paths.target);
    c.paths.selection = p.value("selection", c.paths.selection);
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::Config, std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  if (path.empty()) return RunConfig{};
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot read config " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::Parse, "config " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace k2m
