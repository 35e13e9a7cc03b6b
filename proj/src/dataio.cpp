#include "key2mesh/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "key2mesh/error.hpp"

namespace k2m {
namespace {

// Visibility from confidence, renormalisation, and the minimum-count rule.
// Returns false when the frame must be dropped.
bool finish_frame(DetectionSample& s, const DetectionFilter& filter) {
  const std::size_t k = s.confidence.size();
  s.vis = Tensor({k});
  std::size_t visible = 0;
  for (std::size_t i = 0; i < k; ++i) {
    if (s.confidence[i] > filter.conf_threshold) {
      s.vis[i] = 1.0;
      ++visible;
    } else {
      s.keypoints_px(i, 0) = s.keypoints_px(i, 1) = 0.0;
    }
  }
  if (visible < std::max<std::size_t>(filter.min_visible, 2)) return false;
  try {
    auto [x, norm] = normalize_keypoints(s.keypoints_px, s.vis.span());
    s.input = std::move(x);
    s.norm = norm;
  } catch (const Error& e) {
    if (e.code() == ErrorCode::Degenerate) return false;
    throw;
  }
  return true;
}

double clipped_normal(Rng& rng, double mean, double sd, double lo, double hi) {
  return std::clamp(rng.normal(mean, sd), lo, hi);
}

}  // namespace

void KeypointMap::validate() const {
  std::set<int> seen;
  for (std::size_t i = 0; i < mapping.size(); ++i) {
    const int m = mapping[i];
    if (m < 0) continue;
    if (static_cast<std::size_t>(m) >= source_count) {
      throw Error(ErrorCode::Config, "keypoint map entry " + std::to_string(i) + " -> " +
                                         std::to_string(m) + " exceeds source count " +
                                         std::to_string(source_count));
    }
    if (!seen.insert(m).second) {
      throw Error(ErrorCode::Config, "keypoint map reuses source index " + std::to_string(m));
    }
  }
}

KeypointMap KeypointMap::identity(std::size_t k) {
  KeypointMap m;
  m.source_count = k;
  for (std::size_t i = 0; i < k; ++i) m.mapping.push_back(static_cast<int>(i));
  return m;
}

KeypointMap KeypointMap::body25_toy() {
  KeypointMap m;
  m.source_count = 25;
  m.mapping = {5, 6, 7, 2, 3, 4, 12, 13, 14, 9, 10, 11};
  return m;
}

KeypointMap KeypointMap::from_spec(const std::string& spec, std::size_t k) {
  KeypointMap m;
  if (spec.empty() || spec == "identity") {
    m = identity(k);
  } else if (spec == "body25") {
    m = body25_toy();
  } else {
    std::ifstream in(spec);
    if (!in) throw Error(ErrorCode::Io, "cannot open keypoint map " + spec);
    try {
      const Json j = Json::parse(in);
      m.source_count = j.at("source_count").get<std::size_t>();
      m.mapping = j.at("mapping").get<std::vector<int>>();
    } catch (const Json::exception& e) {
      throw Error(ErrorCode::Parse, "keypoint map " + spec + ": " + e.what());
    }
  }
  if (m.size() != k) {
    throw Error(ErrorCode::Config, "keypoint map has " + std::to_string(m.size()) +
                                       " entries, model has " + std::to_string(k) + " keypoints");
  }
  m.validate();
  return m;
}

DetectionSet load_detections(const std::filesystem::path& path, const KeypointMap& map,
                             const DetectionFilter& filter) {
  map.validate();
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  DetectionSet set;
  const std::size_t k = map.size();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) {
      continue;
    }
    auto fail = [&](const std::string& why) {
      return Error(ErrorCode::Parse, path.string() + ":" + std::to_string(lineno) + ": " + why);
    };
    DetectionSample s;
    try {
      const Json j = Json::parse(line);
      s.frame = j.at("frame").get<std::int64_t>();
      const Json& kps = j.at("keypoints");
      if (!kps.is_array() || kps.size() != map.source_count) {
        throw fail("expected " + std::to_string(map.source_count) + " keypoints");
      }
      s.keypoints_px = Tensor({k, 2});
      s.confidence = Tensor({k});
      for (std::size_t i = 0; i < k; ++i) {
        if (map.mapping[i] < 0) continue;
        const Json& t = kps.at(static_cast<std::size_t>(map.mapping[i]));
        if (!t.is_array() || t.size() != 3) throw fail("keypoint is not an [x, y, c] triple");
        const double x = t[0].get<double>(), y = t[1].get<double>(), c = t[2].get<double>();
        if (!(c >= 0.0 && c <= 1.0)) throw fail("confidence outside [0, 1]");
        if (c > 0.0 && !(std::isfinite(x) && std::isfinite(y))) throw fail("non-finite coordinate");
        s.keypoints_px(i, 0) = x;
        s.keypoints_px(i, 1) = y;
        s.confidence[i] = c;
      }
      if (j.contains("theta") && j.contains("beta")) {
        const auto theta = j.at("theta").get<std::vector<double>>();
        const auto beta = j.at("beta").get<std::vector<double>>();
        if (theta.size() % 3 != 0 || beta.size() != kNumBetas) throw fail("bad ground truth size");
        s.theta = Tensor({theta.size() / 3, 3}, theta);
        s.beta = Tensor({kNumBetas}, beta);
        s.has_ground_truth = true;
      }
    } catch (const Json::exception& e) {
      throw fail(e.what());
    }
    ++set.total;
    if (finish_frame(s, filter)) {
      set.frames.push_back(std::move(s));
    } else {
      ++set.skipped;
    }
  }
  return set;
}

void write_detections(const std::filesystem::path& path, const std::vector<DetectionSample>& samples,
                      const KeypointMap& map, bool with_ground_truth) {
  map.validate();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  for (const DetectionSample& s : samples) {
    if (s.confidence.size() != map.size()) {
      throw Error(ErrorCode::Dimension, "sample keypoint count does not match the keypoint map");
    }
    Json kps = Json::array();
    for (std::size_t src = 0; src < map.source_count; ++src) kps.push_back({0.0, 0.0, 0.0});
    for (std::size_t i = 0; i < map.size(); ++i) {
      if (map.mapping[i] < 0) continue;
      kps[static_cast<std::size_t>(map.mapping[i])] = {s.keypoints_px(i, 0), s.keypoints_px(i, 1),
                                                       s.confidence[i]};
    }
    Json j = {{"frame", s.frame}, {"keypoints", kps}};
    if (with_ground_truth && s.has_ground_truth) {
      j["theta"] = s.theta.values();
      j["beta"] = s.beta.values();
    }
    out << j.dump() << '\n';
  }
  if (!out) throw Error(ErrorCode::Io, "write failed for " + path.string());
}

DetectionSet filter_samples(const std::vector<DetectionSample>& samples, const DetectionFilter& filter) {
  DetectionSet set;
  for (DetectionSample s : samples) {
    ++set.total;
    if (finish_frame(s, filter)) {
      set.frames.push_back(std::move(s));
    } else {
      ++set.skipped;
    }
  }
  return set;
}

DetectionSet synth_target(const MocapSet& mocap, std::size_t begin, std::size_t end,
                          const BodyModel& model, const FixedCamera& cam, const AugConfig& aug,
                          std::uint64_t seed, const DetectionFilter& filter) {
  std::vector<DetectionSample> raw;
  end = std::min(end, mocap.size());
  for (std::size_t i = begin; i < end; ++i) {
    raw.push_back(make_detection_sample(mocap, i, model, cam, aug, seed));
  }
  return filter_samples(raw, filter);
}

MocapSet synth_mocap(std::uint64_t seed, std::size_t n, const BodyModel& model, double pose_spread,
                     const FixedCamera& cam) {
  if (n == 0) throw Error(ErrorCode::Validation, "synth_mocap needs n >= 1");
  if (!(pose_spread >= 0.0)) throw Error(ErrorCode::Validation, "pose_spread must be >= 0");
  const std::size_t K = model.num_joints;
  const double s = pose_spread;

  // Per-joint axis-angle priors (mean, sd, half-range about the mean) in
  // radians. The body faces -z at zero yaw: arms hang down and reach
  // forward, hips flex forward, knees fold backward.
  struct Prior {
    double mean[3];
    double sd[3];
    double lim[3];
  };
  auto prior_for = [](std::size_t j) -> Prior {
    switch (j) {
      case 0: return {{0, 0, 0}, {0.1, 0.1, 0.1}, {0.3, 0.3, 0.3}};             // pelvis
      case 1:
      case 2: return {{0.08, 0, 0}, {0.12, 0.1, 0.08}, {0.4, 0.3, 0.25}};        // spine, chest
      case 3: return {{0, 0, 0}, {0.12, 0.2, 0.1}, {0.3, 0.5, 0.3}};             // head
      case 4: return {{0, 0.35, -1.0}, {0.25, 0.45, 0.45}, {0.6, 1.2, 1.1}};     // left shoulder
      case 7: return {{0, -0.35, 1.0}, {0.25, 0.45, 0.45}, {0.6, 1.2, 1.1}};     // right shoulder
      case 5:
      case 8: return {{0, 0, 0}, {0.08, 0, 0.08}, {0.2, 0, 0.2}};                // elbows, hinge below
      case 6:
      case 9: return {{0, 0, 0}, {0.15, 0.15, 0.15}, {0.4, 0.4, 0.4}};           // wrists
      case 10:
      case 13: return {{0.3, 0, 0}, {0.4, 0.15, 0.15}, {1.1, 0.4, 0.4}};         // hips
      case 11:
      case 14: return {{0, 0, 0}, {0, 0.04, 0.04}, {0, 0.1, 0.1}};               // knees, hinge below
      case 12:
      case 15: return {{0, 0, 0}, {0.12, 0.1, 0.1}, {0.3, 0.3, 0.3}};            // ankles
      default: return {{0, 0, 0}, {0.08, 0.08, 0.08}, {0.2, 0.2, 0.2}};
    }
  };

  MocapSet set;
  set.poses = Tensor({n, K, 3});
  set.betas = Tensor({n, kNumBetas});
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, i, 0x4d43'5031));
    for (int attempt = 0;; ++attempt) {
      std::vector<double> theta(3 * K, 0.0), beta(kNumBetas, 0.0);
      for (std::size_t j = 0; j < K; ++j) {
        const Prior p = prior_for(j);
        for (int a = 0; a < 3; ++a) {
          const double mean = s * p.mean[a], sd = s * p.sd[a], lim = s * p.lim[a];
          theta[3 * j + a] = sd > 0 ? clipped_normal(rng, mean, sd, mean - lim, mean + lim) : mean;
        }
        if (s > 0 && (j == 5 || j == 8)) {
          const double flex = std::min(std::abs(rng.normal(0.0, 0.8 * s)), 2.3 * s);
          theta[3 * j + 1] = j == 5 ? flex : -flex;
        }
        if (s > 0 && (j == 11 || j == 14)) {
          theta[3 * j + 0] = -std::min(std::abs(rng.normal(0.0, 0.6 * s)), 2.2 * s);
        }
      }
      for (double& b : beta) b = clipped_normal(rng, 0.0, 0.75, -3.0, 3.0);
      for (double& t : theta) t = round_f32(t);
      for (double& b : beta) b = round_f32(b);
      bool ok = true;
      try {
        const SkinResult sk = skin(model, pose_to_matrices(theta, K), beta);
        project(regress_keypoints(sk.vertices, model.keypoint_regressor), cam);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::BehindCamera || attempt >= 100) throw;
        ok = false;
      }
      if (!ok) continue;
      std::copy(theta.begin(), theta.end(), set.poses.data() + i * 3 * K);
      std::copy(beta.begin(), beta.end(), set.betas.data() + i * kNumBetas);
      break;
    }
  }
  return set;
}

void export_features(const std::filesystem::path& path, const Tensor& features,
                     const std::string& which, const Json& config_echo) {
  TensorArchive ar;
  ar.put("features", features);
  ar.meta()["version"] = 1;
  ar.meta()["which"] = which;
  ar.meta()["config"] = config_echo;
  ar.save(path, "K2MF");
}

Tensor load_features(const std::filesystem::path& path) {
  return TensorArchive::load(path, "K2MF").get("features");
}

}  // namespace k2m
