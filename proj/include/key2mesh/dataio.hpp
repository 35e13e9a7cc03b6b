#pragma once
// Detection ingestion, synthetic mocap and feature export.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "key2mesh/archive.hpp"
#include "key2mesh/body_model.hpp"
#include "key2mesh/datagen.hpp"
#include "key2mesh/network.hpp"

namespace k2m {

/// Model keypoint i reads detector keypoint mapping[i]; -1 leaves it undetected.
struct KeypointMap {
  std::size_t source_count = 0;
  std::vector<int> mapping;

  std::size_t size() const { return mapping.size(); }
  /// Throws Config on out-of-range or duplicate indices.
  void validate() const;

  static KeypointMap identity(std::size_t k);
  /// BODY_25 ordering onto the toy model's 12 limb keypoints.
  static KeypointMap body25_toy();
  /// "identity:<k>", "body25" or a JSON file {"source_count": n, "mapping": [...]}.
  static KeypointMap from_spec(const std::string& spec, std::size_t k);
};

struct DetectionSet {
  std::vector<DetectionSample> frames;
  std::size_t skipped = 0;
  std::size_t total = 0;
};

struct DetectionFilter {
  std::size_t min_visible = 6;
  double conf_threshold = 0.05;
};

/// JSON lines {"frame": int, "keypoints": [[x, y, c], ...]} in detector order,
/// optionally carrying "theta" (K*3) and "beta" (10) ground truth.
/// Frames with fewer than min_visible keypoints above conf_threshold are
/// dropped and counted. Throws Parse naming the line on malformed records.
DetectionSet load_detections(const std::filesystem::path& path, const KeypointMap& map,
                             const DetectionFilter& filter = {});

/// Writes samples in detector order through `map`; unmapped slots are [0, 0, 0].
void write_detections(const std::filesystem::path& path, const std::vector<DetectionSample>& samples,
                      const KeypointMap& map, bool with_ground_truth);

/// Re-derives visibility from confidence and renormalises, applying the
/// same frame filter as load_detections.
DetectionSet filter_samples(const std::vector<DetectionSample>& samples,
                            const DetectionFilter& filter = {});

/// Synthetic target-domain frames: mocap indices [begin, end) through
/// make_detection_sample, then the frame filter.
DetectionSet synth_target(const MocapSet& mocap, std::size_t begin, std::size_t end,
                          const BodyModel& model, const FixedCamera& cam, const AugConfig& aug,
                          std::uint64_t seed, const DetectionFilter& filter = {});

/// Per-joint clipped Gaussian axis-angle poses (hinge-dominant knees and
/// elbows) and shapes beta ~ N(0, 0.75^2) clipped to +-3, float32-rounded.
/// pose_spread scales every joint's spread; 0 yields the rest pose.
MocapSet synth_mocap(std::uint64_t seed, std::size_t n, const BodyModel& model,
                     double pose_spread = 1.0, const FixedCamera& cam = {});

/// B x d eval-mode features written as a single-tensor ".k2mf" archive.
void export_features(const std::filesystem::path& path, const Tensor& features,
                     const std::string& which, const Json& config_echo);
Tensor load_features(const std::filesystem::path& path);

}  // namespace k2m
