#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "key2mesh/dataio.hpp"
#include "key2mesh/error.hpp"
#include "support.hpp"

using namespace k2m;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("k2m_test_" + name);
}

void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::trunc);
  out << s;
}

// One frame line with 12 keypoints, the first `confident` of which have c = 0.9.
std::string frame_line(int frame, std::size_t confident, std::size_t k = 12) {
  Json kps = Json::array();
  for (std::size_t i = 0; i < k; ++i) {
    kps.push_back({10.0 * static_cast<double>(i), 5.0 * static_cast<double>(i * i % 7), i < confident ? 0.9 : 0.0});
  }
  return Json{{"frame", frame}, {"keypoints", kps}}.dump() + "\n";
}

const BodyModel& model() {
  static const BodyModel m = make_toy_model(0);
  return m;
}

}  // namespace

TEST_CASE("frames with fewer than six detected keypoints are dropped and counted") {
  const auto path = temp_file("det_filter.jsonl");
  write_text(path, frame_line(0, 5) + frame_line(1, 6) + frame_line(2, 0) + "\n" + frame_line(3, 12));
  const DetectionSet set = load_detections(path, KeypointMap::identity(12));
  CHECK(set.total == 4);
  CHECK(set.skipped == 2);
  REQUIRE(set.frames.size() == 2);
  CHECK(set.frames[0].frame == 1);
  CHECK(set.frames[1].frame == 3);
  for (std::size_t i = 6; i < 12; ++i) {
    CHECK(set.frames[0].vis[i] == 0.0);
    CHECK(set.frames[0].input(i, 0) == 0.0);
  }
  std::filesystem::remove(path);
}

TEST_CASE("malformed records name their line") {
  const auto path = temp_file("det_bad.jsonl");
  const std::string bad_lines[] = {"{\"frame\": 7, \"keypoints\": [[1, 2]]}\n", "not json\n",
                                   "{\"keypoints\": []}\n"};
  for (const std::string& bad : bad_lines) {
    write_text(path, frame_line(0, 12) + "\n" + bad);
    try {
      load_detections(path, KeypointMap::identity(12));
      FAIL("expected Parse");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::Parse);
      CHECK(std::string(e.what()).find(":3:") != std::string::npos);
    }
  }
  std::string conf = frame_line(0, 12);
  conf.replace(conf.find("0.9"), 3, "1.5");
  write_text(path, conf);
  CHECK_THROWS_AS(load_detections(path, KeypointMap::identity(12)), Error);
  std::filesystem::remove(path);
}

TEST_CASE("detections written then read match the in-memory pipeline") {
  const MocapSet mocap = synth_mocap(2, 200, model());
  const FixedCamera cam;
  const DetectionSet direct = synth_target(mocap, 0, 200, model(), cam, AugConfig{}, 13);
  CHECK(direct.total == 200);
  CHECK(direct.frames.size() + direct.skipped == 200);
  for (const KeypointMap& map : {KeypointMap::identity(12), KeypointMap::body25_toy()}) {
    const auto path = temp_file("det_roundtrip.jsonl");
    write_detections(path, direct.frames, map, true);
    const DetectionSet loaded = load_detections(path, map);
    REQUIRE(loaded.frames.size() == direct.frames.size());
    CHECK(loaded.skipped == 0);
    for (std::size_t f = 0; f < loaded.frames.size(); ++f) {
      CHECK(loaded.frames[f].frame == direct.frames[f].frame);
      CHECK(k2m::test::max_abs_diff(loaded.frames[f].input, direct.frames[f].input) <= 1e-6);
      CHECK(loaded.frames[f].vis.values() == direct.frames[f].vis.values());
      CHECK(loaded.frames[f].has_ground_truth);
      CHECK(loaded.frames[f].theta.values() == direct.frames[f].theta.values());
    }
    std::filesystem::remove(path);
  }
}

TEST_CASE("raising the confidence threshold never keeps more frames") {
  const MocapSet mocap = synth_mocap(4, 300, model());
  AugConfig aug;
  aug.occlusion = 0.4;
  std::vector<DetectionSample> raw;
  for (std::size_t i = 0; i < 300; ++i) raw.push_back(make_detection_sample(mocap, i, model(), FixedCamera{}, aug, 3));
  std::size_t prev = raw.size() + 1;
  for (double t : {0.0, 0.05, 0.3, 0.5, 0.7, 0.9, 0.99}) {
    const DetectionSet s = filter_samples(raw, DetectionFilter{6, t});
    CHECK(s.frames.size() <= prev);
    CHECK(s.frames.size() + s.skipped == raw.size());
    prev = s.frames.size();
  }
  CHECK(prev < raw.size());
}

TEST_CASE("keypoint maps") {
  const KeypointMap b = KeypointMap::body25_toy();
  CHECK(b.source_count == 25);
  CHECK(b.mapping == std::vector<int>{5, 6, 7, 2, 3, 4, 12, 13, 14, 9, 10, 11});
  CHECK_NOTHROW(b.validate());
  KeypointMap dup = b;
  dup.mapping[1] = 5;
  CHECK_THROWS_AS(dup.validate(), Error);
  KeypointMap out = b;
  out.mapping[0] = 25;
  CHECK_THROWS_AS(out.validate(), Error);
  CHECK(KeypointMap::from_spec("body25", 12).mapping == b.mapping);
  CHECK_THROWS_AS(KeypointMap::from_spec("body25", 10), Error);

  const auto path = temp_file("map.json");
  write_text(path, R"({"source_count": 4, "mapping": [3, -1, 0]})");
  const KeypointMap f = KeypointMap::from_spec(path.string(), 3);
  CHECK(f.mapping == std::vector<int>{3, -1, 0});

  // an unmapped slot reads as undetected
  const auto det = temp_file("det_map.jsonl");
  write_text(det, R"({"frame": 1, "keypoints": [[1, 2, 0.9], [5, 5, 0.9], [7, 7, 0.9], [3, 4, 0.8]]})" "\n");
  const DetectionSet s = load_detections(det, f, DetectionFilter{2, 0.05});
  REQUIRE(s.frames.size() == 1);
  CHECK(s.frames[0].keypoints_px(0, 0) == 3.0);
  CHECK(s.frames[0].keypoints_px(2, 1) == 2.0);
  CHECK(s.frames[0].vis.values() == std::vector<double>{1, 0, 1});
  std::filesystem::remove(path);
  std::filesystem::remove(det);
}

TEST_CASE("feature export round trips and is deterministic") {
  NetConfig cfg;
  cfg.width = 32;
  Networks nets = init_networks(cfg, 3);
  const MocapSet mocap = synth_mocap(5, 50, model());
  const DetectionSet target = synth_target(mocap, 0, 50, model(), FixedCamera{}, AugConfig{}, 1);
  const Batch batch = make_batch(target.frames);
  const Tensor a = predict(nets.F, nets.H, batch.input).features;
  const Tensor b = predict(nets.F, nets.H, batch.input).features;
  CHECK(a.values() == b.values());
  CHECK(a.rows() == target.frames.size());
  const auto path = temp_file("features.k2mf");
  export_features(path, a, "pretrained", Json{{"seed", 3}});
  const Tensor l = load_features(path);
  CHECK(l.shape() == a.shape());
  CHECK(l.values() == a.values());
  std::filesystem::remove(path);
}
