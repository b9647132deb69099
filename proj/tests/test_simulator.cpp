#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "calib/simulator.hpp"

#include <algorithm>
#include <map>
#include <tuple>

using namespace calib;

namespace {

ScenarioConfig small_scenario() {
  ScenarioConfig cfg;
  cfg.camera_count = 4;
  cfg.duration_s = 5.0;
  cfg.person_heights = {1.7};
  cfg.pixel_noise_sigma = 0;
  cfg.timestamp_jitter_sigma_ns = 0;
  cfg.joint_dropout_prob = 0;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST_CASE("generate_scene: deterministic given the seed") {
  auto cfg = small_scenario();
  GroundTruth a = generate_scene(cfg);
  GroundTruth b = generate_scene(cfg);
  REQUIRE(a.frames.size() == b.frames.size());
  for (size_t f = 0; f < a.frames.size(); ++f)
    for (size_t p = 0; p < a.frames[f].size(); ++p)
      for (int k = 0; k < 17; ++k)
        CHECK((a.frames[f][p][size_t(k)] - b.frames[f][p][size_t(k)]).norm() == 0.0);
  for (const auto& [sid, pose] : a.camera_poses)
    CHECK(pose.is_approx(b.camera_poses.at(sid), 1e-300));
}

TEST_CASE("generate_scene: camera 0 is gauge-normalized to identity") {
  GroundTruth gt = generate_scene(small_scenario());
  CHECK(gt.camera_poses.at(0).is_approx(Pose3(), 1e-12));
}

TEST_CASE("generate_scene: template scales with person height") {
  auto cfg = small_scenario();
  cfg.person_heights = {2.0};
  GroundTruth gt = generate_scene(cfg);
  const auto& joints = gt.frames[10][0];
  double extent = (joints[0] - joints[15]).norm();  // nose to left ankle
  CHECK(extent == doctest::Approx(2.0).epsilon(0.025));
  // torso height between shoulder and hip midpoints
  Vec3 sh = 0.5 * (joints[5] + joints[6]);
  Vec3 hip = 0.5 * (joints[11] + joints[12]);
  CHECK((sh - hip).norm() == doctest::Approx(0.30 * 2.0).epsilon(0.01));
}

TEST_CASE("generate_scene: trajectories stay inside room bounds") {
  auto cfg = small_scenario();
  cfg.duration_s = 60.0;
  cfg.person_heights = {1.7, 1.7};
  GroundTruth gt = generate_scene(cfg);
  // walkers are clamped to [-e,e]^2 before the rigid gauge change, so any two
  // pelvis positions can differ by at most the room diagonal (plus hip sway)
  double bound = 2.0 * std::sqrt(2.0) * cfg.room_half_extent + 0.25;
  std::vector<Vec3> pelves;
  for (const auto& frame : gt.frames)
    for (const auto& person : frame)
      pelves.push_back(0.5 * (person[11] + person[12]));
  for (size_t i = 0; i < pelves.size(); i += 7)
    for (size_t j = i + 1; j < pelves.size(); j += 13)
      CHECK((pelves[i] - pelves[j]).norm() <= bound);
}

TEST_CASE("render_detections: noise-free detections equal exact projections") {
  auto cfg = small_scenario();
  GroundTruth gt = generate_scene(cfg);
  RenderedStreams streams = render_detections(gt, cfg);
  REQUIRE(streams.per_sensor.size() == 4);
  int checked = 0;
  // identities let us map detections back to true persons
  std::map<std::tuple<int, int64_t, int>, int> ident;
  for (const auto& id : streams.identities)
    ident[{id.sensor_id, id.frame, id.person_index}] = id.true_person;

  for (int sid = 0; sid < 4; ++sid) {
    const auto& pose = gt.camera_poses.at(sid);
    const auto& intr = gt.intrinsics.at(sid);
    for (const auto& msg : streams.per_sensor[size_t(sid)]) {
      // recover the frame from the timestamp (zero jitter)
      auto it = std::find(gt.frame_times_ns.begin(), gt.frame_times_ns.end(),
                          msg.timestamp_ns);
      REQUIRE(it != gt.frame_times_ns.end());
      size_t frame = size_t(it - gt.frame_times_ns.begin());
      for (const auto& pd : msg.persons) {
        int truth = ident.at({sid, int64_t(frame), pd.person_index});
        for (const auto& [jid, det] : pd.joints) {
          Vec2 exact = project(intr, pose, gt.frames[frame][size_t(truth)][size_t(jid)]);
          CHECK((det.pixel() - exact).norm() < 1e-9);
          ++checked;
        }
      }
    }
  }
  CHECK(checked > 1000);
}

TEST_CASE("render_detections: empirical pixel noise matches sigma") {
  auto cfg = small_scenario();
  cfg.pixel_noise_sigma = 2.0;
  cfg.duration_s = 30.0;
  GroundTruth gt = generate_scene(cfg);
  RenderedStreams streams = render_detections(gt, cfg);
  std::map<std::tuple<int, int64_t, int>, int> ident;
  for (const auto& id : streams.identities)
    ident[{id.sensor_id, id.frame, id.person_index}] = id.true_person;
  double sum2 = 0;
  int n = 0;
  for (int sid = 0; sid < 4; ++sid) {
    for (const auto& msg : streams.per_sensor[size_t(sid)]) {
      auto it = std::find(gt.frame_times_ns.begin(), gt.frame_times_ns.end(),
                          msg.timestamp_ns);
      size_t frame = size_t(it - gt.frame_times_ns.begin());
      for (const auto& pd : msg.persons) {
        int truth = ident.at({sid, int64_t(frame), pd.person_index});
        for (const auto& [jid, det] : pd.joints) {
          Vec2 res = det.pixel() -
                     project(gt.intrinsics.at(sid), gt.camera_poses.at(sid),
                             gt.frames[frame][size_t(truth)][size_t(jid)]);
          sum2 += res.squaredNorm();
          n += 2;
        }
      }
    }
  }
  REQUIRE(n > 10000);
  double sigma = std::sqrt(sum2 / n);
  CHECK(sigma == doctest::Approx(2.0).epsilon(0.05));
}

TEST_CASE("render_detections: occluder blocks the line of sight") {
  auto cfg = small_scenario();
  cfg.person_heights = {1.7};
  GroundTruth gt = generate_scene(cfg);
  // wall between camera 2 and the whole room
  const Vec3 cam2 = gt.camera_poses.at(2).translation();
  OccluderBox box;
  // huge slab right in front of camera 2 (in gauge-frame coordinates)
  Vec3 toward_room = -cam2.normalized();
  Vec3 center = cam2 + 0.3 * toward_room;
  box.min = center - Vec3(1.5, 1.5, 1.5);
  box.max = center + Vec3(1.5, 1.5, 1.5);
  cfg.occluders.push_back(box);
  RenderedStreams streams = render_detections(gt, cfg);
  // camera 2 inside the slab margin sees nothing; others still see persons
  CHECK(streams.per_sensor[2].empty());
  CHECK_FALSE(streams.per_sensor[0].empty());
}

TEST_CASE("render_detections: confidences in [0.6,1] by default") {
  auto cfg = small_scenario();
  GroundTruth gt = generate_scene(cfg);
  RenderedStreams streams = render_detections(gt, cfg);
  for (const auto& stream : streams.per_sensor)
    for (const auto& msg : stream)
      for (const auto& pd : msg.persons)
        for (const auto& [jid, det] : pd.joints) {
          CHECK(det.confidence >= 0.6);
          CHECK(det.confidence <= 1.0);
        }
}

TEST_CASE("perturb_calibration: exact magnitudes, camera 0 untouched") {
  auto cfg = small_scenario();
  GroundTruth gt = generate_scene(cfg);

  auto exact = perturb_calibration(gt, 0.0, 0.0, 5);
  for (const auto& [sid, pose] : exact)
    CHECK(pose.is_approx(gt.camera_poses.at(sid), 1e-12));

  auto perturbed = perturb_calibration(gt, 0.25, 10.0, 5);
  CHECK(perturbed.at(0).is_approx(gt.camera_poses.at(0), 1e-12));
  for (const auto& [sid, pose] : perturbed) {
    if (sid == 0) continue;
    const auto& truth = gt.camera_poses.at(sid);
    CHECK((pose.translation() - truth.translation()).norm() ==
          doctest::Approx(0.25).epsilon(1e-9));
    CHECK(rad2deg(rotation_angle(pose.rotation(), truth.rotation())) ==
          doctest::Approx(10.0).epsilon(1e-9));
  }
}

TEST_CASE("scenario config validation") {
  ScenarioConfig bad;
  bad.camera_count = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(scenario_from_json(nlohmann::json{{"camera_count", 1}}),
                  ConfigError);
}
