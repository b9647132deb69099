#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "calib/pipeline.hpp"
#include "calib/simulator.hpp"

#include <sstream>

using namespace calib;

namespace {

PersonHypothesis tagged(int64_t id) {
  PersonHypothesis h;
  h.id = id;
  h.center_of_mass = Vec3(double(id), 0, 0);
  return h;
}

struct SimRun {
  GroundTruth gt;
  RenderedStreams streams;
  std::map<int, Pose3> init;
};

SimRun make_sim(uint64_t seed, double duration_s = 30.0, double pos_err = 0.1,
                double rot_err_deg = 5.0) {
  ScenarioConfig cfg;
  cfg.camera_count = 6;
  cfg.duration_s = duration_s;
  cfg.person_heights = {1.70, 1.96};
  cfg.pixel_noise_sigma = 1.0;
  cfg.seed = seed;
  SimRun r;
  r.gt = generate_scene(cfg);
  r.streams = render_detections(r.gt, cfg);
  r.init = perturb_calibration(r.gt, pos_err, rot_err_deg, seed + 100);
  return r;
}

double mean_pos_error(const CalibrationState& state,
                      const std::map<int, Pose3>& reference) {
  return evaluate_against_reference(state, reference).pos_avg;
}

}  // namespace

TEST_CASE("HypothesisQueue: oldest-first eviction at capacity") {
  HypothesisQueue q(10);
  for (int i = 0; i < 100; ++i) q.push(tagged(i));
  CHECK(q.size() == 10);
  CHECK(q.evictions() == 90);
  auto snap = q.snapshot();
  REQUIRE(snap.size() == 10);
  for (int i = 0; i < 10; ++i) CHECK(snap[size_t(i)].id == 90 + i);
}

TEST_CASE("run_online: input validation and empty streams") {
  auto sim = make_sim(1, 2.0);
  PipelineConfig cfg;

  CHECK_THROWS_AS(run_online({}, {{0, Pose3()}}, sim.gt.intrinsics, cfg),
                  ConfigError);
  CHECK_THROWS_AS(
      run_online({}, {{0, Pose3()}, {9, Pose3()}}, sim.gt.intrinsics, cfg),
      ConfigError);  // sensor 9 has no intrinsics

  std::vector<std::vector<DetectionMessage>> empty(6);
  auto res = run_online(empty, sim.init, sim.gt.intrinsics, cfg);
  CHECK(res.traces.empty());
  CHECK(res.framesets_processed == 0);
  CHECK(res.hypotheses_produced == 0);
  CHECK(res.contributing_sensors.empty());
  for (const auto& [sid, est] : res.state.estimates)
    CHECK(est.pose.is_approx(sim.init.at(sid), 1e-300));
}

TEST_CASE("run_online: lockstep runs are deterministic") {
  auto sim = make_sim(2, 15.0);
  PipelineConfig cfg;
  cfg.cycle_budget = 40;
  cfg.seed = 7;
  auto a = run_online(sim.streams.per_sensor, sim.init, sim.gt.intrinsics, cfg,
                      sim.gt.camera_poses);
  auto b = run_online(sim.streams.per_sensor, sim.init, sim.gt.intrinsics, cfg,
                      sim.gt.camera_poses);
  CHECK(a.framesets_processed == b.framesets_processed);
  CHECK(a.hypotheses_produced == b.hypotheses_produced);
  REQUIRE(a.traces.size() == b.traces.size());
  CHECK(a.traces.size() > 5);
  for (size_t i = 0; i < a.traces.size(); ++i) {
    CHECK(a.traces[i].cycle == b.traces[i].cycle);
    CHECK(a.traces[i].mean_pos_err_m == b.traces[i].mean_pos_err_m);
    CHECK(a.traces[i].mean_rot_err_deg == b.traces[i].mean_rot_err_deg);
    CHECK(a.traces[i].final_cost == b.traces[i].final_cost);
    CHECK(a.traces[i].queue_depth == b.traces[i].queue_depth);
    CHECK(a.traces[i].iterations == b.traces[i].iterations);
  }
  for (const auto& [sid, est] : a.state.estimates) {
    CHECK((est.pose.translation() -
           b.state.estimates.at(sid).pose.translation()).norm() == 0.0);
    CHECK(est.pose.is_approx(b.state.estimates.at(sid).pose, 1e-300));
  }
}

TEST_CASE("run_online: lockstep reduces calibration error") {
  auto sim = make_sim(3, 40.0);
  PipelineConfig cfg;
  cfg.seed = 3;
  auto initial_state = CalibrationState::from_initial(sim.init);
  double err0 = mean_pos_error(initial_state, sim.gt.camera_poses);
  auto res = run_online(sim.streams.per_sensor, sim.init, sim.gt.intrinsics, cfg,
                        sim.gt.camera_poses);
  CHECK(res.contributing_sensors.size() == 6);
  REQUIRE_FALSE(res.traces.empty());
  double err_final = mean_pos_error(res.state, sim.gt.camera_poses);
  CHECK(err_final < 0.5 * err0);
  CHECK(res.traces.back().mean_pos_err_m == doctest::Approx(err_final));
  for (const auto& t : res.traces) {
    CHECK(t.queue_depth <= int64_t(cfg.queue_capacity));
    CHECK(t.final_cost >= 0);
  }
}

TEST_CASE("run_online: observer fires every cycle and scale stays pinned") {
  auto sim = make_sim(4, 15.0);
  PipelineConfig cfg;
  cfg.cycle_budget = 30;
  int64_t last_cycle = 0;
  int calls = 0;
  std::vector<Vec3> init_centers;
  for (const auto& [sid, pose] : sim.init) init_centers.push_back(pose.translation());
  auto observer = [&](int64_t cycle, const CalibrationState& state) {
    CHECK(cycle == last_cycle + 1);
    last_cycle = cycle;
    ++calls;
    std::vector<Vec3> centers;
    for (const auto& [sid, est] : state.estimates)
      centers.push_back(est.pose.translation());
    UmeyamaResult u = umeyama_align(centers, init_centers, true);
    CHECK(std::abs(u.scale - 1.0) < 1e-6);
  };
  auto res = run_online(sim.streams.per_sensor, sim.init, sim.gt.intrinsics, cfg,
                        sim.gt.camera_poses, observer);
  CHECK(calls == int(res.traces.size()));
  CHECK(calls > 0);
  CHECK(calls <= cfg.cycle_budget);
}

TEST_CASE("run_online: free-running mode converges too") {
  auto sim = make_sim(5, 30.0);
  PipelineConfig cfg;
  cfg.lockstep = false;
  cfg.cycle_budget = 600;
  auto initial_state = CalibrationState::from_initial(sim.init);
  double err0 = mean_pos_error(initial_state, sim.gt.camera_poses);
  auto res = run_online(sim.streams.per_sensor, sim.init, sim.gt.intrinsics, cfg,
                        sim.gt.camera_poses);
  CHECK_FALSE(res.traces.empty());
  CHECK(mean_pos_error(res.state, sim.gt.camera_poses) < err0);
  // cycle numbers are consecutive even across threads
  for (size_t i = 0; i < res.traces.size(); ++i)
    CHECK(res.traces[i].cycle == int64_t(i) + 1);
}

TEST_CASE("evaluate_against_reference: invariant to a rigid transform") {
  auto init = std::map<int, Pose3>{
      {0, Pose3()},
      {1, Pose3(so3_exp(Vec3(0, 0.3, 0)), Vec3(2, 0, 0))},
      {2, Pose3(so3_exp(Vec3(0.2, 0, 0.1)), Vec3(-1, 1.5, 0.3))}};
  auto state = CalibrationState::from_initial(init);

  auto ev0 = evaluate_against_reference(state, init);
  CHECK(ev0.pos_avg < 1e-12);
  CHECK(ev0.rot_avg < 1e-9);

  // apply one global rigid transform to every estimate
  Pose3 T(so3_exp(Vec3(0.4, -0.2, 0.6)), Vec3(3, -2, 1));
  auto moved = state;
  for (auto& [sid, est] : moved.estimates) est.pose = T * est.pose;
  auto ev1 = evaluate_against_reference(moved, init);
  CHECK(ev1.pos_max < 1e-9);
  CHECK(ev1.rot_max < 1e-6);

  // scale drift is not absorbed by the rigid alignment
  auto scaled = state;
  for (auto& [sid, est] : scaled.estimates)
    est.pose = Pose3(est.pose.quaternion(), 1.5 * est.pose.translation());
  auto ev2 = evaluate_against_reference(scaled, init);
  CHECK(ev2.pos_max > 0.1);

  CHECK(ev2.pos_min <= ev2.pos_avg);
  CHECK(ev2.pos_avg <= ev2.pos_max);

  auto missing = state;
  missing.estimates.erase(2);
  CHECK_THROWS_AS(evaluate_against_reference(missing, init), CameraSetMismatch);
}

TEST_CASE("trace CSV format") {
  CHECK(trace_csv_header() ==
        "cycle,wall_ms,mean_pos_err_m,max_pos_err_m,mean_rot_err_deg,"
        "max_rot_err_deg,mean_reproj_px,queue_depth,iters,final_cost");
  CycleTrace t;
  t.cycle = 3;
  t.wall_ms = 12.5;
  t.queue_depth = 7;
  t.iterations = 4;
  std::string row = trace_csv_row(t);
  CHECK(std::count(row.begin(), row.end(), ',') == 9);
  CHECK(row.substr(0, 2) == "3,");
}
