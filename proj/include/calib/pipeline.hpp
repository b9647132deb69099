#pragma once

// Online orchestration: synchronization -> preprocessing -> association ->
// bounded hypothesis queue -> selection -> factor graph solve -> Kalman
// refinement, as two decoupled stages.

#include "calib/association.hpp"
#include "calib/optimizer.hpp"
#include "calib/refinement.hpp"
#include "calib/sensors.hpp"

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>

namespace calib {

struct CameraSetMismatch : Error {
  explicit CameraSetMismatch(const std::string& msg) : Error(msg) {}
};

// Bounded ring buffer of person hypotheses; eviction is strictly oldest-first.
class HypothesisQueue {
 public:
  explicit HypothesisQueue(size_t capacity) : capacity_(capacity) {}

  void push(PersonHypothesis h) {
    std::lock_guard<std::mutex> lock(mutex_);
    if (buffer_.size() == capacity_) {
      buffer_.pop_front();
      ++evictions_;
    }
    buffer_.push_back(std::move(h));
  }

  // insertion-ordered snapshot (oldest first)
  std::vector<PersonHypothesis> snapshot() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return {buffer_.begin(), buffer_.end()};
  }

  size_t size() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return buffer_.size();
  }
  uint64_t evictions() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return evictions_;
  }

 private:
  size_t capacity_;
  mutable std::mutex mutex_;
  std::deque<PersonHypothesis> buffer_;
  uint64_t evictions_ = 0;
};

struct PipelineConfig {
  FilterConfig filter;
  AssociationConfig association;
  OptimizerConfig optimizer;
  RefinementConfig refinement;
  int64_t sync_window_ns = 33'000'000;
  size_t queue_capacity = 500;
  int cycle_budget = 300;
  // Stage B waits until the queue holds this many hypotheses (capped by the
  // queue capacity) before the first solve: the very first selections would
  // otherwise be drawn from a handful of hypotheses and a single bad solve
  // at full Kalman gain can throw the calibration beyond recovery.
  size_t warmup_hypotheses = 150;
  // Per-camera chi-square bound on the squared innovation, whitened by the
  // initial pose uncertainty plus the measurement covariance; solves landing
  // implausibly far from the current estimate are rejected.  99% quantile of
  // chi-square with 6 dof.  <= 0 disables.
  double innovation_gate = 16.81;
  // Residual trimming rounds inside each cycle: hypotheses whose mean
  // reprojection error under the fresh solution exceeds
  // max(3 x median, 6 px) are dropped and the graph is re-solved.
  int trim_rounds = 2;
  // lockstep: stage B runs once per `framesets_per_cycle` processed framesets
  // (deterministic); otherwise stage B free-runs on its own thread
  bool lockstep = true;
  int framesets_per_cycle = 6;
  uint64_t seed = 1;
  std::string trace_path;
};

struct CycleTrace {
  int64_t cycle = 0;
  double wall_ms = 0;
  double mean_pos_err_m = 0;
  double max_pos_err_m = 0;
  double mean_rot_err_deg = 0;
  double max_rot_err_deg = 0;
  double mean_reproj_px = 0;
  int64_t queue_depth = 0;
  int iterations = 0;
  double final_cost = 0;
};

struct EvaluationResult {
  std::map<int, double> position_error_m;
  std::map<int, double> orientation_error_deg;
  double pos_avg = 0, pos_std = 0, pos_min = 0, pos_max = 0;
  double rot_avg = 0, rot_std = 0, rot_min = 0, rot_max = 0;
};

// Rigid (scale = 1) Umeyama alignment of estimated camera centers onto the
// reference, then per-camera translation and shortest-arc rotation errors.
inline EvaluationResult evaluate_against_reference(
    const CalibrationState& state, const std::map<int, Pose3>& reference) {
  if (state.estimates.size() != reference.size())
    throw CameraSetMismatch("camera sets differ in size");
  std::vector<Vec3> est_centers, ref_centers;
  std::vector<int> ids;
  for (const auto& [sid, e] : state.estimates) {
    if (!reference.count(sid))
      throw CameraSetMismatch("camera " + std::to_string(sid) + " not in reference");
    est_centers.push_back(e.pose.translation());
    ref_centers.push_back(reference.at(sid).translation());
    ids.push_back(sid);
  }
  UmeyamaResult align = umeyama_align(est_centers, ref_centers, false);
  Pose3 T(align.rotation, align.translation);

  EvaluationResult out;
  std::vector<double> pos, rot;
  for (int sid : ids) {
    Pose3 aligned = T * state.estimates.at(sid).pose;
    const Pose3& ref = reference.at(sid);
    double pe = (aligned.translation() - ref.translation()).norm();
    double re = rad2deg(rotation_angle(aligned.rotation(), ref.rotation()));
    out.position_error_m[sid] = pe;
    out.orientation_error_deg[sid] = re;
    pos.push_back(pe);
    rot.push_back(re);
  }
  auto stats = [](const std::vector<double>& v, double* avg, double* sd, double* mn,
                  double* mx) {
    *avg = 0;
    for (double x : v) *avg += x;
    *avg /= double(v.size());
    *sd = 0;
    for (double x : v) *sd += (x - *avg) * (x - *avg);
    *sd = std::sqrt(*sd / double(v.size()));
    *mn = *std::min_element(v.begin(), v.end());
    *mx = *std::max_element(v.begin(), v.end());
  };
  stats(pos, &out.pos_avg, &out.pos_std, &out.pos_min, &out.pos_max);
  stats(rot, &out.rot_avg, &out.rot_std, &out.rot_min, &out.rot_max);
  return out;
}

struct RunResult {
  CalibrationState state;
  std::vector<CycleTrace> traces;
  uint64_t framesets_processed = 0;
  uint64_t hypotheses_produced = 0;
  uint64_t stream_errors = 0;
  std::set<int> contributing_sensors;
};

// Hook invoked after each refinement cycle with the published state.
using CycleObserver = std::function<void(int64_t cycle, const CalibrationState&)>;

namespace detail {

struct StageB {
  PipelineConfig cfg;
  std::map<int, CameraIntrinsics> intrinsics;
  std::mt19937_64 rng;
  HypothesisQueue* queue = nullptr;
  std::shared_ptr<const CalibrationState> snapshot;  // published calibration
  std::optional<std::map<int, Pose3>> reference;
  std::vector<CycleTrace>* traces = nullptr;
  CycleObserver observer;
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  int64_t cycle = 0;

  // one optimization + refinement cycle; returns false if nothing to do
  bool run_cycle() {
    auto snap = queue->snapshot();
    if (snap.empty()) return false;
    if (snap.size() < std::min(cfg.warmup_hypotheses, cfg.queue_capacity))
      return false;
    const CalibrationState& state = *snapshot;
    auto selection = select_hypotheses(snap, cfg.optimizer, rng);
    if (selection.empty()) return false;

    // The prior factors tether every solve to the current estimate with the
    // *initial* uncertainty.  Using the shrinking filtered covariance here
    // would double-count information: the solve would be pinned to the state
    // it is supposed to measure, and the Kalman gain would collapse.
    std::map<int, Mat6> prior_covs;
    for (const auto& [sid, est] : state.estimates)
      prior_covs[sid] =
          sid == 0 ? Mat6::Zero() : cfg.refinement.initial_covariance;

    FactorGraph graph;
    try {
      graph = build_graph(selection, state.poses(), prior_covs, intrinsics,
                          cfg.optimizer);
    } catch (const EmptyGraph&) {
      return false;
    }
    CalibrationState next;
    SolveReport report;
    try {
      report = solve(graph, cfg.optimizer);
      for (int round = 0; round < cfg.trim_rounds; ++round) {
        std::vector<double> errs(selection.size());
        for (size_t i = 0; i < selection.size(); ++i)
          errs[i] = reprojection_errors(report.poses, {selection[i]},
                                        intrinsics)
                        .overall_mean;
        std::vector<double> sorted = errs;
        std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2,
                         sorted.end());
        double cut = std::max(3.0 * sorted[sorted.size() / 2], 6.0);
        std::vector<PersonHypothesis> kept;
        for (size_t i = 0; i < selection.size(); ++i)
          if (errs[i] <= cut) kept.push_back(selection[i]);
        if (kept.size() == selection.size() || kept.size() < 5) break;
        selection = std::move(kept);
        graph = build_graph(selection, state.poses(), prior_covs, intrinsics,
                            cfg.optimizer);
        report = solve(graph, cfg.optimizer);
      }
      next = predict(state, 1, cfg.refinement.process_noise);
      std::map<int, std::pair<Pose3, Mat6>> measurement;
      for (const auto& [sid, pose] : report.poses) {
        if (sid == 0) continue;
        auto it = report.pose_covariances.find(sid);
        if (it == report.pose_covariances.end()) continue;
        if (cfg.innovation_gate > 0) {
          Vec6 y = se3_log(next.estimates.at(sid).pose.inverse() * pose);
          Mat6 S = cfg.refinement.initial_covariance + it->second;
          if (y.dot(S.llt().solve(y)) > cfg.innovation_gate) continue;
        }
        measurement[sid] = {pose, it->second};
      }
      next = update(next, measurement);
      next = rescale_to_initial(next);
    } catch (const Error&) {
      // singular system, a pose candidate at the SE(3) log singularity, or a
      // non-PD marginal: skip the cycle, keep the previous estimate
      return false;
    }
    next.cycle_count = ++cycle;
    auto published = std::make_shared<const CalibrationState>(std::move(next));
    std::atomic_store(&snapshot, published);

    CycleTrace trace;
    trace.cycle = cycle;
    trace.wall_ms = std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
    trace.queue_depth = int64_t(queue->size());
    trace.iterations = report.iterations;
    trace.final_cost = report.final_cost;
    if (reference) {
      auto ev = evaluate_against_reference(*published, *reference);
      trace.mean_pos_err_m = ev.pos_avg;
      trace.max_pos_err_m = ev.pos_max;
      trace.mean_rot_err_deg = ev.rot_avg;
      trace.max_rot_err_deg = ev.rot_max;
    }
    trace.mean_reproj_px =
        reprojection_errors(published->poses(), selection, intrinsics).overall_mean;
    traces->push_back(trace);
    if (observer) observer(cycle, *published);
    return true;
  }
};

}  // namespace detail

// Runs the full pipeline over complete per-sensor message streams.  In
// lockstep mode both stages interleave deterministically on one thread; in
// free-running mode stage B loops on its own thread while stage A feeds the
// queue.
inline RunResult run_online(const std::vector<std::vector<DetectionMessage>>& sources,
                            const std::map<int, Pose3>& initial_calibration,
                            const std::map<int, CameraIntrinsics>& intrinsics,
                            const PipelineConfig& cfg,
                            std::optional<std::map<int, Pose3>> reference = std::nullopt,
                            CycleObserver observer = nullptr) {
  if (initial_calibration.size() < 2)
    throw ConfigError("run_online needs at least 2 sensors");
  for (const auto& [sid, pose] : initial_calibration)
    if (!intrinsics.count(sid))
      throw ConfigError("missing intrinsics for sensor " + std::to_string(sid));

  RunResult result;
  result.state = CalibrationState::from_initial(initial_calibration, cfg.refinement);

  HypothesisQueue queue(cfg.queue_capacity);
  detail::StageB stage_b;
  stage_b.cfg = cfg;
  stage_b.intrinsics = intrinsics;
  stage_b.rng.seed(cfg.seed);
  stage_b.queue = &queue;
  stage_b.snapshot = std::make_shared<const CalibrationState>(result.state);
  stage_b.reference = std::move(reference);
  stage_b.traces = &result.traces;
  stage_b.observer = std::move(observer);

  int64_t hypothesis_ids = 0;
  FramesetSynchronizer sync(int(initial_calibration.size()), cfg.sync_window_ns);

  auto process_frameset = [&](const Frameset& fs) {
    Frameset filtered = filter_frameset(fs, cfg.filter);
    if (filtered.empty()) return;
    Frameset undist = undistort_frameset(filtered, intrinsics);
    std::vector<std::pair<int, PersonDetection>> persons;
    for (const auto& [sid, msg] : undist.entries)
      for (const auto& pd : msg.persons) persons.push_back({sid, pd});
    if (persons.empty()) return;
    auto snap = std::atomic_load(&stage_b.snapshot);
    // two-phase association: once the calibration has been refined for a
    // while, widen the threshold to recover many-view hypotheses (small
    // scatter), keeping a proportionally larger ambiguity margin
    AssociationConfig assoc = cfg.association;
    if (assoc.refined_after_cycles >= 0 &&
        snap->cycle_count >= assoc.refined_after_cycles) {
      assoc.match_threshold = assoc.refined_match_threshold;
      assoc.match_margin = assoc.refined_match_margin;
    }
    auto hyps = associate(persons, snap->poses(), intrinsics, assoc,
                          undist.reference_time, &hypothesis_ids);
    for (auto& h : hyps) {
      for (const auto& [sid, v] : h.views) result.contributing_sensors.insert(sid);
      queue.push(std::move(h));
      ++result.hypotheses_produced;
    }
    ++result.framesets_processed;
  };

  // merged time-ordered feed into the synchronizer
  struct Cursor {
    const std::vector<DetectionMessage>* stream;
    size_t pos = 0;
  };
  std::vector<Cursor> cursors;
  for (const auto& s : sources) cursors.push_back({&s, 0});

  auto pump_stage_a = [&](const std::function<void()>& after_frameset) {
    while (true) {
      int next = -1;
      int64_t best = INT64_MAX;
      for (size_t i = 0; i < cursors.size(); ++i) {
        auto& c = cursors[i];
        if (c.pos < c.stream->size() &&
            (*c.stream)[c.pos].timestamp_ns < best) {
          best = (*c.stream)[c.pos].timestamp_ns;
          next = int(i);
        }
      }
      if (next < 0) break;
      sync.push((*cursors[size_t(next)].stream)[cursors[size_t(next)].pos++]);
      while (auto fs = sync.poll()) {
        process_frameset(*fs);
        after_frameset();
      }
    }
    sync.finish_all();
    while (auto fs = sync.poll()) {
      process_frameset(*fs);
      after_frameset();
    }
  };

  if (cfg.lockstep) {
    uint64_t since_cycle = 0;
    pump_stage_a([&] {
      if (++since_cycle >= uint64_t(cfg.framesets_per_cycle) &&
          stage_b.cycle < cfg.cycle_budget) {
        stage_b.run_cycle();
        since_cycle = 0;
      }
    });
    // drain: keep cycling on the remaining queue up to the budget
    while (stage_b.cycle < cfg.cycle_budget && queue.size() > 0) {
      if (!stage_b.run_cycle()) break;
    }
  } else {
    std::atomic<bool> done{false};
    std::thread worker([&] {
      while (!done.load(std::memory_order_acquire) &&
             stage_b.cycle < cfg.cycle_budget) {
        if (!stage_b.run_cycle())
          std::this_thread::sleep_for(std::chrono::milliseconds(2));
      }
    });
    pump_stage_a([] {});
    done.store(true, std::memory_order_release);
    worker.join();
    // drain after sources are exhausted
    while (stage_b.cycle < cfg.cycle_budget && queue.size() > 0) {
      if (!stage_b.run_cycle()) break;
    }
  }

  result.state = *std::atomic_load(&stage_b.snapshot);
  return result;
}

inline std::string trace_csv_header() {
  return "cycle,wall_ms,mean_pos_err_m,max_pos_err_m,mean_rot_err_deg,"
         "max_rot_err_deg,mean_reproj_px,queue_depth,iters,final_cost";
}

inline std::string trace_csv_row(const CycleTrace& t) {
  char buf[320];
  std::snprintf(buf, sizeof(buf), "%lld,%.3f,%.6f,%.6f,%.6f,%.6f,%.4f,%lld,%d,%.8g",
                (long long)t.cycle, t.wall_ms, t.mean_pos_err_m, t.max_pos_err_m,
                t.mean_rot_err_deg, t.max_rot_err_deg, t.mean_reproj_px,
                (long long)t.queue_depth, t.iterations, t.final_cost);
  return buf;
}

}  // namespace calib
