#pragma once

// Command-line frontend: simulate scenarios, run calibration from files or a
// live socket, evaluate against a reference, replay recordings over TCP.

#include "calib/pipeline.hpp"
#include "calib/simulator.hpp"
#include "calib/tcp.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

namespace calib {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitUnderconstrained = 3;

namespace cli_detail {

inline json load_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return j;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

inline std::string detections_filename(int sensor_id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "detections_%02d.jsonl", sensor_id);
  return buf;
}

// loads every detections_*.jsonl in the directory; malformed records are
// skipped and counted
inline std::vector<std::vector<DetectionMessage>> load_streams(
    const fs::path& dir, uint64_t* stream_errors) {
  std::map<int, std::vector<DetectionMessage>> by_sensor;
  int max_sensor = -1;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() != ".jsonl") continue;
    std::ifstream in(entry.path());
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      try {
        DetectionMessage msg = parse_message(line);
        by_sensor[msg.sensor_id].push_back(std::move(msg));
        max_sensor = std::max(max_sensor, by_sensor.rbegin()->first);
      } catch (const Error& e) {
        if (stream_errors) ++(*stream_errors);
      }
    }
  }
  std::vector<std::vector<DetectionMessage>> streams(size_t(max_sensor + 1));
  for (auto& [sid, msgs] : by_sensor) {
    std::sort(msgs.begin(), msgs.end(),
              [](const DetectionMessage& a, const DetectionMessage& b) {
                return a.timestamp_ns < b.timestamp_ns;
              });
    streams[size_t(sid)] = std::move(msgs);
  }
  return streams;
}

}  // namespace cli_detail

// ---------------------------------------------------------------------------

inline int cmd_simulate(const std::string& scenario_file, const std::string& out_dir) {
  std::vector<fs::path> written;
  try {
    ScenarioConfig cfg = scenario_from_json(cli_detail::load_json(scenario_file));
    GroundTruth gt = generate_scene(cfg);
    RenderedStreams streams = render_detections(gt, cfg);

    fs::create_directories(out_dir);
    for (size_t sid = 0; sid < streams.per_sensor.size(); ++sid) {
      fs::path p = fs::path(out_dir) / cli_detail::detections_filename(int(sid));
      std::ofstream out(p);
      for (const auto& msg : streams.per_sensor[sid])
        out << message_to_json(msg).dump() << "\n";
      written.push_back(p);
    }
    fs::path truth_path = fs::path(out_dir) / "ground_truth.json";
    cli_detail::write_text(truth_path,
                           cameras_to_json(gt.camera_poses, gt.intrinsics).dump(2));
    written.push_back(truth_path);

    fs::path traj_path = fs::path(out_dir) / "trajectories.csv";
    {
      std::ofstream out(traj_path);
      out << "frame,person,joint,x,y,z\n";
      for (size_t f = 0; f < gt.frames.size(); ++f)
        for (size_t p = 0; p < gt.frames[f].size(); ++p)
          for (int k = 0; k < 17; ++k) {
            const Vec3& X = gt.frames[f][p][size_t(k)];
            out << f << "," << p << "," << k << "," << X.x() << "," << X.y() << ","
                << X.z() << "\n";
          }
    }
    written.push_back(traj_path);
    std::cout << "wrote " << streams.per_sensor.size() << " detection streams to "
              << out_dir << "\n";
    return kExitOk;
  } catch (const std::exception& e) {
    for (const auto& p : written) fs::remove(p);
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
}

struct CalibrateOptions {
  std::string detections_dir;
  int listen_port = -1;
  std::string config_file;
  std::string init_file;
  std::string out_file = "calibration.json";
  std::string trace_file;
  std::string reference_file;
  int cycle_budget = 300;
  int framesets_per_cycle = 6;
  uint64_t seed = 1;
  bool free_running = false;
};

inline int cmd_calibrate(const CalibrateOptions& opt) {
  try {
    CameraConfig config = cameras_from_json(cli_detail::load_json(opt.config_file));
    std::map<int, Pose3> init = config.poses;
    if (!opt.init_file.empty())
      init = cameras_from_json(cli_detail::load_json(opt.init_file)).poses;
    for (const auto& [sid, pose] : init)
      if (!config.intrinsics.count(sid))
        throw ConfigError("no intrinsics for sensor " + std::to_string(sid));
    if (init.size() < 2) throw ConfigError("need at least 2 cameras");

    std::optional<std::map<int, Pose3>> reference;
    if (!opt.reference_file.empty())
      reference = cameras_from_json(cli_detail::load_json(opt.reference_file)).poses;

    uint64_t stream_errors = 0;
    std::vector<std::vector<DetectionMessage>> streams;
    if (opt.listen_port >= 0) {
      TcpListener listener(uint16_t(opt.listen_port));
      std::cout << "listening on port " << listener.port() << "\n";
      TcpSocket conn = listener.accept_one();
      streams.resize(init.size());
      std::string record;
      while (conn.recv_record(&record)) {
        try {
          DetectionMessage msg = parse_message(record);
          if (msg.sensor_id < 0 || size_t(msg.sensor_id) >= streams.size())
            throw ValueError("sensor id out of range");
          streams[size_t(msg.sensor_id)].push_back(std::move(msg));
        } catch (const Error&) {
          ++stream_errors;
        }
      }
    } else {
      streams = cli_detail::load_streams(opt.detections_dir, &stream_errors);
      streams.resize(std::max(streams.size(), init.size()));
    }

    PipelineConfig cfg;
    cfg.cycle_budget = opt.cycle_budget;
    cfg.framesets_per_cycle = opt.framesets_per_cycle;
    cfg.seed = opt.seed;
    cfg.lockstep = !opt.free_running;

    RunResult result =
        run_online(streams, init, config.intrinsics, cfg, reference);
    result.stream_errors += stream_errors;

    auto now_ns = std::chrono::duration_cast<std::chrono::nanoseconds>(
                      std::chrono::system_clock::now().time_since_epoch())
                      .count();
    cli_detail::write_text(opt.out_file,
                           calibration_to_json(result.state, now_ns).dump(2));
    // read-back validation
    calibration_from_json(cli_detail::load_json(opt.out_file));

    if (!opt.trace_file.empty()) {
      std::ofstream out(opt.trace_file);
      out << trace_csv_header() << "\n";
      for (const auto& t : result.traces) out << trace_csv_row(t) << "\n";
    }
    std::cout << "cycles: " << result.state.cycle_count
              << "  framesets: " << result.framesets_processed
              << "  hypotheses: " << result.hypotheses_produced
              << "  stream errors: " << result.stream_errors << "\n";
    if (result.contributing_sensors.size() < 2) {
      std::cerr << "error: fewer than 2 cameras contributed observations\n";
      return kExitUnderconstrained;
    }
    return kExitOk;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
}

inline int cmd_evaluate(const std::string& calib_file, const std::string& reference_file,
                        const std::string& detections_dir = "",
                        const std::string& out_json = "evaluation.json") {
  try {
    CalibrationState state =
        calibration_from_json(cli_detail::load_json(calib_file));
    CameraConfig ref = cameras_from_json(cli_detail::load_json(reference_file));

    EvaluationResult ev = evaluate_against_reference(state, ref.poses);
    std::printf("%-12s %10s %10s %10s %10s\n", "Error", "Avg.", "Std.", "Min.", "Max.");
    std::printf("%-12s %9.4fm %9.4fm %9.4fm %9.4fm\n", "Position", ev.pos_avg,
                ev.pos_std, ev.pos_min, ev.pos_max);
    std::printf("%-12s %9.4f° %9.4f° %9.4f° %9.4f°\n", "Orientation", ev.rot_avg,
                ev.rot_std, ev.rot_min, ev.rot_max);

    json out{{"position_error_m",
              {{"avg", ev.pos_avg}, {"std", ev.pos_std}, {"min", ev.pos_min},
               {"max", ev.pos_max}}},
             {"orientation_error_deg",
              {{"avg", ev.rot_avg}, {"std", ev.rot_std}, {"min", ev.rot_min},
               {"max", ev.rot_max}}}};

    if (!detections_dir.empty()) {
      uint64_t errors = 0;
      auto streams = cli_detail::load_streams(detections_dir, &errors);
      PipelineConfig pcfg;
      auto framesets = synchronize(streams, pcfg.sync_window_ns);
      std::vector<PersonHypothesis> hypotheses;
      int64_t ids = 0;
      for (const auto& fs : framesets) {
        Frameset filtered = filter_frameset(fs, pcfg.filter);
        if (filtered.empty()) continue;
        Frameset und = undistort_frameset(filtered, ref.intrinsics);
        std::vector<std::pair<int, PersonDetection>> persons;
        for (const auto& [sid, msg] : und.entries)
          for (const auto& pd : msg.persons) persons.push_back({sid, pd});
        auto hyps = associate(persons, state.poses(), ref.intrinsics,
                              pcfg.association, und.reference_time, &ids);
        hypotheses.insert(hypotheses.end(), hyps.begin(), hyps.end());
      }
      ReprojectionStats stats =
          reprojection_errors(state.poses(), hypotheses, ref.intrinsics);
      std::printf("\nReprojection (mean %.3f px over %zu hypotheses)\n",
                  stats.overall_mean, hypotheses.size());
      std::printf("%-12s", "per camera:");
      for (const auto& [sid, err] : stats.per_camera_mean)
        std::printf("  c%d=%.3f", sid, err);
      std::printf("\n%-12s", "per group:");
      for (const char* grp :
           {"head", "hips", "knees", "ankles", "shoulders", "elbows", "wrists"}) {
        auto it = stats.per_group_mean.find(grp);
        std::printf("  %s=%.3f", grp, it != stats.per_group_mean.end() ? it->second : 0.0);
      }
      std::printf("\n");
      json jcams = json::object(), jgroups = json::object();
      for (const auto& [sid, err] : stats.per_camera_mean)
        jcams[std::to_string(sid)] = err;
      for (const auto& [grp, err] : stats.per_group_mean) jgroups[grp] = err;
      out["reprojection_px"] = {{"mean", stats.overall_mean},
                                {"per_camera", jcams},
                                {"per_joint_group", jgroups}};
    }
    cli_detail::write_text(out_json, out.dump(2));
    return kExitOk;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
}

inline int cmd_replay(const std::string& detections_dir, double speed,
                      int listen_port) {
  try {
    uint64_t errors = 0;
    auto streams = cli_detail::load_streams(detections_dir, &errors);
    std::vector<DetectionMessage> all;
    for (auto& s : streams) all.insert(all.end(), s.begin(), s.end());
    std::sort(all.begin(), all.end(),
              [](const DetectionMessage& a, const DetectionMessage& b) {
                return a.timestamp_ns < b.timestamp_ns;
              });

    TcpListener listener{uint16_t(listen_port)};
    std::cout << "replaying " << all.size() << " records on port "
              << listener.port() << "\n";
    TcpSocket conn = listener.accept_one();
    auto wall_start = std::chrono::steady_clock::now();
    int64_t t0 = all.empty() ? 0 : all.front().timestamp_ns;
    for (const auto& msg : all) {
      if (speed > 0) {
        auto target = wall_start + std::chrono::nanoseconds(
                                       int64_t((msg.timestamp_ns - t0) / speed));
        std::this_thread::sleep_until(target);
      }
      conn.send_record(message_to_json(msg).dump());
    }
    return kExitOk;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
}

// ---------------------------------------------------------------------------

inline int run_cli(int argc, const char* const* argv) {
  CLI::App app{"online marker-free multi-camera extrinsic calibration"};
  app.require_subcommand(1);

  auto* sim = app.add_subcommand("simulate", "generate a synthetic scenario");
  std::string scenario_file, out_dir = "sim_out";
  sim->add_option("scenario", scenario_file, "scenario JSON file")->required();
  sim->add_option("-o,--out", out_dir, "output directory");

  auto* cal = app.add_subcommand("calibrate", "run the calibration pipeline");
  CalibrateOptions copt;
  cal->add_option("detections", copt.detections_dir, "directory of JSONL streams");
  cal->add_option("--listen", copt.listen_port, "TCP port to ingest from");
  cal->add_option("-c,--config", copt.config_file, "camera config JSON")->required();
  cal->add_option("--init", copt.init_file, "initial extrinsics JSON");
  cal->add_option("-o,--out", copt.out_file, "calibration output JSON");
  cal->add_option("--trace", copt.trace_file, "cycle trace CSV");
  cal->add_option("--reference", copt.reference_file, "ground truth for error trace");
  cal->add_option("--cycles", copt.cycle_budget, "optimization cycle budget");
  cal->add_option("--framesets-per-cycle", copt.framesets_per_cycle,
                  "lockstep cadence");
  cal->add_option("--seed", copt.seed, "selection RNG seed");
  cal->add_flag("--free-running", copt.free_running,
                "run optimization on its own thread");

  auto* ev = app.add_subcommand("evaluate", "compare a calibration to a reference");
  std::string calib_file, reference_file, eval_detections, eval_out = "evaluation.json";
  ev->add_option("calibration", calib_file, "calibration JSON")->required();
  ev->add_option("reference", reference_file, "reference cameras JSON")->required();
  ev->add_option("-d,--detections", eval_detections,
                 "detections dir for reprojection metrics");
  ev->add_option("-o,--out", eval_out, "machine-readable result JSON");

  auto* rep = app.add_subcommand("replay", "stream a recording over TCP");
  std::string replay_dir;
  double speed = 1.0;
  int replay_port = 0;
  rep->add_option("detections", replay_dir, "directory of JSONL streams")->required();
  rep->add_option("--speed", speed, "replay speed factor (0 = max throughput)");
  rep->add_option("--listen-port", replay_port, "port to serve on (0 = ephemeral)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  if (sim->parsed()) return cmd_simulate(scenario_file, out_dir);
  if (cal->parsed()) {
    if (copt.detections_dir.empty() && copt.listen_port < 0) {
      std::cerr << "error: provide a detections directory or --listen\n";
      return kExitConfig;
    }
    return cmd_calibrate(copt);
  }
  if (ev->parsed()) return cmd_evaluate(calib_file, reference_file, eval_detections, eval_out);
  if (rep->parsed()) return cmd_replay(replay_dir, speed, replay_port);
  return kExitConfig;
}

}  // namespace calib
