#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "calib/cli.hpp"

#include <filesystem>
#include <fstream>
#include <thread>

using namespace calib;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("calibtest_" + tag + "_" +
                                        std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

void write_file(const std::string& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

std::string read_file(const std::string& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

nlohmann::json small_scenario_json(int cameras = 4, double duration = 6.0,
                                   uint64_t seed = 5) {
  return {{"camera_count", cameras},
          {"duration_s", duration},
          {"seed", seed},
          {"person_heights_m", {1.70, 1.96}},
          {"pixel_noise_sigma_px", 1.0}};
}

}  // namespace

TEST_CASE("simulate: writes streams, truth and trajectories") {
  TempDir dir("sim");
  write_file(dir.file("scenario.json"), small_scenario_json().dump());
  CHECK(cmd_simulate(dir.file("scenario.json"), dir.file("out")) == kExitOk);
  for (int s = 0; s < 4; ++s) {
    fs::path p = dir.path / "out" / cli_detail::detections_filename(s);
    CHECK(fs::exists(p));
    CHECK(fs::file_size(p) > 0);
  }
  CHECK(fs::exists(dir.path / "out" / "ground_truth.json"));
  CHECK(fs::exists(dir.path / "out" / "trajectories.csv"));
  // truth file parses back into an 4-camera config
  auto cams = cameras_from_json(cli_detail::load_json(dir.file("out/ground_truth.json")));
  CHECK(cams.poses.size() == 4);
  CHECK(cams.poses.at(0).is_approx(Pose3(), 1e-12));
}

TEST_CASE("simulate: bad config exits 2 and names the field") {
  TempDir dir("simbad");
  write_file(dir.file("scenario.json"), small_scenario_json(1).dump());
  CHECK(cmd_simulate(dir.file("scenario.json"), dir.file("out")) == kExitConfig);
  CHECK_FALSE(fs::exists(dir.path / "out" / "ground_truth.json"));
  CHECK(cmd_simulate(dir.file("missing.json"), dir.file("out")) == kExitConfig);
}

TEST_CASE("simulate: identical seeds give byte-identical outputs") {
  TempDir dir("simdet");
  write_file(dir.file("scenario.json"), small_scenario_json(3, 4.0, 9).dump());
  REQUIRE(cmd_simulate(dir.file("scenario.json"), dir.file("a")) == kExitOk);
  REQUIRE(cmd_simulate(dir.file("scenario.json"), dir.file("b")) == kExitOk);
  for (const std::string name :
       {std::string("detections_00.jsonl"), std::string("detections_01.jsonl"),
        std::string("detections_02.jsonl"), std::string("ground_truth.json"),
        std::string("trajectories.csv")})
    CHECK(read_file(dir.file("a/" + name)) == read_file(dir.file("b/" + name)));
}

namespace {

struct CalibFixture {
  TempDir dir{"fix"};
  GroundTruth gt;
  std::map<int, Pose3> init;

  CalibFixture(int cameras = 6, double duration = 25.0, uint64_t seed = 11) {
    ScenarioConfig cfg;
    cfg.camera_count = cameras;
    cfg.duration_s = duration;
    cfg.pixel_noise_sigma = 1.0;
    cfg.seed = seed;
    gt = generate_scene(cfg);
    auto streams = render_detections(gt, cfg);
    fs::create_directories(dir.path / "detections");
    for (size_t sid = 0; sid < streams.per_sensor.size(); ++sid) {
      std::ofstream out(dir.path / "detections" /
                        cli_detail::detections_filename(int(sid)));
      for (const auto& msg : streams.per_sensor[sid])
        out << message_to_json(msg).dump() << "\n";
    }
    write_file(dir.file("config.json"),
               cameras_to_json(gt.camera_poses, gt.intrinsics).dump());
    init = perturb_calibration(gt, 0.15, 6.0, seed + 1);
    write_file(dir.file("init.json"),
               cameras_to_json(init, gt.intrinsics).dump());
  }
};

}  // namespace

TEST_CASE("calibrate: file based run converges and writes valid outputs") {
  CalibFixture fx;
  CalibrateOptions opt;
  opt.detections_dir = fx.dir.file("detections");
  opt.config_file = fx.dir.file("config.json");
  opt.init_file = fx.dir.file("init.json");
  opt.out_file = fx.dir.file("calibration.json");
  opt.trace_file = fx.dir.file("trace.csv");
  opt.reference_file = fx.dir.file("config.json");
  std::string config_before = read_file(opt.config_file);
  CHECK(cmd_calibrate(opt) == kExitOk);
  CHECK(read_file(opt.config_file) == config_before);  // inputs untouched

  auto state = calibration_from_json(cli_detail::load_json(opt.out_file));
  REQUIRE(state.estimates.size() == 6);
  auto ev = evaluate_against_reference(state, fx.gt.camera_poses);
  auto ev0 = evaluate_against_reference(CalibrationState::from_initial(fx.init),
                                        fx.gt.camera_poses);
  CHECK(ev.pos_avg < ev0.pos_avg);
  CHECK(ev.pos_avg < 0.08);

  std::ifstream trace(opt.trace_file);
  std::string header;
  std::getline(trace, header);
  CHECK(header == trace_csv_header());
  int rows = 0;
  std::string line;
  while (std::getline(trace, line))
    if (!line.empty()) ++rows;
  CHECK(rows == int(state.cycle_count));
}

TEST_CASE("calibrate: error exits") {
  CalibFixture fx(4, 6.0, 13);
  CalibrateOptions opt;
  opt.config_file = fx.dir.file("missing.json");
  opt.detections_dir = fx.dir.file("detections");
  opt.out_file = fx.dir.file("calibration.json");
  CHECK(cmd_calibrate(opt) == kExitConfig);

  opt.config_file = fx.dir.file("config.json");
  opt.detections_dir = fx.dir.file("no_such_dir");
  CHECK(cmd_calibrate(opt) == kExitConfig);

  // only one sensor's stream present: nothing can be cross-associated
  fs::create_directories(fx.dir.path / "single");
  fs::copy_file(fx.dir.path / "detections" / "detections_00.jsonl",
                fx.dir.path / "single" / "detections_00.jsonl");
  opt.detections_dir = fx.dir.file("single");
  CHECK(cmd_calibrate(opt) == kExitUnderconstrained);
}

TEST_CASE("calibrate: malformed records are skipped, not fatal") {
  CalibFixture fx(4, 10.0, 17);
  std::ofstream out(fx.dir.path / "detections" / "detections_00.jsonl",
                    std::ios::app);
  out << "this is not json\n{\"also\": \"not a detection\"}\n";
  out.close();
  CalibrateOptions opt;
  opt.detections_dir = fx.dir.file("detections");
  opt.config_file = fx.dir.file("config.json");
  opt.out_file = fx.dir.file("calibration.json");
  CHECK(cmd_calibrate(opt) == kExitOk);
}

TEST_CASE("evaluate: zero errors when calibration equals the reference") {
  CalibFixture fx(4, 4.0, 19);
  auto state = CalibrationState::from_initial(fx.gt.camera_poses);
  write_file(fx.dir.file("calib.json"), calibration_to_json(state).dump());
  CHECK(cmd_evaluate(fx.dir.file("calib.json"), fx.dir.file("config.json"), "",
                     fx.dir.file("eval.json")) == kExitOk);
  auto j = cli_detail::load_json(fx.dir.file("eval.json"));
  CHECK(j["position_error_m"]["max"].get<double>() < 1e-9);
  CHECK(j["orientation_error_deg"]["max"].get<double>() < 1e-5);
}

TEST_CASE("evaluate: constructed 0.05 m offset reported within 1e-3") {
  // balanced +-z offsets on a symmetric 8-ring: zero net translation and
  // torque, so the rigid alignment cannot absorb any of the 0.05 m
  ScenarioConfig cfg;
  cfg.camera_count = 8;
  cfg.duration_s = 1.0;
  auto gt = generate_scene(cfg);
  TempDir dir("eval05");
  write_file(dir.file("ref.json"),
             cameras_to_json(gt.camera_poses, gt.intrinsics).dump());
  auto moved = gt.camera_poses;
  int i = 0;
  for (auto& [sid, pose] : moved) {
    Vec3 d = (i++ % 2 == 0 ? 0.05 : -0.05) * Vec3::UnitZ();
    pose = Pose3(pose.quaternion(), pose.translation() + d);
  }
  auto state = CalibrationState::from_initial(moved);
  write_file(dir.file("calib.json"), calibration_to_json(state).dump());
  CHECK(cmd_evaluate(dir.file("calib.json"), dir.file("ref.json"), "",
                     dir.file("eval.json")) == kExitOk);
  auto j = cli_detail::load_json(dir.file("eval.json"));
  CHECK(j["position_error_m"]["max"].get<double>() ==
        doctest::Approx(0.05).epsilon(0.02));
  CHECK(std::abs(j["position_error_m"]["max"].get<double>() - 0.05) < 1e-3);

  // mismatched camera sets exit 2
  auto fewer = gt.camera_poses;
  fewer.erase(7);
  write_file(dir.file("short.json"), cameras_to_json(fewer, gt.intrinsics).dump());
  CHECK(cmd_evaluate(dir.file("calib.json"), dir.file("short.json"), "",
                     dir.file("eval.json")) == kExitConfig);
}

TEST_CASE("evaluate: reprojection section lists the seven joint groups") {
  CalibFixture fx(4, 8.0, 23);
  auto state = CalibrationState::from_initial(fx.gt.camera_poses);
  write_file(fx.dir.file("calib.json"), calibration_to_json(state).dump());
  CHECK(cmd_evaluate(fx.dir.file("calib.json"), fx.dir.file("config.json"),
                     fx.dir.file("detections"), fx.dir.file("eval.json")) ==
        kExitOk);
  auto j = cli_detail::load_json(fx.dir.file("eval.json"));
  REQUIRE(j.contains("reprojection_px"));
  const auto& groups = j["reprojection_px"]["per_joint_group"];
  for (const char* g : {"head", "hips", "knees", "ankles", "shoulders", "elbows",
                        "wrists"})
    CHECK(groups.contains(g));
  CHECK(groups.size() == 7);
  CHECK(j["reprojection_px"]["per_camera"].size() == 4);
  // ground-truth calibration on 1 px noise: mean reprojection near 1 px
  CHECK(j["reprojection_px"]["mean"].get<double>() < 3.0);
}

TEST_CASE("replay: max-throughput feed arrives in timestamp order") {
  CalibFixture fx(3, 4.0, 29);
  const uint16_t port = 46111;
  std::thread server([&] {
    cmd_replay(fx.dir.file("detections"), 0.0, port);
  });
  TcpSocket client;
  for (int attempt = 0; attempt < 100; ++attempt) {
    try {
      client = TcpSocket::connect_to("127.0.0.1", port);
      break;
    } catch (const SocketError&) {
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
  }
  REQUIRE(client.valid());
  std::string record;
  int64_t prev = INT64_MIN;
  size_t count = 0;
  while (client.recv_record(&record)) {
    auto msg = parse_message(record);
    CHECK(msg.timestamp_ns >= prev);
    prev = msg.timestamp_ns;
    ++count;
  }
  server.join();
  size_t expected = 0;
  uint64_t errs = 0;
  for (const auto& s : cli_detail::load_streams(fx.dir.file("detections"), &errs))
    expected += s.size();
  CHECK(count == expected);
  CHECK(count > 0);
}

TEST_CASE("replay: empty directory serves zero records; bind conflict exits 2") {
  TempDir dir("replayempty");
  const uint16_t port = 46113;
  std::thread server([&] { CHECK(cmd_replay(dir.str(), 0.0, port) == kExitOk); });
  TcpSocket client;
  for (int attempt = 0; attempt < 100; ++attempt) {
    try {
      client = TcpSocket::connect_to("127.0.0.1", port);
      break;
    } catch (const SocketError&) {
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
  }
  REQUIRE(client.valid());
  std::string record;
  CHECK_FALSE(client.recv_record(&record));
  server.join();

  TcpListener holder(46115);
  CHECK(cmd_replay(dir.str(), 0.0, 46115) == kExitConfig);
}

TEST_CASE("replay: paced feed matches timestamp gaps") {
  TempDir dir("replaypace");
  std::ofstream out(dir.path / "detections_00.jsonl");
  for (int i = 0; i < 4; ++i) {
    DetectionMessage msg;
    msg.sensor_id = 0;
    msg.timestamp_ns = 1'000'000'000 + int64_t(i) * 200'000'000;
    out << message_to_json(msg).dump() << "\n";
  }
  out.close();
  const uint16_t port = 46117;
  std::thread server([&] { cmd_replay(dir.str(), 1.0, port); });
  TcpSocket client;
  for (int attempt = 0; attempt < 100; ++attempt) {
    try {
      client = TcpSocket::connect_to("127.0.0.1", port);
      break;
    } catch (const SocketError&) {
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
  }
  REQUIRE(client.valid());
  std::string record;
  std::vector<double> arrival_ms;
  auto t0 = std::chrono::steady_clock::now();
  while (client.recv_record(&record))
    arrival_ms.push_back(std::chrono::duration<double, std::milli>(
                             std::chrono::steady_clock::now() - t0)
                             .count());
  server.join();
  REQUIRE(arrival_ms.size() == 4);
  for (size_t i = 1; i < arrival_ms.size(); ++i)
    CHECK(std::abs((arrival_ms[i] - arrival_ms[i - 1]) - 200.0) < 20.0);
}

TEST_CASE("calibrate over TCP matches the file-based run") {
  CalibFixture fx(4, 12.0, 31);
  CalibrateOptions file_opt;
  file_opt.detections_dir = fx.dir.file("detections");
  file_opt.config_file = fx.dir.file("config.json");
  file_opt.init_file = fx.dir.file("init.json");
  file_opt.out_file = fx.dir.file("calib_file.json");
  file_opt.seed = 5;
  REQUIRE(cmd_calibrate(file_opt) == kExitOk);

  CalibrateOptions tcp_opt = file_opt;
  tcp_opt.detections_dir.clear();
  tcp_opt.listen_port = 46119;
  tcp_opt.out_file = fx.dir.file("calib_tcp.json");
  std::thread calib_thread([&] { CHECK(cmd_calibrate(tcp_opt) == kExitOk); });

  const uint16_t replay_port = 46121;
  std::thread replay_thread(
      [&] { cmd_replay(fx.dir.file("detections"), 0.0, replay_port); });

  auto connect = [](uint16_t port) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      try {
        return TcpSocket::connect_to("127.0.0.1", port);
      } catch (const SocketError&) {
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
      }
    }
    throw SocketError("could not connect");
  };
  {
    TcpSocket from_replay = connect(replay_port);
    TcpSocket to_calib = connect(uint16_t(tcp_opt.listen_port));
    std::string record;
    while (from_replay.recv_record(&record)) to_calib.send_record(record);
  }  // closing the socket ends ingestion
  replay_thread.join();
  calib_thread.join();

  auto a = cli_detail::load_json(fx.dir.file("calib_file.json"));
  auto b = cli_detail::load_json(fx.dir.file("calib_tcp.json"));
  CHECK(a.at("cameras") == b.at("cameras"));
  CHECK(a.at("cycle_count") == b.at("cycle_count"));
}

TEST_CASE("run_cli: argument parsing and subcommand dispatch") {
  TempDir dir("cli");
  write_file(dir.file("scenario.json"), small_scenario_json(3, 2.0).dump());
  std::vector<std::string> args = {"calib", "simulate", dir.file("scenario.json"),
                                   "-o", dir.file("out")};
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  CHECK(run_cli(int(argv.size()), argv.data()) == kExitOk);
  CHECK(fs::exists(dir.path / "out" / "ground_truth.json"));

  std::vector<const char*> bad = {"calib", "frobnicate"};
  CHECK(run_cli(2, bad.data()) == kExitConfig);

  // calibrate without a source is a config error
  std::string cfgfile = dir.file("out/ground_truth.json");
  std::vector<const char*> nosrc = {"calib", "calibrate", "-c", cfgfile.c_str()};
  CHECK(run_cli(int(nosrc.size()), nosrc.data()) == kExitConfig);
}
