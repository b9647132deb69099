#pragma once

// Synthetic scene generator: ground-truth camera rings, waypoint-walking
// persons with an articulated 17-keypoint template, and noisy occluded
// detection streams.

#include "calib/geometry.hpp"
#include "calib/sensors.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <random>
#include <vector>

namespace calib {

struct OccluderBox {
  Vec3 min = Vec3::Zero();
  Vec3 max = Vec3::Zero();
};

struct ScenarioConfig {
  int camera_count = 8;
  double ring_radius = 2.5;
  double camera_height = 2.6;
  double room_half_extent = 1.5;  // persons walk inside [-e, e]^2
  std::vector<double> person_heights = {1.70, 1.96};
  double walk_speed = 0.8;  // m/s
  double frame_rate = 10.0;
  double pixel_noise_sigma = 2.0;
  double timestamp_jitter_sigma_ns = 2e6;
  double joint_dropout_prob = 0.02;
  double subthreshold_confidence_rate = 0.0;
  std::vector<OccluderBox> occluders;
  double duration_s = 180.0;
  uint64_t seed = 1;
  // shared intrinsics for all simulated cameras
  double fx = 350, fy = 350, cx = 320, cy = 240;
  int width = 640, height = 480;
  std::array<double, 5> distortion{0, 0, 0, 0, 0};

  void validate() const {
    if (camera_count < 2) throw ConfigError("camera_count must be >= 2");
    if (person_heights.empty()) throw ConfigError("person_heights must be non-empty");
    if (pixel_noise_sigma < 0 || timestamp_jitter_sigma_ns < 0 ||
        joint_dropout_prob < 0)
      throw ConfigError("noise parameters must be non-negative");
    if (frame_rate <= 0 || duration_s <= 0)
      throw ConfigError("frame_rate and duration_s must be positive");
  }
};

struct GroundTruth {
  std::map<int, Pose3> camera_poses;  // gauge-normalized: camera 0 = identity
  std::map<int, CameraIntrinsics> intrinsics;
  // frames[f][p] = 17 world-frame joint positions of person p at frame f
  std::vector<std::vector<std::array<Vec3, 17>>> frames;
  std::vector<int64_t> frame_times_ns;
};

namespace detail {

// person-local joint template; x = lateral (left+), z = up, scaled by height.
// torso height 0.30H between shoulder and hip lines, shoulder span 0.18H.
inline std::array<Vec3, 17> skeleton_template(double H) {
  std::array<Vec3, 17> j;
  j[0] = Vec3(0.00, 0, 1.00);        // nose
  j[1] = Vec3(0.02, 0.02, 0.99);     // left eye
  j[2] = Vec3(-0.02, 0.02, 0.99);    // right eye
  j[3] = Vec3(0.05, 0, 0.97);        // left ear
  j[4] = Vec3(-0.05, 0, 0.97);       // right ear
  j[5] = Vec3(0.09, 0, 0.82);        // left shoulder
  j[6] = Vec3(-0.09, 0, 0.82);       // right shoulder
  j[7] = Vec3(0.12, 0, 0.65);        // left elbow
  j[8] = Vec3(-0.12, 0, 0.65);       // right elbow
  j[9] = Vec3(0.13, 0, 0.45);        // left wrist
  j[10] = Vec3(-0.13, 0, 0.45);      // right wrist
  j[11] = Vec3(0.07, 0, 0.52);       // left hip
  j[12] = Vec3(-0.07, 0, 0.52);      // right hip
  j[13] = Vec3(0.08, 0, 0.26);       // left knee
  j[14] = Vec3(-0.08, 0, 0.26);      // right knee
  j[15] = Vec3(0.08, 0, 0.00);       // left ankle
  j[16] = Vec3(-0.08, 0, 0.00);      // right ankle
  for (auto& p : j) p *= H;
  return j;
}

inline bool ray_hits_box(const Vec3& a, const Vec3& b, const OccluderBox& box) {
  // slab test on the segment a->b
  Vec3 d = b - a;
  double tmin = 0.0, tmax = 1.0;
  for (int i = 0; i < 3; ++i) {
    if (std::abs(d[i]) < 1e-12) {
      if (a[i] < box.min[i] || a[i] > box.max[i]) return false;
      continue;
    }
    double t1 = (box.min[i] - a[i]) / d[i];
    double t2 = (box.max[i] - a[i]) / d[i];
    if (t1 > t2) std::swap(t1, t2);
    tmin = std::max(tmin, t1);
    tmax = std::min(tmax, t2);
    if (tmin > tmax) return false;
  }
  return true;
}

}  // namespace detail

inline GroundTruth generate_scene(const ScenarioConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  GroundTruth gt;

  // inward-facing ring at fixed height, looking at a point above the center
  std::vector<Pose3> raw_poses;
  for (int i = 0; i < cfg.camera_count; ++i) {
    double a = 2.0 * M_PI * i / cfg.camera_count;
    Vec3 center(cfg.ring_radius * std::cos(a), cfg.ring_radius * std::sin(a),
                cfg.camera_height);
    Vec3 target(0, 0, 1.0);
    Vec3 z = (target - center).normalized();
    Vec3 x = z.cross(Vec3::UnitZ()).normalized();
    Vec3 y = z.cross(x);
    Mat3 R;
    R.col(0) = x;
    R.col(1) = y;
    R.col(2) = z;
    raw_poses.emplace_back(R, center);
  }
  // gauge-normalize: express everything in camera 0's frame
  Pose3 world_from_cam0_inv = raw_poses[0].inverse();
  for (int i = 0; i < cfg.camera_count; ++i) {
    gt.camera_poses[i] = world_from_cam0_inv * raw_poses[i];
    CameraIntrinsics intr;
    intr.fx = cfg.fx;
    intr.fy = cfg.fy;
    intr.cx = cfg.cx;
    intr.cy = cfg.cy;
    intr.width = cfg.width;
    intr.height = cfg.height;
    intr.distortion = cfg.distortion;
    gt.intrinsics[i] = intr;
  }

  // smoothed random-waypoint walks
  const double dt = 1.0 / cfg.frame_rate;
  const int nframes = int(cfg.duration_s * cfg.frame_rate);
  const double e = cfg.room_half_extent;
  std::uniform_real_distribution<double> uxy(-e, e);

  struct Walker {
    Vec2 pos, waypoint;
    double heading = 0;
    double phase = 0;  // gait phase, radians
    double height;
  };
  std::vector<Walker> walkers;
  for (double H : cfg.person_heights) {
    Walker w;
    w.pos = Vec2(uxy(rng), uxy(rng));
    w.waypoint = Vec2(uxy(rng), uxy(rng));
    w.heading = std::atan2(w.waypoint.y() - w.pos.y(), w.waypoint.x() - w.pos.x());
    w.height = H;
    walkers.push_back(w);
  }

  gt.frames.resize(size_t(nframes));
  gt.frame_times_ns.resize(size_t(nframes));
  for (int f = 0; f < nframes; ++f) {
    gt.frame_times_ns[size_t(f)] = int64_t(1'650'000'000e9) + int64_t(f * dt * 1e9);
    auto& frame = gt.frames[size_t(f)];
    for (auto& w : walkers) {
      if ((w.waypoint - w.pos).norm() < 0.2) {
        w.waypoint = Vec2(uxy(rng), uxy(rng));
      }
      double target_heading =
          std::atan2(w.waypoint.y() - w.pos.y(), w.waypoint.x() - w.pos.x());
      double dh = std::remainder(target_heading - w.heading, 2.0 * M_PI);
      w.heading += std::clamp(dh, -1.5 * dt, 1.5 * dt);
      w.pos += cfg.walk_speed * dt * Vec2(std::cos(w.heading), std::sin(w.heading));
      w.pos = w.pos.cwiseMax(-e).cwiseMin(e);
      w.phase += 2.0 * M_PI * cfg.walk_speed * dt / 1.1;  // ~1.1 m stride

      auto tmpl = detail::skeleton_template(w.height);
      double swing = 0.25 * std::sin(w.phase);
      // limb oscillation along the walking direction
      tmpl[9].y() += swing * w.height * 0.3;
      tmpl[10].y() -= swing * w.height * 0.3;
      tmpl[13].y() += swing * w.height * 0.2;
      tmpl[14].y() -= swing * w.height * 0.2;
      tmpl[15].y() += swing * w.height * 0.3;
      tmpl[16].y() -= swing * w.height * 0.3;

      double ch = std::cos(w.heading), sh = std::sin(w.heading);
      std::array<Vec3, 17> joints;
      for (int k = 0; k < 17; ++k) {
        // person-local (lateral, forward, up) -> pre-gauge world
        Vec3 local = tmpl[size_t(k)];
        Vec3 world(w.pos.x() - sh * local.x() + ch * local.y(),
                   w.pos.y() + ch * local.x() + sh * local.y(), local.z());
        joints[size_t(k)] = world_from_cam0_inv.transform(world);
      }
      frame.push_back(joints);
    }
  }
  return gt;
}

// Identity of each emitted person instance, for purity checks.  Files never
// carry it.
struct DetectionIdentity {
  int sensor_id;
  int64_t frame;
  int person_index;  // as emitted (image-x order)
  int true_person;
};

struct RenderedStreams {
  std::vector<std::vector<DetectionMessage>> per_sensor;  // index = sensor id
  std::vector<DetectionIdentity> identities;
};

inline RenderedStreams render_detections(const GroundTruth& gt,
                                         const ScenarioConfig& cfg) {
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> pixel_noise(0.0, cfg.pixel_noise_sigma);
  std::normal_distribution<double> jitter(0.0, cfg.timestamp_jitter_sigma_ns);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> conf_hi(0.6, 1.0);
  std::uniform_real_distribution<double> conf_lo(0.0, 0.6);

  RenderedStreams out;
  out.per_sensor.resize(gt.camera_poses.size());
  std::vector<int64_t> last_ts(gt.camera_poses.size(), INT64_MIN);

  const double sigma2 = std::max(cfg.pixel_noise_sigma * cfg.pixel_noise_sigma, 1e-6);
  for (size_t f = 0; f < gt.frames.size(); ++f) {
    for (const auto& [cam_id, pose] : gt.camera_poses) {
      const auto& intr = gt.intrinsics.at(cam_id);
      struct Rendered {
        int true_person;
        double mean_u;
        PersonDetection pd;
      };
      std::vector<Rendered> rendered;
      for (size_t p = 0; p < gt.frames[f].size(); ++p) {
        PersonDetection pd;
        pd.sensor_id = cam_id;
        double sum_u = 0;
        int n_u = 0;
        for (int k = 0; k < 17; ++k) {
          const Vec3& X = gt.frames[f][p][size_t(k)];
          Vec3 pc = pose.inverse_transform(X);
          if (pc.z() <= 0.1) continue;
          bool occluded = false;
          for (const auto& box : cfg.occluders)
            if (detail::ray_hits_box(pose.translation(), X, box)) {
              occluded = true;
              break;
            }
          if (occluded) continue;
          Vec2 exact(intr.fx * pc.x() / pc.z() + intr.cx,
                     intr.fy * pc.y() / pc.z() + intr.cy);
          if (intr.has_distortion()) exact = distort_pixel(intr, exact);
          Vec2 px = exact + Vec2(pixel_noise(rng), pixel_noise(rng));
          if (px.x() < 0 || px.x() > intr.width || px.y() < 0 || px.y() > intr.height)
            continue;
          if (unit(rng) < cfg.joint_dropout_prob) continue;
          Detection d;
          d.joint_id = k;
          d.u = px.x();
          d.v = px.y();
          d.confidence = unit(rng) < cfg.subthreshold_confidence_rate ? conf_lo(rng)
                                                                      : conf_hi(rng);
          d.cov = sigma2 * Mat2::Identity();
          pd.joints[k] = d;
          sum_u += d.u;
          ++n_u;
        }
        if (pd.joints.empty()) continue;
        rendered.push_back({int(p), sum_u / n_u, std::move(pd)});
      }
      // enumerate persons in image-x order; identity is deliberately dropped
      std::stable_sort(rendered.begin(), rendered.end(),
                       [](const Rendered& a, const Rendered& b) {
                         return a.mean_u < b.mean_u;
                       });
      DetectionMessage msg;
      msg.sensor_id = cam_id;
      int64_t ts = gt.frame_times_ns[f] + int64_t(jitter(rng));
      ts = std::max(ts, last_ts[size_t(cam_id)] + 1);  // keep streams monotone
      last_ts[size_t(cam_id)] = ts;
      msg.timestamp_ns = ts;
      for (size_t i = 0; i < rendered.size(); ++i) {
        rendered[i].pd.person_index = int(i);
        out.identities.push_back(
            {cam_id, int64_t(f), int(i), rendered[i].true_person});
        msg.persons.push_back(std::move(rendered[i].pd));
      }
      if (!msg.persons.empty()) out.per_sensor[size_t(cam_id)].push_back(std::move(msg));
    }
  }
  return out;
}

inline std::map<int, Pose3> perturb_calibration(const GroundTruth& gt,
                                                double pos_err, double rot_err_deg,
                                                uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::map<int, Pose3> out;
  for (const auto& [cam_id, pose] : gt.camera_poses) {
    if (cam_id == 0) {
      out[cam_id] = pose;
      continue;
    }
    Vec3 dir(gauss(rng), gauss(rng), gauss(rng));
    while (dir.norm() < 1e-9) dir = Vec3(gauss(rng), gauss(rng), gauss(rng));
    dir.normalize();
    Vec3 axis(gauss(rng), gauss(rng), gauss(rng));
    while (axis.norm() < 1e-9) axis = Vec3(gauss(rng), gauss(rng), gauss(rng));
    axis.normalize();
    Mat3 dR = so3_exp(axis * deg2rad(rot_err_deg));
    out[cam_id] = Pose3(dR * pose.rotation(), pose.translation() + pos_err * dir);
  }
  // Project the global scale mode out of the perturbation while keeping every
  // translation offset at exactly pos_err.  The scale of the camera-center
  // cloud is unobservable from projective data and is pinned to the initial
  // estimate throughout calibration (rescale_to_initial), so a perturbation
  // with a scale component would survive forever as an irreducible position
  // error — it would measure the random draw, not calibration quality.
  if (pos_err > 0 && gt.camera_poses.size() >= 3) {
    for (int iter = 0; iter < 200; ++iter) {
      std::vector<Vec3> cur, ref;
      for (const auto& [cam_id, pose] : gt.camera_poses) {
        ref.push_back(pose.translation());
        cur.push_back(out.at(cam_id).translation());
      }
      UmeyamaResult u = umeyama_align(cur, ref, true);
      if (std::abs(u.scale - 1.0) < 1e-12) break;
      for (auto& [cam_id, pose] : out) {
        if (cam_id == 0) continue;
        Vec3 d = pose.translation() * u.scale -
                 gt.camera_poses.at(cam_id).translation();
        if (d.norm() > 1e-12) d *= pos_err / d.norm();
        pose = Pose3(pose.rotation(),
                     gt.camera_poses.at(cam_id).translation() + d);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scenario / ground truth file formats

inline ScenarioConfig scenario_from_json(const nlohmann::json& j) {
  ScenarioConfig cfg;
  cfg.camera_count = j.value("camera_count", cfg.camera_count);
  cfg.ring_radius = j.value("ring_radius_m", cfg.ring_radius);
  cfg.camera_height = j.value("camera_height_m", cfg.camera_height);
  cfg.room_half_extent = j.value("room_half_extent_m", cfg.room_half_extent);
  if (j.contains("person_heights_m"))
    cfg.person_heights = j["person_heights_m"].get<std::vector<double>>();
  cfg.walk_speed = j.value("walk_speed_mps", cfg.walk_speed);
  cfg.frame_rate = j.value("frame_rate_hz", cfg.frame_rate);
  cfg.pixel_noise_sigma = j.value("pixel_noise_sigma_px", cfg.pixel_noise_sigma);
  cfg.timestamp_jitter_sigma_ns =
      j.value("timestamp_jitter_sigma_ns", cfg.timestamp_jitter_sigma_ns);
  cfg.joint_dropout_prob = j.value("joint_dropout_prob", cfg.joint_dropout_prob);
  cfg.subthreshold_confidence_rate =
      j.value("subthreshold_confidence_rate", cfg.subthreshold_confidence_rate);
  cfg.duration_s = j.value("duration_s", cfg.duration_s);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.fx = j.value("fx", cfg.fx);
  cfg.fy = j.value("fy", cfg.fy);
  cfg.cx = j.value("cx", cfg.cx);
  cfg.cy = j.value("cy", cfg.cy);
  cfg.width = j.value("width", cfg.width);
  cfg.height = j.value("height", cfg.height);
  if (j.contains("distortion")) {
    auto d = j["distortion"].get<std::vector<double>>();
    if (d.size() != 5) throw ConfigError("distortion must have 5 coefficients");
    std::copy(d.begin(), d.end(), cfg.distortion.begin());
  }
  if (j.contains("occluders")) {
    for (const auto& jb : j["occluders"]) {
      OccluderBox box;
      auto mn = jb.at("min").get<std::vector<double>>();
      auto mx = jb.at("max").get<std::vector<double>>();
      box.min = Vec3(mn.at(0), mn.at(1), mn.at(2));
      box.max = Vec3(mx.at(0), mx.at(1), mx.at(2));
      cfg.occluders.push_back(box);
    }
  }
  cfg.validate();
  return cfg;
}

inline nlohmann::json cameras_to_json(const std::map<int, Pose3>& poses,
                                      const std::map<int, CameraIntrinsics>& intr) {
  nlohmann::json cams = nlohmann::json::array();
  for (const auto& [sid, pose] : poses) {
    const auto& in = intr.at(sid);
    const auto& q = pose.quaternion();
    cams.push_back({{"sensor_id", sid},
                    {"fx", in.fx},
                    {"fy", in.fy},
                    {"cx", in.cx},
                    {"cy", in.cy},
                    {"width", in.width},
                    {"height", in.height},
                    {"distortion",
                     {in.distortion[0], in.distortion[1], in.distortion[2],
                      in.distortion[3], in.distortion[4]}},
                    {"translation",
                     {pose.translation().x(), pose.translation().y(),
                      pose.translation().z()}},
                    {"rotation_wxyz", {q.w(), q.x(), q.y(), q.z()}}});
  }
  return nlohmann::json{{"cameras", cams}};
}

struct CameraConfig {
  std::map<int, Pose3> poses;
  std::map<int, CameraIntrinsics> intrinsics;
};

inline CameraConfig cameras_from_json(const nlohmann::json& j) {
  CameraConfig cfg;
  for (const auto& jc : j.at("cameras")) {
    int sid = jc.at("sensor_id").get<int>();
    CameraIntrinsics in;
    in.fx = jc.at("fx").get<double>();
    in.fy = jc.at("fy").get<double>();
    in.cx = jc.at("cx").get<double>();
    in.cy = jc.at("cy").get<double>();
    in.width = jc.value("width", 0);
    in.height = jc.value("height", 0);
    if (jc.contains("distortion"))
      for (size_t k = 0; k < 5; ++k) in.distortion[k] = jc["distortion"][k].get<double>();
    cfg.intrinsics[sid] = in;
    auto t = jc.at("translation");
    auto q = jc.at("rotation_wxyz");
    cfg.poses[sid] =
        Pose3(Eigen::Quaterniond(q[0].get<double>(), q[1].get<double>(),
                                 q[2].get<double>(), q[3].get<double>()),
              Vec3(t[0].get<double>(), t[1].get<double>(), t[2].get<double>()));
  }
  return cfg;
}

}  // namespace calib
