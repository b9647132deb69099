#pragma once

// Kalman-filtered camera pose refinement between optimization cycles, plus
// scale-drift pinning against the initial calibration.

#include "calib/geometry.hpp"

#include <json.hpp>

#include <map>

namespace calib {

struct NonPDCovariance : Error {
  explicit NonPDCovariance(const std::string& msg) : Error(msg) {}
};

struct CameraPoseEstimate {
  int sensor_id = 0;
  Pose3 pose;
  Mat6 covariance = Mat6::Identity();
};

struct RefinementConfig {
  // per-cycle process noise: 2 mm / 0.1 deg standard deviation
  Mat6 process_noise = [] {
    Mat6 q = Mat6::Zero();
    for (int i = 0; i < 3; ++i) q(i, i) = 0.002 * 0.002;
    for (int i = 3; i < 6; ++i) q(i, i) = deg2rad(0.1) * deg2rad(0.1);
    return q;
  }();
  // prior covariance at startup: 0.25 m / 10 deg standard deviation
  Mat6 initial_covariance = [] {
    Mat6 p = Mat6::Zero();
    for (int i = 0; i < 3; ++i) p(i, i) = 0.25 * 0.25;
    for (int i = 3; i < 6; ++i) p(i, i) = deg2rad(10.0) * deg2rad(10.0);
    return p;
  }();
};

struct CalibrationState {
  std::map<int, CameraPoseEstimate> estimates;
  std::map<int, Pose3> initial;  // immutable reference for scale pinning
  int64_t cycle_count = 0;

  static CalibrationState from_initial(const std::map<int, Pose3>& init,
                                       const RefinementConfig& cfg = {}) {
    CalibrationState s;
    s.initial = init;
    for (const auto& [sid, pose] : init) {
      CameraPoseEstimate e;
      e.sensor_id = sid;
      e.pose = pose;
      e.covariance = sid == 0 ? Mat6::Zero() : cfg.initial_covariance;
      s.estimates[sid] = e;
    }
    return s;
  }

  std::map<int, Pose3> poses() const {
    std::map<int, Pose3> out;
    for (const auto& [sid, e] : estimates) out[sid] = e.pose;
    return out;
  }

  std::map<int, Mat6> covariances() const {
    std::map<int, Mat6> out;
    for (const auto& [sid, e] : estimates) out[sid] = e.covariance;
    return out;
  }
};

inline CalibrationState predict(const CalibrationState& state, int cycles_elapsed,
                                const Mat6& process_noise) {
  CalibrationState out = state;
  for (auto& [sid, est] : out.estimates) {
    if (sid == 0) continue;  // gauge
    est.covariance += double(cycles_elapsed) * process_noise;
  }
  return out;
}

// Error-state update in the tangent space at the current estimate:
// y = log(est^-1 * meas), K = P(P+R)^-1, pose <- pose * exp(K y).
inline CalibrationState update(
    const CalibrationState& state,
    const std::map<int, std::pair<Pose3, Mat6>>& measurement) {
  CalibrationState out = state;
  for (const auto& [sid, meas] : measurement) {
    if (sid == 0) continue;  // gauge camera is never measured
    auto it = out.estimates.find(sid);
    if (it == out.estimates.end()) continue;
    const Mat6& R = meas.second;
    Eigen::LLT<Mat6> llt(R);
    if (llt.info() != Eigen::Success)
      throw NonPDCovariance("measurement covariance not positive-definite");
    auto& est = it->second;
    Vec6 y = se3_log(est.pose.inverse() * meas.first);
    Mat6 K = est.covariance * (est.covariance + R).inverse();
    est.pose = est.pose * se3_exp(K * y);
    Mat6 P = (Mat6::Identity() - K) * est.covariance;
    est.covariance = 0.5 * (P + P.transpose());
  }
  return out;
}

// Multiplies every camera translation by the Umeyama scale between current
// and initial camera centers.  Rotations and covariances stay untouched; the
// gauge camera sits at the origin so scaling is about it.
inline CalibrationState rescale_to_initial(const CalibrationState& state) {
  if (state.estimates.size() < 2) return state;
  std::vector<Vec3> current, initial;
  for (const auto& [sid, est] : state.estimates) {
    current.push_back(est.pose.translation());
    initial.push_back(state.initial.at(sid).translation());
  }
  UmeyamaResult u = umeyama_align(current, initial, /*estimate_scale=*/true);
  CalibrationState out = state;
  for (auto& [sid, est] : out.estimates)
    est.pose = Pose3(est.pose.quaternion(), u.scale * est.pose.translation());
  return out;
}

// ---------------------------------------------------------------------------
// Calibration file I/O

inline nlohmann::json calibration_to_json(const CalibrationState& state,
                                          int64_t timestamp_ns = 0) {
  nlohmann::json cams = nlohmann::json::array();
  for (const auto& [sid, est] : state.estimates) {
    const auto& q = est.pose.quaternion();
    // Eigen default storage is column-major; emit row-major
    nlohmann::json jcov = nlohmann::json::array();
    for (int r = 0; r < 6; ++r)
      for (int c = 0; c < 6; ++c) jcov.push_back(est.covariance(r, c));
    cams.push_back({{"sensor_id", sid},
                    {"translation",
                     {est.pose.translation().x(), est.pose.translation().y(),
                      est.pose.translation().z()}},
                    {"rotation_wxyz", {q.w(), q.x(), q.y(), q.z()}},
                    {"covariance", jcov}});
  }
  return nlohmann::json{{"cameras", cams},
                        {"cycle_count", state.cycle_count},
                        {"timestamp_ns", timestamp_ns}};
}

inline CalibrationState calibration_from_json(const nlohmann::json& j) {
  CalibrationState state;
  state.cycle_count = j.value("cycle_count", int64_t(0));
  for (const auto& jc : j.at("cameras")) {
    CameraPoseEstimate e;
    e.sensor_id = jc.at("sensor_id").get<int>();
    auto t = jc.at("translation");
    auto q = jc.at("rotation_wxyz");
    e.pose = Pose3(Eigen::Quaterniond(q[0].get<double>(), q[1].get<double>(),
                                      q[2].get<double>(), q[3].get<double>()),
                   Vec3(t[0].get<double>(), t[1].get<double>(), t[2].get<double>()));
    if (jc.contains("covariance")) {
      const auto& jcov = jc.at("covariance");
      for (int r = 0; r < 6; ++r)
        for (int c = 0; c < 6; ++c)
          e.covariance(r, c) = jcov[size_t(6 * r + c)].get<double>();
    }
    state.estimates[e.sensor_id] = e;
    state.initial[e.sensor_id] = e.pose;
  }
  return state;
}

}  // namespace calib
