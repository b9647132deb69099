#pragma once

// Detection stream ingestion: JSONL message parsing, frameset
// synchronization, and calibration-grade filtering.

#include "calib/geometry.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <vector>

namespace calib {

using json = nlohmann::json;

struct SchemaError : Error {
  explicit SchemaError(const std::string& msg) : Error(msg) {}
};
struct ValueError : Error {
  explicit ValueError(const std::string& msg) : Error(msg) {}
};
struct MissingIntrinsics : Error {
  explicit MissingIntrinsics(const std::string& msg) : Error(msg) {}
};

// COCO-17 joint ids
namespace joints {
constexpr int kNose = 0;
constexpr int kLeftShoulder = 5;
constexpr int kRightShoulder = 6;
constexpr int kLeftHip = 11;
constexpr int kRightHip = 12;
constexpr int kCount = 17;
constexpr std::array<int, 4> kTorso = {kLeftShoulder, kRightShoulder, kLeftHip,
                                       kRightHip};

inline bool is_torso(int id) {
  return id == kLeftShoulder || id == kRightShoulder || id == kLeftHip ||
         id == kRightHip;
}
}  // namespace joints

struct Detection {
  int joint_id = 0;
  double u = 0, v = 0;
  double confidence = 0;
  Mat2 cov = Mat2::Identity();

  Vec2 pixel() const { return Vec2(u, v); }
};

struct PersonDetection {
  int sensor_id = 0;
  int person_index = 0;
  std::map<int, Detection> joints;

  bool has_torso() const {
    for (int j : joints::kTorso)
      if (!joints.count(j)) return false;
    return true;
  }
};

struct DetectionMessage {
  int sensor_id = 0;
  int64_t timestamp_ns = 0;
  std::vector<PersonDetection> persons;
};

struct Frameset {
  int64_t reference_time = 0;
  std::map<int, DetectionMessage> entries;  // sensor_id -> message

  bool empty() const { return entries.empty(); }
  size_t size() const { return entries.size(); }

  int64_t timestamp_span() const {
    if (entries.empty()) return 0;
    int64_t lo = INT64_MAX, hi = INT64_MIN;
    for (const auto& [id, m] : entries) {
      lo = std::min(lo, m.timestamp_ns);
      hi = std::max(hi, m.timestamp_ns);
    }
    return hi - lo;
  }

  double timestamp_std() const {
    if (entries.size() < 2) return 0.0;
    double mean = 0;
    for (const auto& [id, m] : entries) mean += double(m.timestamp_ns);
    mean /= double(entries.size());
    double var = 0;
    for (const auto& [id, m] : entries) {
      double d = double(m.timestamp_ns) - mean;
      var += d * d;
    }
    return std::sqrt(var / double(entries.size()));
  }
};

struct FilterConfig {
  int64_t max_span_ns = 33'000'000;
  double max_std_ns = 15'000'000;
  double min_confidence = 0.6;
  int max_persons = 10;
};

// ---------------------------------------------------------------------------
// Message parsing

inline DetectionMessage parse_message(const json& j) {
  if (!j.is_object()) throw SchemaError("message must be a JSON object");
  for (const char* f : {"sensor_id", "timestamp_ns", "persons"})
    if (!j.contains(f)) throw SchemaError(std::string("missing field: ") + f);
  if (!j["sensor_id"].is_number_integer() || !j["timestamp_ns"].is_number_integer())
    throw SchemaError("sensor_id and timestamp_ns must be integers");
  if (!j["persons"].is_array()) throw SchemaError("persons must be an array");

  DetectionMessage msg;
  msg.sensor_id = j["sensor_id"].get<int>();
  msg.timestamp_ns = j["timestamp_ns"].get<int64_t>();
  for (const auto& jp : j["persons"]) {
    for (const char* f : {"person_index", "joints"})
      if (!jp.contains(f)) throw SchemaError(std::string("missing person field: ") + f);
    PersonDetection pd;
    pd.sensor_id = msg.sensor_id;
    pd.person_index = jp["person_index"].get<int>();
    for (const auto& jj : jp["joints"]) {
      for (const char* f : {"id", "u", "v", "c", "cov"})
        if (!jj.contains(f)) throw SchemaError(std::string("missing joint field: ") + f);
      Detection d;
      d.joint_id = jj["id"].get<int>();
      d.u = jj["u"].get<double>();
      d.v = jj["v"].get<double>();
      d.confidence = jj["c"].get<double>();
      const auto& c = jj["cov"];
      if (!c.is_array() || c.size() != 4)
        throw SchemaError("cov must be a row-major 2x2 array of 4 numbers");
      Mat2 raw;
      raw << c[0].get<double>(), c[1].get<double>(), c[2].get<double>(),
          c[3].get<double>();
      d.cov = 0.5 * (raw + raw.transpose());
      if (d.confidence < 0.0 || d.confidence > 1.0)
        throw ValueError("confidence outside [0,1]");
      Eigen::LLT<Mat2> llt(d.cov);
      if (llt.info() != Eigen::Success)
        throw ValueError("detection covariance not positive-definite");
      if (d.joint_id < 0 || d.joint_id >= joints::kCount)
        throw ValueError("joint id outside COCO-17 range");
      pd.joints[d.joint_id] = d;
    }
    msg.persons.push_back(std::move(pd));
  }
  return msg;
}

inline DetectionMessage parse_message(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw SchemaError(std::string("invalid JSON: ") + e.what());
  }
  return parse_message(j);
}

inline json message_to_json(const DetectionMessage& msg) {
  json persons = json::array();
  for (const auto& p : msg.persons) {
    json jjoints = json::array();
    for (const auto& [id, d] : p.joints) {
      jjoints.push_back({{"id", d.joint_id},
                         {"u", d.u},
                         {"v", d.v},
                         {"c", d.confidence},
                         {"cov", {d.cov(0, 0), d.cov(0, 1), d.cov(1, 0), d.cov(1, 1)}}});
    }
    persons.push_back({{"person_index", p.person_index}, {"joints", jjoints}});
  }
  return json{{"sensor_id", msg.sensor_id},
              {"timestamp_ns", msg.timestamp_ns},
              {"persons", persons}};
}

// ---------------------------------------------------------------------------
// Frameset synchronization.  Greedy earliest-anchor policy: the oldest
// unconsumed message anchors a frameset; every other sensor contributes its
// message closest to the anchor within +-window/2; attached messages are
// consumed.  Messages that age out unattached are dropped and counted.

class FramesetSynchronizer {
 public:
  explicit FramesetSynchronizer(int num_sensors, int64_t window_ns = 33'000'000)
      : window_ns_(window_ns), queues_(num_sensors), finished_(num_sensors, false) {}

  void push(const DetectionMessage& msg) {
    queues_.at(msg.sensor_id).push_back(msg);
  }

  void finish(int sensor_id) { finished_.at(sensor_id) = true; }
  void finish_all() { std::fill(finished_.begin(), finished_.end(), true); }

  uint64_t dropped() const { return dropped_; }

  // Emits the next frameset if it is fully determined, i.e. for every sensor
  // we either have a candidate whose successor is already visible past the
  // window, or the stream is finished.
  std::optional<Frameset> poll() {
    while (true) {
      int anchor_sensor = -1;
      int64_t anchor_ts = INT64_MAX;
      for (size_t s = 0; s < queues_.size(); ++s) {
        if (!queues_[s].empty() && queues_[s].front().timestamp_ns < anchor_ts) {
          anchor_ts = queues_[s].front().timestamp_ns;
          anchor_sensor = int(s);
        }
      }
      if (anchor_sensor < 0) return std::nullopt;

      const int64_t half = window_ns_ / 2;
      Frameset fs;
      fs.reference_time = anchor_ts;
      bool ready = true;
      for (size_t s = 0; s < queues_.size(); ++s) {
        auto& q = queues_[s];
        // closest message to the anchor within the window
        int best = -1;
        int64_t best_dist = half + 1;
        for (size_t k = 0; k < q.size(); ++k) {
          int64_t dist = std::llabs(q[k].timestamp_ns - anchor_ts);
          if (dist < best_dist) {
            best_dist = dist;
            best = int(k);
          }
          if (q[k].timestamp_ns > anchor_ts + half) break;
        }
        // undetermined if a later, closer message could still arrive
        bool settled = finished_[s] ||
                       (!q.empty() && q.back().timestamp_ns > anchor_ts + half);
        if (!settled) {
          ready = false;
          break;
        }
        if (best >= 0) fs.entries[int(s)] = q[size_t(best)];
      }
      if (!ready) return std::nullopt;

      // consume exactly the attached messages; unattached in-window messages
      // stay and anchor later framesets
      for (const auto& [sensor_id, msg] : fs.entries) {
        auto& q = queues_[size_t(sensor_id)];
        for (auto it = q.begin(); it != q.end(); ++it) {
          if (it->timestamp_ns == msg.timestamp_ns) {
            q.erase(it);
            break;
          }
        }
      }
      return fs;
    }
  }

 private:
  int64_t window_ns_;
  std::vector<std::deque<DetectionMessage>> queues_;
  std::vector<bool> finished_;
  uint64_t dropped_ = 0;
};

// Convenience batch driver over complete per-sensor streams.
inline std::vector<Frameset> synchronize(
    const std::vector<std::vector<DetectionMessage>>& streams, int64_t window_ns) {
  FramesetSynchronizer sync(int(streams.size()), window_ns);
  for (const auto& stream : streams)
    for (const auto& msg : stream) sync.push(msg);
  sync.finish_all();
  std::vector<Frameset> out;
  while (auto fs = sync.poll()) out.push_back(std::move(*fs));
  return out;
}

// ---------------------------------------------------------------------------
// Filtering

inline Frameset filter_frameset(const Frameset& fs, const FilterConfig& cfg) {
  Frameset out;
  out.reference_time = fs.reference_time;
  if (fs.timestamp_span() > cfg.max_span_ns || fs.timestamp_std() > cfg.max_std_ns)
    return out;
  for (const auto& [sensor_id, msg] : fs.entries) {
    if (int(msg.persons.size()) > cfg.max_persons) continue;
    DetectionMessage kept;
    kept.sensor_id = msg.sensor_id;
    kept.timestamp_ns = msg.timestamp_ns;
    for (const auto& person : msg.persons) {
      PersonDetection pd;
      pd.sensor_id = person.sensor_id;
      pd.person_index = person.person_index;
      for (const auto& [jid, det] : person.joints)
        if (det.confidence >= cfg.min_confidence) pd.joints[jid] = det;
      if (pd.has_torso()) kept.persons.push_back(std::move(pd));
    }
    out.entries[sensor_id] = std::move(kept);
  }
  return out;
}

inline Frameset undistort_frameset(
    const Frameset& fs, const std::map<int, CameraIntrinsics>& intrinsics) {
  Frameset out = fs;
  for (auto& [sensor_id, msg] : out.entries) {
    auto it = intrinsics.find(sensor_id);
    if (it == intrinsics.end())
      throw MissingIntrinsics("no intrinsics for sensor " + std::to_string(sensor_id));
    const auto& intr = it->second;
    if (!intr.has_distortion()) continue;
    for (auto& person : msg.persons) {
      for (auto& [jid, det] : person.joints) {
        Vec2 distorted = det.pixel();
        Vec2 und = undistort_pixel(intr, distorted);
        Mat2 J = undistort_jacobian(intr, distorted);
        det.u = und.x();
        det.v = und.y();
        det.cov = J * det.cov * J.transpose();
        det.cov = Mat2(0.5 * (det.cov + det.cov.transpose()));
      }
    }
  }
  return out;
}

}  // namespace calib
