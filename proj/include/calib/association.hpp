#pragma once

// Cross-view person association: torso-based depth intervals, reduction of
// back-projection rays to segments, greedy matching by segment distance,
// center of mass.

#include "calib/geometry.hpp"
#include "calib/sensors.hpp"

#include <algorithm>
#include <map>
#include <vector>

namespace calib {

struct DegenerateTorso : Error {
  explicit DegenerateTorso(const std::string& msg) : Error(msg) {}
};
struct NoTorsoSegments : Error {
  explicit NoTorsoSegments(const std::string& msg) : Error(msg) {}
};

struct DepthInterval {
  double z_min = 0;
  double z_max = 0;

  double mid() const { return 0.5 * (z_min + z_max); }
};

struct AssociationConfig {
  double person_height_min = 1.5;
  double person_height_max = 2.0;
  double torso_height_ratio = 0.30;
  double torso_width_ratio = 0.18;
  double foreshortening_floor = 0.5;
  double match_threshold = 0.35;
  // Ambiguity rejection: a candidate joins its best hypothesis only when the
  // second-best assignment is at least match_margin worse; otherwise the
  // candidate is discarded for this frameset.  Under an inaccurate
  // calibration the greedy cost cannot distinguish near-ties, and a wrong
  // assignment is far more damaging than a dropped view.  0 disables.
  double match_margin = 0.2;
  // Once the calibration has roughly converged the segment scatter is small
  // and a wider threshold recovers many-view hypotheses, which constrain the
  // global geometry much more strongly than two-view ones.  The pipeline
  // switches to these values after refine_after_cycles optimization cycles.
  double refined_match_threshold = 0.75;
  double refined_match_margin = 0.3;
  int refined_after_cycles = 100;
};

struct PersonHypothesis {
  int64_t id = 0;
  int64_t created_at = 0;
  std::map<int, PersonDetection> views;  // sensor_id -> person
  // (sensor_id, joint_id) -> world-frame segment
  std::map<std::pair<int, int>, Segment3> segments;
  Vec3 center_of_mass = Vec3::Zero();
};

inline DepthInterval estimate_depth_interval(const PersonDetection& pd,
                                             const CameraIntrinsics& intr,
                                             const AssociationConfig& cfg) {
  if (!pd.has_torso()) throw DegenerateTorso("person is missing torso joints");
  double d_px = 0;
  for (size_t i = 0; i < joints::kTorso.size(); ++i) {
    for (size_t k = i + 1; k < joints::kTorso.size(); ++k) {
      const auto& a = pd.joints.at(joints::kTorso[i]);
      const auto& b = pd.joints.at(joints::kTorso[k]);
      d_px = std::max(d_px, (a.pixel() - b.pixel()).norm());
    }
  }
  if (d_px < 2.0) throw DegenerateTorso("torso pixel extent below 2 px");
  double f = intr.mean_focal();
  double torso_h_max = cfg.torso_height_ratio * cfg.person_height_max;
  double torso_w_max = cfg.torso_width_ratio * cfg.person_height_max;
  // worst cases: fronto-parallel torso diagonal for the far bound, fully
  // foreshortened minimal torso for the near bound
  double L_max = std::hypot(torso_h_max, torso_w_max);
  double L_min =
      cfg.torso_height_ratio * cfg.person_height_min * cfg.foreshortening_floor;
  return DepthInterval{f * L_min / d_px, f * L_max / d_px};
}

inline std::map<int, Segment3> person_segments(const PersonDetection& pd,
                                               const DepthInterval& interval,
                                               const Pose3& cam_pose,
                                               const CameraIntrinsics& intr) {
  std::map<int, Segment3> out;
  for (const auto& [jid, det] : pd.joints) {
    Vec3 dir_cam((det.u - intr.cx) / intr.fx, (det.v - intr.cy) / intr.fy, 1.0);
    // endpoints at camera-frame depths z_min and z_max
    Vec3 near = cam_pose.transform(dir_cam * interval.z_min);
    Vec3 far = cam_pose.transform(dir_cam * interval.z_max);
    out[jid] = Segment3{near, far};
  }
  return out;
}

inline Vec3 center_of_mass(const PersonHypothesis& h) {
  Vec3 sum = Vec3::Zero();
  int n = 0;
  for (const auto& [key, seg] : h.segments) {
    if (!joints::is_torso(key.second)) continue;
    sum += seg.midpoint();
    ++n;
  }
  if (n == 0) throw NoTorsoSegments("hypothesis has no torso segments");
  return sum / double(n);
}

namespace detail {

// cost of adding a person (with torso segments) to a hypothesis: worst view
// of the mean torso segment distance, so accepted members stay pairwise
// within the threshold
inline double association_cost(const std::map<int, Segment3>& person_segs,
                               const PersonHypothesis& hyp) {
  double worst = 0;
  for (const auto& [sensor_id, view] : hyp.views) {
    double sum = 0;
    int n = 0;
    for (int jid : joints::kTorso) {
      auto it = hyp.segments.find({sensor_id, jid});
      auto pit = person_segs.find(jid);
      if (it == hyp.segments.end() || pit == person_segs.end()) continue;
      sum += segment_distance(pit->second, it->second);
      ++n;
    }
    if (n == 0) return std::numeric_limits<double>::infinity();
    worst = std::max(worst, sum / double(n));
  }
  return worst;
}

}  // namespace detail

// Greedy association over one frameset's persons, processed in ascending
// estimated depth.  Returns only hypotheses observed from >= 2 sensors.
// Hypothesis ids are assigned by the caller-provided counter.
inline std::vector<PersonHypothesis> associate(
    const std::vector<std::pair<int, PersonDetection>>& persons,
    const std::map<int, Pose3>& calib,
    const std::map<int, CameraIntrinsics>& intrinsics,
    const AssociationConfig& cfg, int64_t timestamp = 0,
    int64_t* id_counter = nullptr) {
  struct Candidate {
    int sensor_id;
    PersonDetection person;
    DepthInterval interval;
    std::map<int, Segment3> segments;
  };
  std::vector<Candidate> candidates;
  for (const auto& [sensor_id, pd] : persons) {
    if (!pd.has_torso()) continue;
    const auto& intr = intrinsics.at(sensor_id);
    const auto& pose = calib.at(sensor_id);
    Candidate c;
    c.sensor_id = sensor_id;
    c.person = pd;
    try {
      c.interval = estimate_depth_interval(pd, intr, cfg);
    } catch (const DegenerateTorso&) {
      continue;
    }
    c.segments = person_segments(pd, c.interval, pose, intr);
    candidates.push_back(std::move(c));
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Candidate& a, const Candidate& b) {
                     if (a.interval.mid() != b.interval.mid())
                       return a.interval.mid() < b.interval.mid();
                     if (a.sensor_id != b.sensor_id) return a.sensor_id < b.sensor_id;
                     return a.person.person_index < b.person.person_index;
                   });

  std::vector<PersonHypothesis> hypotheses;
  for (auto& cand : candidates) {
    int best = -1;
    double best_cost = cfg.match_threshold;
    double second_cost = std::numeric_limits<double>::infinity();
    for (size_t h = 0; h < hypotheses.size(); ++h) {
      if (hypotheses[h].views.count(cand.sensor_id)) continue;
      double cost = detail::association_cost(cand.segments, hypotheses[h]);
      if (cost < best_cost) {
        if (best >= 0) second_cost = std::min(second_cost, best_cost);
        best_cost = cost;
        best = int(h);
      } else {
        second_cost = std::min(second_cost, cost);
      }
    }
    if (best >= 0 && cfg.match_margin > 0 &&
        second_cost < best_cost + cfg.match_margin) {
      continue;  // ambiguous assignment: drop the candidate
    }
    if (best < 0) {
      hypotheses.emplace_back();
      best = int(hypotheses.size()) - 1;
      hypotheses[size_t(best)].created_at = timestamp;
    }
    auto& hyp = hypotheses[size_t(best)];
    hyp.views[cand.sensor_id] = cand.person;
    for (const auto& [jid, seg] : cand.segments)
      hyp.segments[{cand.sensor_id, jid}] = seg;
  }

  std::vector<PersonHypothesis> out;
  for (auto& h : hypotheses) {
    if (h.views.size() < 2) continue;
    h.center_of_mass = center_of_mass(h);
    h.id = id_counter ? (*id_counter)++ : int64_t(out.size());
    out.push_back(std::move(h));
  }
  return out;
}

}  // namespace calib
