#pragma once

// Per-cycle factor graph construction and Levenberg-Marquardt solve over
// camera poses and joint landmarks, with marginal pose covariances from the
// camera-block Schur complement.

#include "calib/association.hpp"
#include "calib/geometry.hpp"

#include <algorithm>
#include <map>
#include <random>
#include <set>
#include <vector>

namespace calib {

struct EmptyGraph : Error {
  explicit EmptyGraph(const std::string& msg) : Error(msg) {}
};
struct SingularSystem : Error {
  explicit SingularSystem(const std::string& msg) : Error(msg) {}
};

struct OptimizerConfig {
  double spacing_threshold = 0.2;  // min center-of-mass spacing in a selection
  double recency_gamma = 0.9;      // sampling weight gamma^age_rank
  int max_selection = 20;
  int max_iterations = 50;
  double rel_cost_tol = 1e-8;
  double gradient_tol = 1e-10;
  double initial_lambda = 1e-4;
  double cov_floor_px2 = 0.25;  // added to detection covariances
};

struct CameraNode {
  int sensor_id = 0;
  Pose3 pose;
  bool fixed = false;
};

struct LandmarkNode {
  int64_t hypothesis_id = 0;
  int joint_id = 0;
  Vec3 position = Vec3::Zero();
};

struct PriorFactor {
  int camera_index = 0;  // into FactorGraph::cameras
  Pose3 prior_pose;
  Mat6 sqrt_info = Mat6::Identity();  // covariance^(-1/2)
};

struct ProjectionFactor {
  int camera_index = 0;
  int landmark_index = 0;
  Vec2 pixel = Vec2::Zero();
  Mat2 sqrt_info = Mat2::Identity();
};

struct FactorGraph {
  std::vector<CameraNode> cameras;
  std::vector<LandmarkNode> landmarks;
  std::vector<PriorFactor> priors;
  std::vector<ProjectionFactor> projections;
  std::map<int, CameraIntrinsics> intrinsics;  // sensor_id -> intrinsics
};

struct SolveReport {
  bool converged = false;
  int iterations = 0;
  double initial_cost = 0;
  double final_cost = 0;
  std::map<int, Pose3> poses;             // sensor_id -> pose
  std::map<int, Mat6> pose_covariances;   // sensor_id -> marginal covariance
};

// ---------------------------------------------------------------------------
// Hypothesis selection: recency-weighted random permutation with a minimum
// spacing between accepted centers of mass.

inline std::vector<PersonHypothesis> select_hypotheses(
    const std::vector<PersonHypothesis>& queue_snapshot,
    const OptimizerConfig& cfg, std::mt19937_64& rng) {
  const size_t n = queue_snapshot.size();
  // queue order is insertion order; age_rank 0 is the newest
  std::vector<size_t> pool(n);
  std::vector<double> weight(n);
  for (size_t i = 0; i < n; ++i) {
    pool[i] = i;
    size_t age_rank = n - 1 - i;
    weight[i] = std::pow(cfg.recency_gamma, double(age_rank));
  }
  std::vector<PersonHypothesis> selected;
  while (!pool.empty() && int(selected.size()) < cfg.max_selection) {
    double total = 0;
    for (size_t k : pool) total += weight[k];
    double draw = std::uniform_real_distribution<double>(0.0, total)(rng);
    size_t pick = pool.size() - 1;
    double acc = 0;
    for (size_t j = 0; j < pool.size(); ++j) {
      acc += weight[pool[j]];
      if (draw < acc) {
        pick = j;
        break;
      }
    }
    const auto& cand = queue_snapshot[pool[pick]];
    bool spaced = true;
    for (const auto& s : selected) {
      if ((s.center_of_mass - cand.center_of_mass).norm() < cfg.spacing_threshold) {
        spaced = false;
        break;
      }
    }
    if (spaced) selected.push_back(cand);
    pool.erase(pool.begin() + long(pick));
  }
  return selected;
}

// ---------------------------------------------------------------------------
// Graph construction.  Landmarks are re-triangulated under the current
// calibration every cycle; those that fail triangulation or land behind an
// observing camera are dropped with their factors.

inline FactorGraph build_graph(const std::vector<PersonHypothesis>& selection,
                               const std::map<int, Pose3>& calib,
                               const std::map<int, Mat6>& prior_covariances,
                               const std::map<int, CameraIntrinsics>& intrinsics,
                               const OptimizerConfig& cfg = {}) {
  if (selection.empty()) throw EmptyGraph("empty hypothesis selection");
  FactorGraph g;
  g.intrinsics = intrinsics;

  std::set<int> sensor_ids;
  for (const auto& h : selection)
    for (const auto& [sid, view] : h.views) sensor_ids.insert(sid);

  std::map<int, int> cam_index;
  for (int sid : sensor_ids) {
    CameraNode node;
    node.sensor_id = sid;
    node.pose = calib.at(sid);
    node.fixed = (sid == 0);  // gauge
    cam_index[sid] = int(g.cameras.size());
    g.cameras.push_back(node);

    PriorFactor prior;
    prior.camera_index = cam_index[sid];
    prior.prior_pose = node.pose;
    if (node.fixed) {
      // carried for uniformity; inert because the gauge pose never moves
      prior.sqrt_info = Mat6::Identity();
    } else {
      Mat6 cov = prior_covariances.at(sid);
      Eigen::LLT<Mat6> llt(cov.inverse());
      prior.sqrt_info = llt.matrixU();
    }
    g.priors.push_back(prior);
  }

  for (const auto& h : selection) {
    // collect per-joint observations across views
    std::map<int, std::vector<std::pair<int, Detection>>> by_joint;
    for (const auto& [sid, view] : h.views)
      for (const auto& [jid, det] : view.joints) by_joint[jid].push_back({sid, det});

    for (const auto& [jid, obs] : by_joint) {
      if (obs.size() < 2) continue;
      std::vector<Observation> tri_obs;
      for (const auto& [sid, det] : obs)
        tri_obs.push_back({calib.at(sid), intrinsics.at(sid), det.pixel()});
      Vec3 point;
      try {
        point = triangulate(tri_obs);
      } catch (const Error&) {
        continue;
      }
      bool in_front = true;
      for (const auto& [sid, det] : obs) {
        if (calib.at(sid).inverse_transform(point).z() <= 1e-6) {
          in_front = false;
          break;
        }
      }
      if (!in_front) continue;

      LandmarkNode lm;
      lm.hypothesis_id = h.id;
      lm.joint_id = jid;
      lm.position = point;
      int lm_index = int(g.landmarks.size());
      g.landmarks.push_back(lm);
      for (const auto& [sid, det] : obs) {
        ProjectionFactor f;
        f.camera_index = cam_index[sid];
        f.landmark_index = lm_index;
        f.pixel = det.pixel();
        Mat2 cov = det.cov + cfg.cov_floor_px2 * Mat2::Identity();
        Eigen::LLT<Mat2> llt(cov.inverse());
        f.sqrt_info = llt.matrixU();
        g.projections.push_back(f);
      }
    }
  }
  if (g.landmarks.empty()) throw EmptyGraph("no landmark survived triangulation");
  return g;
}

// ---------------------------------------------------------------------------
// Levenberg-Marquardt with landmark elimination (Schur complement).

namespace detail {

struct LinearizedState {
  std::vector<Pose3> cam_poses;
  std::vector<Vec3> landmarks;
};

// whitened residual and Jacobians of one projection factor; returns false on
// cheirality violation at the linearization point
inline bool projection_residual(const FactorGraph& g, const ProjectionFactor& f,
                                const Pose3& cam_pose, const Vec3& lm, Vec2* r,
                                Eigen::Matrix<double, 2, 6>* Jc,
                                Eigen::Matrix<double, 2, 3>* Jl) {
  const auto& intr = g.intrinsics.at(g.cameras[size_t(f.camera_index)].sensor_id);
  Vec3 pc = cam_pose.inverse_transform(lm);
  if (pc.z() <= 1e-6) return false;
  double iz = 1.0 / pc.z();
  Vec2 predicted(intr.fx * pc.x() * iz + intr.cx, intr.fy * pc.y() * iz + intr.cy);
  *r = f.sqrt_info * (f.pixel - predicted);

  Eigen::Matrix<double, 2, 3> dpix;  // d(pixel)/d(p_cam)
  dpix << intr.fx * iz, 0, -intr.fx * pc.x() * iz * iz,
          0, intr.fy * iz, -intr.fy * pc.y() * iz * iz;
  if (Jc) {
    // right perturbation C <- C*exp(xi): d(p_cam)/d(rho) = -I,
    // d(p_cam)/d(phi) = [p_cam]x
    Eigen::Matrix<double, 3, 6> dpc;
    dpc.leftCols<3>() = -Mat3::Identity();
    dpc.rightCols<3>() = skew(pc);
    *Jc = f.sqrt_info * (-dpix) * dpc;
  }
  if (Jl) *Jl = f.sqrt_info * (-dpix) * cam_pose.rotation().transpose();
  return true;
}

inline Vec6 prior_residual(const PriorFactor& f, const Pose3& pose, Mat6* J) {
  Vec6 r = se3_log(f.prior_pose.inverse() * pose);
  if (J) *J = f.sqrt_info * se3_right_jacobian_inv(r);
  return f.sqrt_info * r;
}

inline double graph_cost(const FactorGraph& g, const LinearizedState& x) {
  double cost = 0;
  for (const auto& f : g.projections) {
    Vec2 r;
    if (!projection_residual(g, f, x.cam_poses[size_t(f.camera_index)],
                             x.landmarks[size_t(f.landmark_index)], &r, nullptr,
                             nullptr))
      return std::numeric_limits<double>::infinity();
    cost += 0.5 * r.squaredNorm();
  }
  for (const auto& f : g.priors) {
    Vec6 r = prior_residual(f, x.cam_poses[size_t(f.camera_index)], nullptr);
    cost += 0.5 * r.squaredNorm();
  }
  return cost;
}

struct NormalEquations {
  // free-camera block layout: cameras with fixed=false in graph order
  std::vector<int> free_index;  // camera_index -> free slot, -1 if fixed
  Eigen::MatrixXd Hcc;
  Eigen::VectorXd bc;
  std::vector<Mat3> Hll;
  std::vector<Vec3> bl;
  // per landmark: list of (free slot, 6x3 cross block)
  std::vector<std::vector<std::pair<int, Eigen::Matrix<double, 6, 3>>>> Hcl;
  double gradient_inf_norm = 0;
};

inline bool linearize(const FactorGraph& g, const LinearizedState& x,
                      NormalEquations* eq) {
  const int ncam = int(g.cameras.size());
  eq->free_index.assign(size_t(ncam), -1);
  int nfree = 0;
  for (int i = 0; i < ncam; ++i)
    if (!g.cameras[size_t(i)].fixed) eq->free_index[size_t(i)] = nfree++;
  const int nlm = int(g.landmarks.size());
  eq->Hcc = Eigen::MatrixXd::Zero(6 * nfree, 6 * nfree);
  eq->bc = Eigen::VectorXd::Zero(6 * nfree);
  eq->Hll.assign(size_t(nlm), Mat3::Zero());
  eq->bl.assign(size_t(nlm), Vec3::Zero());
  eq->Hcl.assign(size_t(nlm), {});

  for (const auto& f : g.projections) {
    Vec2 r;
    Eigen::Matrix<double, 2, 6> Jc;
    Eigen::Matrix<double, 2, 3> Jl;
    int slot = eq->free_index[size_t(f.camera_index)];
    if (!projection_residual(g, f, x.cam_poses[size_t(f.camera_index)],
                             x.landmarks[size_t(f.landmark_index)], &r,
                             slot >= 0 ? &Jc : nullptr, &Jl))
      return false;
    size_t li = size_t(f.landmark_index);
    eq->Hll[li] += Jl.transpose() * Jl;
    eq->bl[li] += -Jl.transpose() * r;
    if (slot >= 0) {
      eq->Hcc.block<6, 6>(6 * slot, 6 * slot) += Jc.transpose() * Jc;
      eq->bc.segment<6>(6 * slot) += -Jc.transpose() * r;
      // merge into existing cross block if this camera already observes it
      bool merged = false;
      for (auto& [s, W] : eq->Hcl[li]) {
        if (s == slot) {
          W += Jc.transpose() * Jl;
          merged = true;
          break;
        }
      }
      if (!merged) eq->Hcl[li].push_back({slot, Jc.transpose() * Jl});
    }
  }
  for (const auto& f : g.priors) {
    int slot = eq->free_index[size_t(f.camera_index)];
    if (slot < 0) continue;
    Mat6 J;
    Vec6 r = prior_residual(f, x.cam_poses[size_t(f.camera_index)], &J);
    eq->Hcc.block<6, 6>(6 * slot, 6 * slot) += J.transpose() * J;
    eq->bc.segment<6>(6 * slot) += -J.transpose() * r;
  }
  eq->gradient_inf_norm = 0;
  if (eq->bc.size() > 0)
    eq->gradient_inf_norm = eq->bc.cwiseAbs().maxCoeff();
  for (const auto& b : eq->bl)
    eq->gradient_inf_norm = std::max(eq->gradient_inf_norm, b.cwiseAbs().maxCoeff());
  return true;
}

// Schur complement over cameras: S = Hcc - sum_l W_l Hll_l^-1 W_l^T
inline void schur_reduce(const NormalEquations& eq, double lambda,
                         Eigen::MatrixXd* S, Eigen::VectorXd* rhs,
                         std::vector<Mat3>* Hll_damped_inv) {
  *S = eq.Hcc;
  *rhs = eq.bc;
  // Marquardt damping scaled by the diagonal
  for (int i = 0; i < S->rows(); ++i)
    (*S)(i, i) += lambda * std::max((*S)(i, i), 1e-10);
  Hll_damped_inv->resize(eq.Hll.size());
  for (size_t l = 0; l < eq.Hll.size(); ++l) {
    Mat3 Hd = eq.Hll[l];
    for (int i = 0; i < 3; ++i) Hd(i, i) += lambda * std::max(Hd(i, i), 1e-10);
    Mat3 Hinv = Hd.inverse();
    (*Hll_damped_inv)[l] = Hinv;
    for (const auto& [si, Wi] : eq.Hcl[l]) {
      Eigen::Matrix<double, 6, 3> WiH = Wi * Hinv;
      rhs->segment<6>(6 * si) -= WiH * eq.bl[l];
      for (const auto& [sj, Wj] : eq.Hcl[l])
        S->block<6, 6>(6 * si, 6 * sj) -= WiH * Wj.transpose();
    }
  }
}

}  // namespace detail

inline SolveReport solve(const FactorGraph& graph, const OptimizerConfig& cfg = {}) {
  using namespace detail;
  LinearizedState x;
  for (const auto& c : graph.cameras) x.cam_poses.push_back(c.pose);
  for (const auto& l : graph.landmarks) x.landmarks.push_back(l.position);

  SolveReport report;
  report.initial_cost = graph_cost(graph, x);
  double cost = report.initial_cost;
  double lambda = cfg.initial_lambda;

  NormalEquations eq;
  if (!linearize(graph, x, &eq))
    throw SingularSystem("cheirality violation at the initial point");
  int nfree = int(eq.bc.size()) / 6;

  for (int iter = 0; iter < cfg.max_iterations; ++iter) {
    report.iterations = iter + 1;
    if (eq.gradient_inf_norm < cfg.gradient_tol) {
      report.converged = true;
      break;
    }
    bool accepted = false;
    for (int attempt = 0; attempt < 12 && !accepted; ++attempt) {
      Eigen::MatrixXd S;
      Eigen::VectorXd rhs;
      std::vector<Mat3> Hll_inv;
      schur_reduce(eq, lambda, &S, &rhs, &Hll_inv);
      Eigen::VectorXd dc;
      if (nfree > 0) {
        Eigen::LDLT<Eigen::MatrixXd> ldlt(S);
        if (ldlt.info() != Eigen::Success) {
          lambda *= 2.5;
          continue;
        }
        dc = ldlt.solve(rhs);
        if (!dc.allFinite()) {
          lambda *= 2.5;
          continue;
        }
      } else {
        dc.resize(0);
      }
      // back-substitute landmark updates
      LinearizedState trial = x;
      for (size_t c = 0; c < graph.cameras.size(); ++c) {
        int slot = eq.free_index[c];
        if (slot >= 0)
          trial.cam_poses[c] = trial.cam_poses[c] * se3_exp(dc.segment<6>(6 * slot));
      }
      for (size_t l = 0; l < graph.landmarks.size(); ++l) {
        Vec3 b = eq.bl[l];
        for (const auto& [s, W] : eq.Hcl[l])
          if (s >= 0) b -= W.transpose() * dc.segment<6>(6 * s);
        trial.landmarks[l] += Hll_inv[l] * b;
      }
      double trial_cost = graph_cost(graph, trial);
      if (trial_cost < cost) {
        double rel_decrease = (cost - trial_cost) / std::max(cost, 1e-300);
        x = std::move(trial);
        cost = trial_cost;
        lambda = std::max(lambda / 3.0, 1e-12);
        accepted = true;
        if (!linearize(graph, x, &eq))
          throw SingularSystem("cheirality violation after accepted step");
        if (rel_decrease < cfg.rel_cost_tol) {
          report.converged = true;
          iter = cfg.max_iterations;  // stop outer loop
        }
      } else {
        lambda *= 2.5;
      }
    }
    if (!accepted) break;  // stalled
  }
  report.final_cost = cost;

  for (size_t c = 0; c < graph.cameras.size(); ++c)
    report.poses[graph.cameras[c].sensor_id] = x.cam_poses[c];

  // marginal covariances from the undamped Gauss-Newton Hessian
  if (nfree > 0) {
    Eigen::MatrixXd S;
    Eigen::VectorXd rhs;
    std::vector<Mat3> Hll_inv;
    schur_reduce(eq, 0.0, &S, &rhs, &Hll_inv);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
    double max_ev = es.eigenvalues().maxCoeff();
    if (es.eigenvalues().minCoeff() < 1e-10 * std::max(max_ev, 1e-300)) {
      // report which cameras dominate the null direction
      Eigen::VectorXd nullvec = es.eigenvectors().col(0);
      std::string keys;
      for (size_t c = 0; c < graph.cameras.size(); ++c) {
        int slot = eq.free_index[c];
        if (slot >= 0 && nullvec.segment<6>(6 * slot).norm() > 0.3)
          keys += " c" + std::to_string(graph.cameras[c].sensor_id);
      }
      throw SingularSystem("rank-deficient system after gauge fixing:" + keys);
    }
    Eigen::MatrixXd cov = S.inverse();
    for (size_t c = 0; c < graph.cameras.size(); ++c) {
      int slot = eq.free_index[c];
      if (slot >= 0)
        report.pose_covariances[graph.cameras[c].sensor_id] =
            cov.block<6, 6>(6 * slot, 6 * slot);
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Reprojection error aggregation (per camera and per joint group).

struct ReprojectionStats {
  std::map<int, double> per_camera_mean;          // sensor_id -> mean px error
  std::map<std::string, double> per_group_mean;   // joint group -> mean px error
  double overall_mean = 0;
  int skipped_joints = 0;
};

inline std::string joint_group(int joint_id) {
  if (joint_id <= 4) return "head";
  if (joint_id <= 6) return "shoulders";
  if (joint_id <= 8) return "elbows";
  if (joint_id <= 10) return "wrists";
  if (joint_id <= 12) return "hips";
  if (joint_id <= 14) return "knees";
  return "ankles";
}

inline ReprojectionStats reprojection_errors(
    const std::map<int, Pose3>& calib,
    const std::vector<PersonHypothesis>& hypotheses,
    const std::map<int, CameraIntrinsics>& intrinsics) {
  ReprojectionStats stats;
  std::map<int, std::pair<double, int>> cam_acc;
  std::map<std::string, std::pair<double, int>> group_acc;
  double total = 0;
  int total_n = 0;
  for (const auto& h : hypotheses) {
    std::map<int, std::vector<std::pair<int, Detection>>> by_joint;
    for (const auto& [sid, view] : h.views)
      for (const auto& [jid, det] : view.joints) by_joint[jid].push_back({sid, det});
    for (const auto& [jid, obs] : by_joint) {
      if (obs.size() < 2) continue;
      std::vector<Observation> tri_obs;
      for (const auto& [sid, det] : obs)
        tri_obs.push_back({calib.at(sid), intrinsics.at(sid), det.pixel()});
      Vec3 point;
      try {
        point = triangulate(tri_obs);
      } catch (const Error&) {
        ++stats.skipped_joints;
        continue;
      }
      for (const auto& [sid, det] : obs) {
        double err;
        try {
          err = (project(intrinsics.at(sid), calib.at(sid), point) - det.pixel()).norm();
        } catch (const CheiralityViolation&) {
          ++stats.skipped_joints;
          continue;
        }
        cam_acc[sid].first += err;
        cam_acc[sid].second += 1;
        auto& ga = group_acc[joint_group(jid)];
        ga.first += err;
        ga.second += 1;
        total += err;
        ++total_n;
      }
    }
  }
  for (const auto& [sid, acc] : cam_acc)
    stats.per_camera_mean[sid] = acc.first / std::max(acc.second, 1);
  for (const auto& [grp, acc] : group_acc)
    stats.per_group_mean[grp] = acc.first / std::max(acc.second, 1);
  stats.overall_mean = total_n > 0 ? total / total_n : 0.0;
  return stats;
}

}  // namespace calib
