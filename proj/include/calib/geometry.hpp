#pragma once

// Geometric primitives for multi-camera calibration: pinhole projection,
// radial-tangential (un)distortion, rays and segments, DLT triangulation,
// SE(3) exp/log with Jacobians, Umeyama alignment, rotation distance.

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace calib {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat6 = Eigen::Matrix<double, 6, 6>;

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct CheiralityViolation : Error {
  explicit CheiralityViolation(const std::string& msg) : Error(msg) {}
};
struct NoConvergence : Error {
  explicit NoConvergence(const std::string& msg) : Error(msg) {}
};
struct DegenerateSegment : Error {
  explicit DegenerateSegment(const std::string& msg) : Error(msg) {}
};
struct InsufficientObservations : Error {
  explicit InsufficientObservations(const std::string& msg) : Error(msg) {}
};
struct DegenerateGeometry : Error {
  explicit DegenerateGeometry(const std::string& msg) : Error(msg) {}
};
struct TooFewPoints : Error {
  explicit TooFewPoints(const std::string& msg) : Error(msg) {}
};
struct NotARotation : Error {
  explicit NotARotation(const std::string& msg) : Error(msg) {}
};
struct LogNearPi : Error {
  explicit LogNearPi(const std::string& msg) : Error(msg) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

struct CameraIntrinsics {
  double fx = 0, fy = 0;
  double cx = 0, cy = 0;
  // k1, k2, p1, p2, k3
  std::array<double, 5> distortion{0, 0, 0, 0, 0};
  int width = 0, height = 0;

  double mean_focal() const { return 0.5 * (fx + fy); }
  bool has_distortion() const {
    for (double d : distortion)
      if (d != 0.0) return true;
    return false;
  }
};

// Rigid transform mapping camera-frame points into the world frame.
// Stored as unit quaternion + translation; the view direction is +z.
class Pose3 {
 public:
  Pose3() : q_(Eigen::Quaterniond::Identity()), t_(Vec3::Zero()) {}
  Pose3(const Eigen::Quaterniond& q, const Vec3& t) : q_(q.normalized()), t_(t) {}
  Pose3(const Mat3& R, const Vec3& t) : q_(R), t_(t) { q_.normalize(); }

  static Pose3 identity() { return Pose3(); }

  const Eigen::Quaterniond& quaternion() const { return q_; }
  Mat3 rotation() const { return q_.toRotationMatrix(); }
  const Vec3& translation() const { return t_; }

  Pose3 operator*(const Pose3& other) const {
    return Pose3(q_ * other.q_, q_ * other.t_ + t_);
  }
  Pose3 inverse() const {
    Eigen::Quaterniond qi = q_.conjugate();
    return Pose3(qi, qi * (-t_));
  }
  Vec3 transform(const Vec3& p) const { return q_ * p + t_; }
  Vec3 inverse_transform(const Vec3& p) const { return q_.conjugate() * (p - t_); }

  bool is_approx(const Pose3& other, double tol = 1e-9) const {
    return (translation() - other.translation()).norm() < tol &&
           rotation().isApprox(other.rotation(), tol);
  }

 private:
  Eigen::Quaterniond q_;
  Vec3 t_;
};

struct Ray3 {
  Vec3 origin;
  Vec3 direction;  // unit norm
};

struct Segment3 {
  Vec3 a;
  Vec3 b;

  Vec3 midpoint() const { return 0.5 * (a + b); }
  double length() const { return (b - a).norm(); }
};

// ---------------------------------------------------------------------------
// SO(3) / SE(3) maps.  Tangent ordering is (rho, phi): translation first.
// Perturbations are right-multiplicative throughout: C <- C * exp(xi).

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

inline Mat3 so3_exp(const Vec3& phi) {
  double theta2 = phi.squaredNorm();
  if (theta2 < 1e-16) {
    Mat3 W = skew(phi);
    return Mat3::Identity() + W + 0.5 * W * W;
  }
  double theta = std::sqrt(theta2);
  Mat3 W = skew(phi / theta);
  return Mat3::Identity() + std::sin(theta) * W + (1.0 - std::cos(theta)) * W * W;
}

inline Vec3 so3_log(const Mat3& R) {
  double cos_theta = std::min(1.0, std::max(-1.0, 0.5 * (R.trace() - 1.0)));
  double theta = std::acos(cos_theta);
  if (theta > M_PI - 1e-6)
    throw LogNearPi("rotation angle within 1e-6 of pi");
  Vec3 w(R(2, 1) - R(1, 2), R(0, 2) - R(2, 0), R(1, 0) - R(0, 1));
  if (theta < 1e-8) return 0.5 * w;
  return (theta / (2.0 * std::sin(theta))) * w;
}

// V(phi): left Jacobian of SO(3); couples rotation into translation in exp.
inline Mat3 so3_left_jacobian(const Vec3& phi) {
  double theta2 = phi.squaredNorm();
  Mat3 W = skew(phi);
  if (theta2 < 1e-12)
    return Mat3::Identity() + 0.5 * W + (1.0 / 6.0) * W * W;
  double theta = std::sqrt(theta2);
  return Mat3::Identity() + ((1.0 - std::cos(theta)) / theta2) * W +
         ((theta - std::sin(theta)) / (theta2 * theta)) * W * W;
}

inline Mat3 so3_left_jacobian_inv(const Vec3& phi) {
  double theta2 = phi.squaredNorm();
  Mat3 W = skew(phi);
  if (theta2 < 1e-12)
    return Mat3::Identity() - 0.5 * W + (1.0 / 12.0) * W * W;
  double theta = std::sqrt(theta2);
  double c = 1.0 / theta2 - (1.0 + std::cos(theta)) / (2.0 * theta * std::sin(theta));
  return Mat3::Identity() - 0.5 * W + c * W * W;
}

inline Pose3 se3_exp(const Vec6& xi) {
  Vec3 rho = xi.head<3>();
  Vec3 phi = xi.tail<3>();
  Mat3 R = so3_exp(phi);
  Vec3 t = so3_left_jacobian(phi) * rho;
  return Pose3(R, t);
}

inline Vec6 se3_log(const Pose3& p) {
  Vec3 phi = so3_log(p.rotation());
  Vec3 rho = so3_left_jacobian_inv(phi) * p.translation();
  Vec6 xi;
  xi << rho, phi;
  return xi;
}

// Barfoot's Q matrix, left-Jacobian convention, tangent ordering (rho, phi).
inline Mat3 se3_Q(const Vec3& rho, const Vec3& phi) {
  Mat3 P = skew(rho);
  Mat3 W = skew(phi);
  double theta2 = phi.squaredNorm();
  double theta = std::sqrt(theta2);
  double c1, c2, c3;
  if (theta < 1e-4) {
    c1 = 1.0 / 6.0 - theta2 / 120.0;
    c2 = 1.0 / 24.0 - theta2 / 720.0;
    c3 = 0.5 * (c2 - 3.0 * (-1.0 / 120.0 + theta2 / 5040.0));
  } else {
    double theta3 = theta2 * theta;
    double theta4 = theta2 * theta2;
    double theta5 = theta4 * theta;
    double s = std::sin(theta), co = std::cos(theta);
    c1 = (theta - s) / theta3;
    c2 = (1.0 - 0.5 * theta2 - co) / theta4;
    c3 = 0.5 * (c2 - 3.0 * (theta - s - theta3 / 6.0) / theta5);
  }
  Mat3 WP = W * P, PW = P * W, WPW = W * P * W;
  return 0.5 * P + c1 * (WP + PW + WPW) - c2 * (W * WP + PW * W - 3.0 * WPW) -
         c3 * (WPW * W + W * WPW);
}

inline Mat6 se3_left_jacobian_inv(const Vec6& xi) {
  Vec3 rho = xi.head<3>();
  Vec3 phi = xi.tail<3>();
  Mat3 Jinv = so3_left_jacobian_inv(phi);
  Mat3 Q = se3_Q(rho, phi);
  Mat6 out = Mat6::Zero();
  out.topLeftCorner<3, 3>() = Jinv;
  out.bottomRightCorner<3, 3>() = Jinv;
  out.topRightCorner<3, 3>() = -Jinv * Q * Jinv;
  return out;
}

// d/dxi log(A * exp(xi)) at xi = 0, where r = log(A).
inline Mat6 se3_right_jacobian_inv(const Vec6& r) {
  return se3_left_jacobian_inv(-r);
}

// ---------------------------------------------------------------------------
// Projection and distortion.

inline Vec2 project(const CameraIntrinsics& intr, const Pose3& cam_pose,
                    const Vec3& point) {
  Vec3 pc = cam_pose.inverse_transform(point);
  if (pc.z() <= 1e-6)
    throw CheiralityViolation("point behind camera, z=" + std::to_string(pc.z()));
  return Vec2(intr.fx * pc.x() / pc.z() + intr.cx,
              intr.fy * pc.y() / pc.z() + intr.cy);
}

// Forward radial-tangential model on normalized coordinates.
inline Vec2 distort_normalized(const CameraIntrinsics& intr, const Vec2& xn) {
  const auto& d = intr.distortion;
  double x = xn.x(), y = xn.y();
  double r2 = x * x + y * y;
  double radial = 1.0 + d[0] * r2 + d[1] * r2 * r2 + d[4] * r2 * r2 * r2;
  double xd = x * radial + 2.0 * d[2] * x * y + d[3] * (r2 + 2.0 * x * x);
  double yd = y * radial + d[2] * (r2 + 2.0 * y * y) + 2.0 * d[3] * x * y;
  return Vec2(xd, yd);
}

inline Vec2 distort_pixel(const CameraIntrinsics& intr, const Vec2& pixel) {
  Vec2 xn((pixel.x() - intr.cx) / intr.fx, (pixel.y() - intr.cy) / intr.fy);
  Vec2 xd = distort_normalized(intr, xn);
  return Vec2(intr.fx * xd.x() + intr.cx, intr.fy * xd.y() + intr.cy);
}

inline Vec2 undistort_pixel(const CameraIntrinsics& intr, const Vec2& pixel) {
  if (!intr.has_distortion()) return pixel;
  Vec2 xd((pixel.x() - intr.cx) / intr.fx, (pixel.y() - intr.cy) / intr.fy);
  Vec2 xn = xd;  // fixed-point iteration on the radial-tangential inverse
  for (int it = 0; it < 20; ++it) {
    Vec2 err = distort_normalized(intr, xn) - xd;
    if (err.norm() < 1e-12) break;
    const auto& d = intr.distortion;
    double x = xn.x(), y = xn.y();
    double r2 = x * x + y * y;
    double radial = 1.0 + d[0] * r2 + d[1] * r2 * r2 + d[4] * r2 * r2 * r2;
    double dradial = d[0] + 2.0 * d[1] * r2 + 3.0 * d[4] * r2 * r2;
    Mat2 J;
    J(0, 0) = radial + x * dradial * 2.0 * x + 2.0 * d[2] * y + 6.0 * d[3] * x;
    J(0, 1) = x * dradial * 2.0 * y + 2.0 * d[2] * x + 2.0 * d[3] * y;
    J(1, 0) = y * dradial * 2.0 * x + 2.0 * d[2] * x + 2.0 * d[3] * y;
    J(1, 1) = radial + y * dradial * 2.0 * y + 6.0 * d[2] * y + 2.0 * d[3] * x;
    xn -= J.inverse() * err;
  }
  if ((distort_normalized(intr, xn) - xd).norm() > 1e-8)
    throw NoConvergence("undistortion did not converge in 20 iterations");
  return Vec2(intr.fx * xn.x() + intr.cx, intr.fy * xn.y() + intr.cy);
}

// Jacobian of the undistorted pixel w.r.t. the distorted pixel, by central
// differences on the forward model inverse (used for covariance propagation).
inline Mat2 undistort_jacobian(const CameraIntrinsics& intr, const Vec2& distorted) {
  if (!intr.has_distortion()) return Mat2::Identity();
  const double h = 1e-3;
  Mat2 J;
  for (int i = 0; i < 2; ++i) {
    Vec2 dp = Vec2::Zero();
    dp[i] = h;
    J.col(i) = (undistort_pixel(intr, distorted + dp) -
                undistort_pixel(intr, distorted - dp)) /
               (2.0 * h);
  }
  return J;
}

inline Ray3 backproject_ray(const CameraIntrinsics& intr, const Pose3& cam_pose,
                            const Vec2& pixel) {
  Vec3 dir_cam((pixel.x() - intr.cx) / intr.fx, (pixel.y() - intr.cy) / intr.fy, 1.0);
  Vec3 dir_world = cam_pose.rotation() * dir_cam;
  return Ray3{cam_pose.translation(), dir_world.normalized()};
}

// ---------------------------------------------------------------------------
// Segment distance (closest-point form: min of the two directed distances).

namespace detail {

// min distance from point p to segment s
inline double point_segment_distance(const Vec3& p, const Segment3& s) {
  Vec3 d = s.b - s.a;
  double t = d.squaredNorm() > 0 ? (p - s.a).dot(d) / d.squaredNorm() : 0.0;
  t = std::min(1.0, std::max(0.0, t));
  return (p - (s.a + t * d)).norm();
}

// directed distance: closest approach of l1's closest point towards l2
inline double directed_segment_distance(const Segment3& l1, const Segment3& l2) {
  // exact closest point between two segments (Ericson, Real-Time Collision
  // Detection, clamped quadratic); both directed distances coincide with it,
  // so the min() below is the same value either way.
  Vec3 d1 = l1.b - l1.a, d2 = l2.b - l2.a, r = l1.a - l2.a;
  double a = d1.squaredNorm(), e = d2.squaredNorm(), f = d2.dot(r);
  double s, t;
  double c = d1.dot(r);
  double b = d1.dot(d2);
  double denom = a * e - b * b;
  s = denom > 1e-15 ? std::min(1.0, std::max(0.0, (b * f - c * e) / denom)) : 0.0;
  t = (b * s + f) / e;
  if (t < 0.0) {
    t = 0.0;
    s = std::min(1.0, std::max(0.0, -c / a));
  } else if (t > 1.0) {
    t = 1.0;
    s = std::min(1.0, std::max(0.0, (b - c) / a));
  }
  return ((l1.a + s * d1) - (l2.a + t * d2)).norm();
}

}  // namespace detail

inline double segment_distance(const Segment3& l1, const Segment3& l2) {
  if ((l1.b - l1.a).squaredNorm() < 1e-24 || (l2.b - l2.a).squaredNorm() < 1e-24)
    throw DegenerateSegment("segment endpoints coincide");
  return std::min(detail::directed_segment_distance(l1, l2),
                  detail::directed_segment_distance(l2, l1));
}

// ---------------------------------------------------------------------------
// Triangulation (homogeneous DLT, midpoint fallback for ill-conditioned
// two-view cases).

struct Observation {
  Pose3 cam_pose;
  CameraIntrinsics intr;
  Vec2 pixel;
};

namespace detail {

inline Vec3 midpoint_triangulate(const Observation& o1, const Observation& o2) {
  Ray3 r1 = backproject_ray(o1.intr, o1.cam_pose, o1.pixel);
  Ray3 r2 = backproject_ray(o2.intr, o2.cam_pose, o2.pixel);
  Vec3 w = r1.origin - r2.origin;
  double a = 1.0, b = r1.direction.dot(r2.direction);
  double c = 1.0, d = r1.direction.dot(w), e = r2.direction.dot(w);
  double denom = a * c - b * b;
  if (std::abs(denom) < 1e-12)
    throw DegenerateGeometry("parallel rays in midpoint triangulation");
  double s = (b * e - c * d) / denom;
  double t = (a * e - b * d) / denom;
  return 0.5 * ((r1.origin + s * r1.direction) + (r2.origin + t * r2.direction));
}

}  // namespace detail

inline Vec3 triangulate(const std::vector<Observation>& observations) {
  if (observations.size() < 2)
    throw InsufficientObservations("triangulation needs >= 2 observations");
  Eigen::MatrixXd A(2 * observations.size(), 4);
  for (size_t i = 0; i < observations.size(); ++i) {
    const auto& o = observations[i];
    // projection matrix P = K [R^T | -R^T t]
    Eigen::Matrix<double, 3, 4> P;
    Mat3 K = Mat3::Identity();
    K(0, 0) = o.intr.fx;
    K(1, 1) = o.intr.fy;
    K(0, 2) = o.intr.cx;
    K(1, 2) = o.intr.cy;
    Mat3 Rt = o.cam_pose.rotation().transpose();
    P.leftCols<3>() = K * Rt;
    P.col(3) = K * (-Rt * o.cam_pose.translation());
    A.row(2 * i) = o.pixel.x() * P.row(2) - P.row(0);
    A.row(2 * i + 1) = o.pixel.y() * P.row(2) - P.row(1);
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  double s_last = sv(3), s_prev = sv(2);
  if (s_prev < 1e-12 * sv(0))
    throw DegenerateGeometry("DLT design matrix has two vanishing singular values");
  if (observations.size() == 2 && s_prev > 0 && s_last / s_prev > 0.99) {
    // poorly conditioned two-view problem, fall back to the midpoint method
    return detail::midpoint_triangulate(observations[0], observations[1]);
  }
  Eigen::Vector4d X = svd.matrixV().col(3);
  if (std::abs(X(3)) < 1e-14)
    throw DegenerateGeometry("point at infinity in DLT triangulation");
  return X.head<3>() / X(3);
}

// ---------------------------------------------------------------------------
// Umeyama alignment and rotation distance.

struct UmeyamaResult {
  double scale = 1.0;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
  bool rotation_reliable = true;

  Vec3 apply(const Vec3& p) const { return scale * (rotation * p) + translation; }
};

inline UmeyamaResult umeyama_align(const std::vector<Vec3>& src,
                                   const std::vector<Vec3>& dst,
                                   bool estimate_scale) {
  if (src.size() != dst.size() || src.size() < 2)
    throw TooFewPoints("umeyama_align needs >= 2 corresponding points");
  const size_t n = src.size();
  Vec3 mu_s = Vec3::Zero(), mu_d = Vec3::Zero();
  for (size_t i = 0; i < n; ++i) {
    mu_s += src[i];
    mu_d += dst[i];
  }
  mu_s /= double(n);
  mu_d /= double(n);
  Mat3 cov = Mat3::Zero();
  double var_s = 0;
  for (size_t i = 0; i < n; ++i) {
    cov += (dst[i] - mu_d) * (src[i] - mu_s).transpose();
    var_s += (src[i] - mu_s).squaredNorm();
  }
  cov /= double(n);
  var_s /= double(n);
  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 S = Mat3::Identity();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0) S(2, 2) = -1;
  UmeyamaResult res;
  res.rotation = svd.matrixU() * S * svd.matrixV().transpose();
  const auto& d = svd.singularValues();
  // rank < 2 means collinear or coincident points: rotation not unique
  res.rotation_reliable = n >= 3 && d(1) > 1e-9 * std::max(d(0), 1e-300);
  if (estimate_scale) {
    if (var_s < 1e-18) throw DegenerateGeometry("zero-variance source point set");
    res.scale = (d(0) * S(0, 0) + d(1) * S(1, 1) + d(2) * S(2, 2)) / var_s;
  }
  res.translation = mu_d - res.scale * (res.rotation * mu_s);
  return res;
}

inline void check_rotation(const Mat3& R, double tol = 1e-6) {
  if ((R * R.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() > tol ||
      std::abs(R.determinant() - 1.0) > tol)
    throw NotARotation("matrix is not in SO(3)");
}

inline double rotation_angle(const Mat3& Ra, const Mat3& Rb) {
  check_rotation(Ra);
  check_rotation(Rb);
  double c = 0.5 * ((Ra.transpose() * Rb).trace() - 1.0);
  return std::acos(std::min(1.0, std::max(-1.0, c)));
}

inline double rad2deg(double r) { return r * 180.0 / M_PI; }
inline double deg2rad(double d) { return d * M_PI / 180.0; }

}  // namespace calib
