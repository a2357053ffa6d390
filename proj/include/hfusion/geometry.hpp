#pragma once

// SO(3)/SE(3) arithmetic used throughout the estimator.
//
// Conventions:
//  * Tangent vectors of SE(3) are ordered (angular, linear): xi = [w; v].
//  * All pose variables are perturbed on the right: P (+) xi = P * exp(xi).
//  * so3_log at angle pi returns the axis whose first non-zero component is
//    positive, e.g. a half turn about x maps to [pi, 0, 0].

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace hfusion {

using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat3 = Eigen::Matrix3d;
using Mat6 = Eigen::Matrix<double, 6, 6>;
using Quat = Eigen::Quaterniond;

/// Skew-symmetric matrix with skew(a) * b = a x b.
Mat3 skew(const Vec3& v);

class Rot3 {
 public:
  Rot3() : q_(Quat::Identity()) {}
  /// Stores q as given when it is unit within 1e-12, otherwise normalizes.
  explicit Rot3(const Quat& q);
  /// Projects onto SO(3) via the quaternion of the matrix.
  static Rot3 from_matrix(const Mat3& m);
  static Rot3 identity() { return Rot3(); }
  static Rot3 rz(double yaw);
  static Rot3 from_rpy(double roll, double pitch, double yaw);

  const Quat& quaternion() const { return q_; }
  Mat3 matrix() const { return q_.toRotationMatrix(); }
  Rot3 inverse() const { return Rot3(q_.conjugate(), Unchecked{}); }
  /// Composition; the result is renormalized.
  Rot3 operator*(const Rot3& other) const;
  Vec3 operator*(const Vec3& v) const { return q_ * v; }

  double roll() const;
  double pitch() const;
  double yaw() const;

 private:
  struct Unchecked {};
  Rot3(const Quat& q, Unchecked) : q_(q) {}
  Quat q_;
};

/// Tangent coordinates gamma = [angular; linear] of SE(3).
struct Twist {
  Vec3 angular = Vec3::Zero();
  Vec3 linear = Vec3::Zero();

  Twist() = default;
  Twist(const Vec3& w, const Vec3& v) : angular(w), linear(v) {}
  static Twist from_vector(const Vec6& xi) { return {xi.head<3>(), xi.tail<3>()}; }
  Vec6 vector() const {
    Vec6 xi;
    xi << angular, linear;
    return xi;
  }
};

class Pose3 {
 public:
  Pose3() : t_(Vec3::Zero()) {}
  Pose3(const Rot3& r, const Vec3& t) : r_(r), t_(t) {}
  static Pose3 identity() { return {}; }

  const Rot3& rotation() const { return r_; }
  const Vec3& translation() const { return t_; }
  Eigen::Matrix4d matrix() const;

  Pose3 inverse() const;
  Pose3 operator*(const Pose3& other) const;
  /// Maps a point from this pose's frame into the parent frame.
  Vec3 operator*(const Vec3& p) const { return r_ * p + t_; }
  /// Maps a point from the parent frame into this pose's frame.
  Vec3 transform_to(const Vec3& p) const { return r_.inverse() * (p - t_); }

 private:
  Rot3 r_;
  Vec3 t_;
};

Rot3 so3_exp(const Vec3& omega);
Vec3 so3_log(const Rot3& r);

Pose3 se3_exp(const Twist& xi);
Pose3 se3_exp(const Vec6& xi);
Twist se3_log(const Pose3& p);
Vec6 se3_log_vector(const Pose3& p);

/// Ad(P) = [[R, 0], [skew(t) R, R]] in (angular, linear) ordering.
Mat6 adjoint(const Pose3& p);

/// Right Jacobian of SO(3): exp(w + d) ~= exp(w) exp(Jr(w) d).
Mat3 right_jacobian_so3(const Vec3& omega);
Mat3 right_jacobian_so3_inverse(const Vec3& omega);
Mat3 left_jacobian_so3(const Vec3& omega);

/// Right Jacobian of SE(3) in (angular, linear) ordering.
Mat6 right_jacobian_se3(const Vec6& xi);
Mat6 right_jacobian_se3_inverse(const Vec6& xi);

/// Solver update rule for SE(3) variables: P * exp(delta).
Pose3 retract(const Pose3& p, const Twist& delta);
Pose3 retract(const Pose3& p, const Vec6& delta);

/// Geodesic angle between two rotations [rad].
double rotation_distance(const Rot3& a, const Rot3& b);

/// Rotation with the yaw of `yaw_source` and the roll/pitch of `tilt_source`
/// (ZYX Euler decomposition).
Rot3 combine_yaw_tilt(const Rot3& yaw_source, const Rot3& tilt_source);

/// (rot, rot, rot, trans, trans, trans)
inline Vec6 make_vec6(double rot, double trans) {
  Vec6 v;
  v << rot, rot, rot, trans, trans, trans;
  return v;
}

}  // namespace hfusion
