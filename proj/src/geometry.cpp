#include "hfusion/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace hfusion {

namespace {

constexpr double kExpSmallAngle = 1e-8;
constexpr double kJacobianSmallAngle = 1e-6;
// The SE(3) Q-block coefficients lose all precision to cancellation well
// above 1e-6, so they switch to their series much earlier.
constexpr double kSe3SeriesAngle = 1e-2;

Quat canonical(const Quat& q) { return q.w() < 0.0 ? Quat(-q.w(), -q.x(), -q.y(), -q.z()) : q; }

// Q block of the left Jacobian of SE(3) for xi = [phi; rho].
Mat3 se3_left_q(const Vec3& phi, const Vec3& rho) {
  const double theta = phi.norm();
  const double t2 = theta * theta;
  double a, b, e;
  if (theta < kSe3SeriesAngle) {
    const double t4 = t2 * t2;
    a = 1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0;
    b = 1.0 / 24.0 - t2 / 720.0 + t4 / 40320.0;
    e = 1.0 / 120.0 - t2 / 2520.0 + t4 / 120960.0;
  } else {
    const double s = std::sin(theta), c = std::cos(theta);
    const double t3 = t2 * theta, t4 = t2 * t2, t5 = t4 * theta;
    a = (theta - s) / t3;
    b = (t2 / 2.0 + c - 1.0) / t4;
    e = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t5);
  }
  const Mat3 P = skew(phi);
  const Mat3 R = skew(rho);
  const Mat3 PR = P * R;
  const Mat3 RP = R * P;
  const Mat3 PRP = PR * P;
  return 0.5 * R + a * (PR + RP + PRP) + b * (P * PR + RP * P - 3.0 * PRP) + e * (PRP * P + P * PRP);
}

}  // namespace

Mat3 skew(const Vec3& v) {
  Mat3 s;
  // clang-format off
  s <<     0.0, -v.z(),  v.y(),
         v.z(),    0.0, -v.x(),
        -v.y(),  v.x(),    0.0;
  // clang-format on
  return s;
}

Rot3::Rot3(const Quat& q) : q_(q) {
  if (std::abs(q_.squaredNorm() - 1.0) > 1e-12) q_.normalize();
}

Rot3 Rot3::from_matrix(const Mat3& m) {
  Quat q(m);
  q.normalize();
  return Rot3(q, Unchecked{});
}

Rot3 Rot3::rz(double yaw) { return Rot3(Quat(Eigen::AngleAxisd(yaw, Vec3::UnitZ())), Unchecked{}); }

Rot3 Rot3::from_rpy(double roll, double pitch, double yaw) {
  Quat q = Eigen::AngleAxisd(yaw, Vec3::UnitZ()) * Eigen::AngleAxisd(pitch, Vec3::UnitY()) *
           Eigen::AngleAxisd(roll, Vec3::UnitX());
  return Rot3(q);
}

Rot3 Rot3::operator*(const Rot3& other) const {
  Quat q = q_ * other.q_;
  q.normalize();
  return Rot3(q, Unchecked{});
}

double Rot3::roll() const {
  const Mat3 m = matrix();
  return std::atan2(m(2, 1), m(2, 2));
}

double Rot3::pitch() const {
  const Mat3 m = matrix();
  return std::asin(std::clamp(-m(2, 0), -1.0, 1.0));
}

double Rot3::yaw() const {
  const Mat3 m = matrix();
  return std::atan2(m(1, 0), m(0, 0));
}

Eigen::Matrix4d Pose3::matrix() const {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = r_.matrix();
  m.topRightCorner<3, 1>() = t_;
  return m;
}

Pose3 Pose3::inverse() const {
  const Rot3 ri = r_.inverse();
  return {ri, -(ri * t_)};
}

Pose3 Pose3::operator*(const Pose3& other) const { return {r_ * other.r_, r_ * other.t_ + t_}; }

Rot3 so3_exp(const Vec3& omega) {
  const double theta = omega.norm();
  Quat q;
  if (theta < kExpSmallAngle) {
    // Second-order expansion of cos(theta/2) and sin(theta/2)/theta.
    q = Quat(1.0 - theta * theta / 8.0, 0.5 * omega.x(), 0.5 * omega.y(), 0.5 * omega.z());
  } else {
    const double half = 0.5 * theta;
    const double k = std::sin(half) / theta;
    q = Quat(std::cos(half), k * omega.x(), k * omega.y(), k * omega.z());
  }
  q.normalize();
  return Rot3(q);
}

Vec3 so3_log(const Rot3& r) {
  const Quat q = canonical(r.quaternion());
  const Vec3 v(q.x(), q.y(), q.z());
  const double n = v.norm();
  if (n < 1e-12) {
    // sin(theta/2) ~ theta/2: log ~ 2 v / w
    return 2.0 * v / q.w();
  }
  const double theta = 2.0 * std::atan2(n, q.w());
  Vec3 axis = v / n;
  if (q.w() == 0.0) {
    // Half turn: q and -q describe the same rotation; fix the sign.
    for (int i = 0; i < 3; ++i) {
      if (axis[i] != 0.0) {
        if (axis[i] < 0.0) axis = -axis;
        break;
      }
    }
  }
  return theta * axis;
}

Mat3 left_jacobian_so3(const Vec3& omega) { return right_jacobian_so3(-omega); }

Mat3 right_jacobian_so3(const Vec3& omega) {
  const double theta = omega.norm();
  const Mat3 W = skew(omega);
  if (theta < kJacobianSmallAngle) {
    return Mat3::Identity() - 0.5 * W + W * W / 6.0;
  }
  const double t2 = theta * theta;
  const double s_half = std::sin(0.5 * theta);
  const double c1 = 2.0 * s_half * s_half / t2;  // (1 - cos) / theta^2
  const double c2 = (theta - std::sin(theta)) / (t2 * theta);
  return Mat3::Identity() - c1 * W + c2 * W * W;
}

Mat3 right_jacobian_so3_inverse(const Vec3& omega) {
  const double theta = omega.norm();
  const Mat3 W = skew(omega);
  if (theta < kJacobianSmallAngle) {
    return Mat3::Identity() + 0.5 * W + W * W / 12.0;
  }
  const double t2 = theta * theta;
  const double c = 1.0 / t2 - (1.0 + std::cos(theta)) / (2.0 * theta * std::sin(theta));
  return Mat3::Identity() + 0.5 * W + c * W * W;
}

Mat6 right_jacobian_se3(const Vec6& xi) {
  // Jr(xi) = Jl(-xi); with (angular, linear) ordering the Q block sits below
  // the diagonal.
  const Vec3 phi = -xi.head<3>();
  const Vec3 rho = -xi.tail<3>();
  const Mat3 Jl = left_jacobian_so3(phi);
  Mat6 out = Mat6::Zero();
  out.topLeftCorner<3, 3>() = Jl;
  out.bottomRightCorner<3, 3>() = Jl;
  out.bottomLeftCorner<3, 3>() = se3_left_q(phi, rho);
  return out;
}

Mat6 right_jacobian_se3_inverse(const Vec6& xi) {
  const Vec3 phi = -xi.head<3>();
  const Vec3 rho = -xi.tail<3>();
  const Mat3 Jinv = right_jacobian_so3_inverse(-phi);  // Jl(phi)^-1 = Jr(-phi)^-1
  const Mat3 Q = se3_left_q(phi, rho);
  Mat6 out = Mat6::Zero();
  out.topLeftCorner<3, 3>() = Jinv;
  out.bottomRightCorner<3, 3>() = Jinv;
  out.bottomLeftCorner<3, 3>() = -Jinv * Q * Jinv;
  return out;
}

Pose3 se3_exp(const Vec6& xi) {
  const Vec3 w = xi.head<3>();
  const Vec3 v = xi.tail<3>();
  // V(w) is the left Jacobian of SO(3).
  return {so3_exp(w), left_jacobian_so3(w) * v};
}

Pose3 se3_exp(const Twist& xi) { return se3_exp(xi.vector()); }

Vec6 se3_log_vector(const Pose3& p) {
  const Vec3 w = so3_log(p.rotation());
  Vec6 xi;
  xi.head<3>() = w;
  xi.tail<3>() = right_jacobian_so3_inverse(-w) * p.translation();
  return xi;
}

Twist se3_log(const Pose3& p) { return Twist::from_vector(se3_log_vector(p)); }

Mat6 adjoint(const Pose3& p) {
  const Mat3 R = p.rotation().matrix();
  Mat6 ad = Mat6::Zero();
  ad.topLeftCorner<3, 3>() = R;
  ad.bottomRightCorner<3, 3>() = R;
  ad.bottomLeftCorner<3, 3>() = skew(p.translation()) * R;
  return ad;
}

Pose3 retract(const Pose3& p, const Vec6& delta) { return p * se3_exp(delta); }
Pose3 retract(const Pose3& p, const Twist& delta) { return p * se3_exp(delta); }

double rotation_distance(const Rot3& a, const Rot3& b) { return so3_log(a.inverse() * b).norm(); }

Rot3 combine_yaw_tilt(const Rot3& yaw_source, const Rot3& tilt_source) {
  return Rot3::from_rpy(tilt_source.roll(), tilt_source.pitch(), yaw_source.yaw());
}

}  // namespace hfusion
