#include "hfusion/imu.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace hfusion {

NoiseSpec NoiseSpec::from_log(const MeasurementLog& log) {
  NoiseSpec n;
  n.gyro_noise_density = log.imu_noise.gyro_noise_density;
  n.accel_noise_density = log.imu_noise.accel_noise_density;
  n.gyro_bias_rw = log.imu_noise.gyro_bias_rw;
  n.accel_bias_rw = log.imu_noise.accel_bias_rw;
  n.gravity = Vec3(0.0, 0.0, -log.gravity);
  return n;
}

void NoiseSpec::validate(bool allow_any_gravity) const {
  if (gyro_noise_density < 0 || accel_noise_density < 0 || gyro_bias_rw < 0 || accel_bias_rw < 0)
    throw std::invalid_argument("IMU noise densities must be non-negative");
  const double g = gravity.norm();
  if (!allow_any_gravity && (g < 9.0 || g > 10.5))
    throw std::invalid_argument("gravity magnitude " + std::to_string(g) + " outside [9.0, 10.5]");
}

void PreintegratedImu::reset(const ImuBias& linearization_bias) {
  *this = PreintegratedImu(noise_, linearization_bias);
}

void PreintegratedImu::integrate(const ImuSample& s, double dt) {
  if (!(dt > 0.0) || dt >= 0.1) throw ImuError("IMU integration step " + std::to_string(dt) + " s out of range (0, 0.1)");
  const Vec3 a = s.accel - bias_.accel;
  const Vec3 w = s.gyro - bias_.gyro;
  const Mat3 dR = dR_.matrix();
  const Mat3 a_skew = skew(a);
  const Rot3 inc = so3_exp(w * dt);
  const Mat3 inc_T = inc.matrix().transpose();
  const Mat3 Jr_inc = right_jacobian_so3(w * dt);
  const double dt2 = dt * dt;

  // Noise and state transition, order (dR, dv, dp).
  Mat9 A = Mat9::Identity();
  A.block<3, 3>(0, 0) = inc_T;
  A.block<3, 3>(3, 0) = -dR * a_skew * dt;
  A.block<3, 3>(6, 0) = -0.5 * dR * a_skew * dt2;
  A.block<3, 3>(6, 3) = Mat3::Identity() * dt;
  Eigen::Matrix<double, 9, 3> Bg = Eigen::Matrix<double, 9, 3>::Zero();
  Eigen::Matrix<double, 9, 3> Ba = Eigen::Matrix<double, 9, 3>::Zero();
  Bg.block<3, 3>(0, 0) = Jr_inc * dt;
  Ba.block<3, 3>(3, 0) = dR * dt;
  Ba.block<3, 3>(6, 0) = 0.5 * dR * dt2;
  const double qg = noise_.gyro_noise_density * noise_.gyro_noise_density / dt;
  const double qa = noise_.accel_noise_density * noise_.accel_noise_density / dt;
  cov_ = A * cov_ * A.transpose() + qg * Bg * Bg.transpose() + qa * Ba * Ba.transpose();
  cov_ = 0.5 * (cov_ + cov_.transpose());

  // Bias Jacobians; right-hand sides use the pre-update values.
  const Mat3 JRg = J_.block<3, 3>(0, 0);
  const Mat3 Jvg = J_.block<3, 3>(3, 0);
  const Mat3 Jva = J_.block<3, 3>(3, 3);
  J_.block<3, 3>(6, 0) += Jvg * dt - 0.5 * dR * a_skew * JRg * dt2;
  J_.block<3, 3>(6, 3) += Jva * dt - 0.5 * dR * dt2;
  J_.block<3, 3>(3, 0) -= dR * a_skew * JRg * dt;
  J_.block<3, 3>(3, 3) -= dR * dt;
  J_.block<3, 3>(0, 0) = inc_T * JRg - Jr_inc * dt;

  dp_ += dv_ * dt + 0.5 * dR * a * dt2;
  dv_ += dR * a * dt;
  dR_ = dR_ * inc;
  dt_ += dt;
  ++n_;
}

PreintegratedImu integrate_sample(PreintegratedImu acc, const ImuSample& sample, double dt) {
  acc.integrate(sample, dt);
  return acc;
}

CorrectedDelta bias_corrected_delta(const PreintegratedImu& pim, const ImuBias& new_bias) {
  const Vec6 db = new_bias.vector() - pim.linearization_bias().vector();
  const Mat96& J = pim.bias_jacobians();
  CorrectedDelta out;
  out.dR = pim.delta_R() * so3_exp(J.block<3, 3>(0, 0) * db.head<3>());
  out.dv = pim.delta_v() + J.block<3, 6>(3, 0) * db;
  out.dp = pim.delta_p() + J.block<3, 6>(6, 0) * db;
  out.large_correction = db.norm() > 0.1;
  return out;
}

ImuResidual imu_residual(const PreintegratedImu& pim, const Pose3& pose_i, const Vec3& v_i, const Pose3& pose_j,
                         const Vec3& v_j, const ImuBias& bias_i, const Vec3& gravity) {
  const double T = pim.delta_t();
  const Mat3 Ri = pose_i.rotation().matrix();
  const Mat3 RiT = Ri.transpose();
  const Mat3 Rj = pose_j.rotation().matrix();
  const Vec3& pi = pose_i.translation();
  const Vec3& pj = pose_j.translation();
  const Vec6 db = bias_i.vector() - pim.linearization_bias().vector();
  const Mat96& J = pim.bias_jacobians();
  const Mat3 JRg = J.block<3, 3>(0, 0);
  const Vec3 phi = JRg * db.head<3>();
  const CorrectedDelta c = bias_corrected_delta(pim, bias_i);

  const Vec3 dv_world = RiT * (v_j - v_i - gravity * T);
  const Vec3 dp_world = RiT * (pj - pi - v_i * T - 0.5 * gravity * T * T);

  ImuResidual out;
  const Rot3 E = c.dR.inverse() * (pose_i.rotation().inverse() * pose_j.rotation());
  const Vec3 rR = so3_log(E);
  out.r << rR, dv_world - c.dv, dp_world - c.dp;

  const Mat3 JrInv = right_jacobian_so3_inverse(rR);
  out.J_pose_i.setZero();
  out.J_pose_j.setZero();
  out.J_vel_i.setZero();
  out.J_vel_j.setZero();
  out.J_bias_i.setZero();

  out.J_pose_i.block<3, 3>(0, 0) = -JrInv * Rj.transpose() * Ri;
  out.J_pose_i.block<3, 3>(3, 0) = skew(dv_world);
  out.J_pose_i.block<3, 3>(6, 0) = skew(dp_world);
  out.J_pose_i.block<3, 3>(6, 3) = -Mat3::Identity();

  out.J_pose_j.block<3, 3>(0, 0) = JrInv;
  out.J_pose_j.block<3, 3>(6, 3) = RiT * Rj;

  out.J_vel_i.block<3, 3>(3, 0) = -RiT;
  out.J_vel_i.block<3, 3>(6, 0) = -RiT * T;
  out.J_vel_j.block<3, 3>(3, 0) = RiT;

  out.J_bias_i.block<3, 3>(0, 0) = -JrInv * E.matrix().transpose() * right_jacobian_so3(phi) * JRg;
  out.J_bias_i.block<3, 6>(3, 0) = -J.block<3, 6>(3, 0);
  out.J_bias_i.block<3, 6>(6, 0) = -J.block<3, 6>(6, 0);
  return out;
}

ImuResidual imu_residual(const PreintegratedImu& pim, const NavState& i, const NavState& j, const Vec3& gravity) {
  if (std::abs((j.t - i.t) - pim.delta_t()) > 1e-6)
    throw ImuError("state time difference does not match the preintegration interval");
  return imu_residual(pim, i.pose(), i.v, j.pose(), j.v, i.bias, gravity);
}

NavState propagate_step(const NavState& s, const ImuSample& sample, double dt, const Vec3& gravity) {
  const Vec3 a_world = s.R * (sample.accel - s.bias.accel) + gravity;
  NavState out = s;
  out.p = s.p + s.v * dt + 0.5 * a_world * dt * dt;
  out.v = s.v + a_world * dt;
  out.R = s.R * so3_exp((sample.gyro - s.bias.gyro) * dt);
  out.t = s.t + dt;
  return out;
}

NavState propagate(const NavState& state, std::span<const ImuSample> samples, const Vec3& gravity) {
  NavState s = state;
  if (samples.empty()) return s;
  for (std::size_t k = 0; k + 1 < samples.size(); ++k) {
    const double end = samples[k + 1].t;
    if (end - samples[k].t > 0.1) throw ImuError("gap above 0.1 s between IMU samples");
    if (end <= s.t) continue;
    // A state stamped before t_k is carried by sample k as well.
    const double dt = end - s.t;
    if (dt > 0.1) throw ImuError("gap above 0.1 s between state and IMU samples");
    s = propagate_step(s, samples[k], dt, gravity);
    s.t = end;
  }
  if (samples.back().t > s.t) {
    if (samples.back().t - s.t > 0.1) throw ImuError("gap above 0.1 s between state and IMU samples");
    s = propagate_step(s, samples.back(), samples.back().t - s.t, gravity);
  }
  s.t = std::max(s.t, samples.back().t);
  return s;
}

}  // namespace hfusion
