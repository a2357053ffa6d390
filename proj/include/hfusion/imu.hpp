#pragma once

// IMU preintegration (first-order, on-manifold) and dead reckoning.

#include <Eigen/Core>
#include <span>
#include <stdexcept>

#include "hfusion/geometry.hpp"
#include "hfusion/measurements.hpp"

namespace hfusion {

using Vec9 = Eigen::Matrix<double, 9, 1>;
using Mat9 = Eigen::Matrix<double, 9, 9>;
using Mat96 = Eigen::Matrix<double, 9, 6>;

struct ImuBias {
  Vec3 gyro = Vec3::Zero();
  Vec3 accel = Vec3::Zero();

  /// [gyro; accel]
  Vec6 vector() const {
    Vec6 b;
    b << gyro, accel;
    return b;
  }
  static ImuBias from_vector(const Vec6& b) { return {b.head<3>(), b.tail<3>()}; }
};

struct NoiseSpec {
  double gyro_noise_density = 1e-3;
  double accel_noise_density = 1e-2;
  double gyro_bias_rw = 1e-5;
  double accel_bias_rw = 1e-4;
  Vec3 gravity = Vec3(0.0, 0.0, -9.81);

  static NoiseSpec from_log(const MeasurementLog& log);
  /// Throws on negative densities or |g| outside [9.0, 10.5] unless allowed.
  void validate(bool allow_any_gravity = false) const;
};

struct NavState {
  double t = 0.0;
  Rot3 R;
  Vec3 p = Vec3::Zero();
  Vec3 v = Vec3::Zero();
  ImuBias bias;

  Pose3 pose() const { return {R, p}; }
};

class ImuError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Preintegrated measurements between two nav states. Deltas are pure body
/// frame quantities; gravity enters only in the residual.
class PreintegratedImu {
 public:
  PreintegratedImu() = default;
  PreintegratedImu(const NoiseSpec& noise, const ImuBias& linearization_bias)
      : noise_(noise), bias_(linearization_bias) {}

  /// Applies one sample held constant over dt.
  void integrate(const ImuSample& s, double dt);
  void reset(const ImuBias& linearization_bias);

  const Rot3& delta_R() const { return dR_; }
  const Vec3& delta_v() const { return dv_; }
  const Vec3& delta_p() const { return dp_; }
  double delta_t() const { return dt_; }
  /// Order (dR, dv, dp).
  const Mat9& cov() const { return cov_; }
  /// Rows (dR, dv, dp), columns (gyro bias, accel bias).
  const Mat96& bias_jacobians() const { return J_; }
  const ImuBias& linearization_bias() const { return bias_; }
  const NoiseSpec& noise() const { return noise_; }
  int num_samples() const { return n_; }

 private:
  NoiseSpec noise_;
  ImuBias bias_;
  Rot3 dR_;
  Vec3 dv_ = Vec3::Zero();
  Vec3 dp_ = Vec3::Zero();
  double dt_ = 0.0;
  Mat9 cov_ = Mat9::Zero();
  Mat96 J_ = Mat96::Zero();
  int n_ = 0;
};

/// Functional form of PreintegratedImu::integrate. Throws unless 0 < dt < 0.1.
PreintegratedImu integrate_sample(PreintegratedImu acc, const ImuSample& sample, double dt);

struct CorrectedDelta {
  Rot3 dR;
  Vec3 dv;
  Vec3 dp;
  /// True when |new_bias - linearization_bias| > 0.1 and the first-order
  /// correction is no longer trustworthy.
  bool large_correction = false;
};

CorrectedDelta bias_corrected_delta(const PreintegratedImu& pim, const ImuBias& new_bias);

struct ImuResidual {
  Vec9 r;  // (dR, dv, dp)
  // Jacobians w.r.t. pose_i (right perturbation, 6), v_i (3), pose_j, v_j,
  // bias_i ([gyro; accel], 6).
  Eigen::Matrix<double, 9, 6> J_pose_i, J_pose_j, J_bias_i;
  Eigen::Matrix<double, 9, 3> J_vel_i, J_vel_j;
};

/// Throws ImuError when the state time difference and pim.delta_t() differ
/// by more than 1e-6 s.
ImuResidual imu_residual(const PreintegratedImu& pim, const NavState& i, const NavState& j, const Vec3& gravity);

/// Residual from raw pose/velocity/bias values (no timestamp check).
ImuResidual imu_residual(const PreintegratedImu& pim, const Pose3& pose_i, const Vec3& v_i, const Pose3& pose_j,
                         const Vec3& v_j, const ImuBias& bias_i, const Vec3& gravity);

/// Advances a world-frame state by one sample held constant over dt.
NavState propagate_step(const NavState& s, const ImuSample& sample, double dt, const Vec3& gravity);

/// Dead reckoning through time-ordered samples; sample k acts on
/// [t_k, t_{k+1}). The result is stamped with the last sample time.
/// Throws ImuError on gaps above 0.1 s.
NavState propagate(const NavState& state, std::span<const ImuSample> samples, const Vec3& gravity);

}  // namespace hfusion
