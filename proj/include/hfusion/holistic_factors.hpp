#pragma once

// Measurement factors built from the chain
//   reference alignment -> IMU state -> extrinsic -> calibration correction.
// Alignment and calibration keys are optional; without them the chain uses
// the identity for that link.

#include <optional>

#include "hfusion/factor_graph.hpp"

namespace hfusion {

/// h = T_WK^-1 T_WI T_IS T_SC,  r = log(h^-1 z') with z' = T_KS the
/// measurement after subtracting the keyframe position.
class AbsolutePoseFactor : public Factor {
 public:
  AbsolutePoseFactor(long nav, std::optional<Key> align, std::optional<Key> calib, const Pose3& z_adjusted,
                     const Pose3& T_IS, const Mat6& cov, RobustKernel kernel = {});
  std::string type() const override { return "abs_pose"; }
  Eigen::VectorXd evaluate(const Values& values, std::vector<Eigen::MatrixXd>* jac) const override;
  /// Measurement function value at `values`.
  Pose3 predict(const Values& values) const;

 private:
  bool has_align_, has_calib_;
  Pose3 z_, T_IS_;
};

/// h = R_WK^T (p_WI + R_WI (t_IS + R_IS t_SC) - t_WK),  r = h - z'.
class AbsolutePositionFactor : public Factor {
 public:
  AbsolutePositionFactor(long nav, std::optional<Key> align, std::optional<Key> calib, const Vec3& z_adjusted,
                         const Pose3& T_IS, const Mat3& cov, RobustKernel kernel = {});
  std::string type() const override { return "abs_pos"; }
  Eigen::VectorXd evaluate(const Values& values, std::vector<Eigen::MatrixXd>* jac) const override;

 private:
  bool has_align_, has_calib_;
  Vec3 z_;
  Pose3 T_IS_;
};

/// h = T_SC^-1 T_SI T_WI^-1 p_WF,  r = h - z.
class LandmarkFactor : public Factor {
 public:
  LandmarkFactor(long nav, long landmark_id, std::optional<Key> calib, const Vec3& z, const Pose3& T_IS,
                 const Mat3& cov, RobustKernel kernel = {});
  std::string type() const override { return "landmark"; }
  Eigen::VectorXd evaluate(const Values& values, std::vector<Eigen::MatrixXd>* jac) const override;

 private:
  bool has_calib_;
  Vec3 z_;
  Pose3 T_IS_;
};

/// h = R_SC^T (R_SI (R_WI^T v_WI + w_I x t_IS) + w_S x t_SC),  r = h - z,
/// where w_I is the body rate (fixed at construction) and w_S = R_SI w_I.
class LocalVelocityFactor : public Factor {
 public:
  LocalVelocityFactor(long nav, std::optional<Key> calib, const Vec3& z, const Vec3& omega_I, const Pose3& T_IS,
                      const Mat3& cov, RobustKernel kernel = {});
  std::string type() const override { return "local_vel"; }
  Eigen::VectorXd evaluate(const Values& values, std::vector<Eigen::MatrixXd>* jac) const override;

 private:
  bool has_calib_;
  Vec3 z_, omega_I_;
  Pose3 T_IS_;
};

}  // namespace hfusion
