#include "hfusion/holistic_factors.hpp"

namespace hfusion {

namespace {

std::vector<Key> keys_of(std::initializer_list<std::optional<Key>> ks) {
  std::vector<Key> out;
  for (const auto& k : ks)
    if (k) out.push_back(*k);
  return out;
}

}  // namespace

AbsolutePoseFactor::AbsolutePoseFactor(long nav, std::optional<Key> align, std::optional<Key> calib,
                                       const Pose3& z_adjusted, const Pose3& T_IS, const Mat6& cov,
                                       RobustKernel kernel)
    : Factor(keys_of({nav_pose_key(nav), align, calib}), cov, kernel),
      has_align_(align.has_value()),
      has_calib_(calib.has_value()),
      z_(z_adjusted),
      T_IS_(T_IS) {}

Pose3 AbsolutePoseFactor::predict(const Values& values) const {
  std::size_t i = 0;
  const Pose3& T_WI = values.pose(keys()[i++]);
  const Pose3 T_WK = has_align_ ? values.pose(keys()[i++]) : Pose3::identity();
  const Pose3 T_SC = has_calib_ ? values.pose(keys()[i++]) : Pose3::identity();
  return T_WK.inverse() * T_WI * T_IS_ * T_SC;
}

Eigen::VectorXd AbsolutePoseFactor::evaluate(const Values& values, std::vector<Eigen::MatrixXd>* jac) const {
  std::size_t i = 0;
  const Pose3& T_WI = values.pose(keys()[i++]);
  const Pose3 T_WK = has_align_ ? values.pose(keys()[i++]) : Pose3::identity();
  const Pose3 T_SC = has_calib_ ? values.pose(keys()[i++]) : Pose3::identity();
  const Pose3 C = T_IS_ * T_SC;
  const Pose3 h = T_WK.inverse() * T_WI * C;
  const Pose3 E = h.inverse() * z_;
  const Vec6 r = se3_log_vector(E);
  if (jac) {
    const Mat6 Jinv = right_jacobian_se3_inverse(r);
    const Pose3 E_inv = E.inverse();
    jac->clear();
    jac->push_back(-Jinv * adjoint(E_inv * C.inverse()));
    if (has_align_) jac->push_back(Jinv * adjoint(z_.inverse()));
    if (has_calib_) jac->push_back(-Jinv * adjoint(E_inv));
  }
  return r;
}

AbsolutePositionFactor::AbsolutePositionFactor(long nav, std::optional<Key> align, std::optional<Key> calib,
                                               const Vec3& z_adjusted, const Pose3& T_IS, const Mat3& cov,
                                               RobustKernel kernel)
    : Factor(keys_of({nav_pose_key(nav), align, calib}), cov, kernel),
      has_align_(align.has_value()),
      has_calib_(calib.has_value()),
      z_(z_adjusted),
      T_IS_(T_IS) {}

Eigen::VectorXd AbsolutePositionFactor::evaluate(const Values& values, std::vector<Eigen::MatrixXd>* jac) const {
  std::size_t i = 0;
  const Pose3& T_WI = values.pose(keys()[i++]);
  const Pose3 T_WK = has_align_ ? values.pose(keys()[i++]) : Pose3::identity();
  const Vec3 t_SC = has_calib_ ? values.vec3(keys()[i++]) : Vec3::Zero();
  const Mat3 R_WI = T_WI.rotation().matrix();
  const Mat3 R_KW = T_WK.rotation().matrix().transpose();
  const Mat3 R_IS = T_IS_.rotation().matrix();
  const Vec3 q = T_IS_.translation() + R_IS * t_SC;
  const Vec3 h = R_KW * (T_WI.translation() + R_WI * q - T_WK.translation());
  if (jac) {
    jac->clear();
    Eigen::Matrix<double, 3, 6> Jnav;
    Jnav << -R_KW * R_WI * skew(q), R_KW * R_WI;
    jac->push_back(Jnav);
    if (has_align_) {
      Eigen::Matrix<double, 3, 6> Ja;
      Ja << skew(h), -Mat3::Identity();
      jac->push_back(Ja);
    }
    if (has_calib_) jac->push_back(R_KW * R_WI * R_IS);
  }
  return h - z_;
}

LandmarkFactor::LandmarkFactor(long nav, long landmark_id, std::optional<Key> calib, const Vec3& z, const Pose3& T_IS,
                               const Mat3& cov, RobustKernel kernel)
    : Factor(keys_of({nav_pose_key(nav), landmark_key(landmark_id), calib}), cov, kernel),
      has_calib_(calib.has_value()),
      z_(z),
      T_IS_(T_IS) {}

Eigen::VectorXd LandmarkFactor::evaluate(const Values& values, std::vector<Eigen::MatrixXd>* jac) const {
  const Pose3& T_WI = values.pose(keys()[0]);
  const Vec3 p_WF = values.vec3(keys()[1]);
  const Pose3 T_SC = has_calib_ ? values.pose(keys()[2]) : Pose3::identity();
  const Mat3 R_IW = T_WI.rotation().matrix().transpose();
  const Mat3 R_SI = T_IS_.rotation().matrix().transpose();
  const Mat3 R_CS = T_SC.rotation().matrix().transpose();
  const Vec3 a = R_IW * (p_WF - T_WI.translation());
  const Vec3 b = R_SI * (a - T_IS_.translation());
  const Vec3 h = R_CS * (b - T_SC.translation());
  if (jac) {
    jac->clear();
    Eigen::Matrix<double, 3, 6> Jnav;
    Jnav << R_CS * R_SI * skew(a), -R_CS * R_SI;
    jac->push_back(Jnav);
    jac->push_back(R_CS * R_SI * R_IW);
    if (has_calib_) {
      Eigen::Matrix<double, 3, 6> Jc;
      Jc << skew(h), -Mat3::Identity();
      jac->push_back(Jc);
    }
  }
  return h - z_;
}

LocalVelocityFactor::LocalVelocityFactor(long nav, std::optional<Key> calib, const Vec3& z, const Vec3& omega_I,
                                         const Pose3& T_IS, const Mat3& cov, RobustKernel kernel)
    : Factor(keys_of({nav_pose_key(nav), nav_vel_key(nav), calib}), cov, kernel),
      has_calib_(calib.has_value()),
      z_(z),
      omega_I_(omega_I),
      T_IS_(T_IS) {}

Eigen::VectorXd LocalVelocityFactor::evaluate(const Values& values, std::vector<Eigen::MatrixXd>* jac) const {
  const Pose3& T_WI = values.pose(keys()[0]);
  const Vec3 v_WI = values.vec3(keys()[1]);
  const Pose3 T_SC = has_calib_ ? values.pose(keys()[2]) : Pose3::identity();
  const Mat3 R_IW = T_WI.rotation().matrix().transpose();
  const Mat3 R_SI = T_IS_.rotation().matrix().transpose();
  const Mat3 R_CS = T_SC.rotation().matrix().transpose();
  const Vec3 u = R_IW * v_WI;
  const Vec3 omega_S = R_SI * omega_I_;
  const Vec3 m = R_SI * (u + omega_I_.cross(T_IS_.translation())) + omega_S.cross(T_SC.translation());
  const Vec3 h = R_CS * m;
  if (jac) {
    jac->clear();
    Eigen::Matrix<double, 3, 6> Jnav = Eigen::Matrix<double, 3, 6>::Zero();
    Jnav.leftCols<3>() = R_CS * R_SI * skew(u);
    jac->push_back(Jnav);
    jac->push_back(R_CS * R_SI * R_IW);
    if (has_calib_) {
      Eigen::Matrix<double, 3, 6> Jc;
      Jc << skew(h), R_CS * skew(omega_S) * T_SC.rotation().matrix();
      jac->push_back(Jc);
    }
  }
  return h - z_;
}

}  // namespace hfusion
