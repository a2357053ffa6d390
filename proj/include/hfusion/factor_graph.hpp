#pragma once

// Variables, values and the residual/Jacobian contract shared by all factors.

#include <Eigen/Core>
#include <compare>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "hfusion/geometry.hpp"
#include "hfusion/imu.hpp"

namespace hfusion {

enum class VarKind : int { NavPose = 0, NavVel = 1, NavBias = 2, Align = 3, Landmark = 4, CalibPose = 5, CalibPos = 6, Vector = 7 };

/// Typed variable key. Navigation keys sort by time index first, every other
/// kind sorts after all navigation keys.
struct Key {
  VarKind kind = VarKind::Vector;
  long index = 0;
  std::string frame;  // reference frame (Align) or sensor frame (Calib*)

  bool is_nav() const { return kind == VarKind::NavPose || kind == VarKind::NavVel || kind == VarKind::NavBias; }
  std::strong_ordering operator<=>(const Key& o) const;
  bool operator==(const Key& o) const = default;
  std::string str() const;
};

inline Key nav_pose_key(long j) { return {VarKind::NavPose, j, {}}; }
inline Key nav_vel_key(long j) { return {VarKind::NavVel, j, {}}; }
inline Key nav_bias_key(long j) { return {VarKind::NavBias, j, {}}; }
inline Key align_key(const std::string& ref_frame, long k) { return {VarKind::Align, k, ref_frame}; }
inline Key landmark_key(long id) { return {VarKind::Landmark, id, {}}; }
inline Key calib_pose_key(const std::string& sensor) { return {VarKind::CalibPose, 0, sensor}; }
inline Key calib_pos_key(const std::string& sensor) { return {VarKind::CalibPos, 0, sensor}; }
inline Key vector_key(long i) { return {VarKind::Vector, i, {}}; }

using Variable = std::variant<Pose3, Eigen::VectorXd>;

int variable_dim(const Variable& v);
/// Right retraction for poses, addition for vectors.
Variable retract_variable(const Variable& v, const Eigen::VectorXd& delta);
/// Inverse of retract_variable: local(a, retract(a, d)) = d.
Eigen::VectorXd local_coordinates(const Variable& a, const Variable& b);
/// d local(x0, x) / d delta at x (delta is the right perturbation of x).
Eigen::MatrixXd local_jacobian(const Variable& x0, const Variable& x);

class Values {
 public:
  void insert(const Key& k, const Variable& v) { vars_.insert_or_assign(k, v); }
  void erase(const Key& k) { vars_.erase(k); }
  bool contains(const Key& k) const { return vars_.count(k) > 0; }
  std::size_t size() const { return vars_.size(); }
  bool empty() const { return vars_.empty(); }

  const Variable& at(const Key& k) const;
  const Pose3& pose(const Key& k) const;
  const Eigen::VectorXd& vector(const Key& k) const;
  Vec3 vec3(const Key& k) const;
  ImuBias bias(const Key& k) const { return ImuBias::from_vector(vector(k)); }
  int dim(const Key& k) const { return variable_dim(at(k)); }

  void retract(const Key& k, const Eigen::VectorXd& delta) { vars_.at(k) = retract_variable(at(k), delta); }

  auto begin() const { return vars_.begin(); }
  auto end() const { return vars_.end(); }

 private:
  std::map<Key, Variable> vars_;
};

/// rho(s) with s the squared whitened residual norm; cost = rho(s) / 2.
struct RobustKernel {
  enum class Type { None, Huber, Cauchy, Tukey };
  Type type = Type::None;
  double c = std::numeric_limits<double>::infinity();

  static RobustKernel none() { return {}; }
  static RobustKernel huber(double delta) { return {Type::Huber, delta}; }
  static RobustKernel cauchy(double c) { return {Type::Cauchy, c}; }
  static RobustKernel tukey(double c) { return {Type::Tukey, c}; }

  double rho(double s) const;
  /// IRLS weight rho'(s).
  double weight(double s) const;
};

class Factor {
 public:
  /// cov must be SPD; it is turned into a square-root information matrix.
  Factor(std::vector<Key> keys, const Eigen::MatrixXd& cov, RobustKernel kernel = {});
  virtual ~Factor() = default;

  const std::vector<Key>& keys() const { return keys_; }
  int dim() const { return static_cast<int>(sqrt_info_.rows()); }
  const Eigen::MatrixXd& sqrt_information() const { return sqrt_info_; }
  const RobustKernel& kernel() const { return kernel_; }
  virtual std::string type() const = 0;

  /// Unwhitened residual. When jac is non-null it receives one block per key
  /// (dim x variable_dim), in key order.
  virtual Eigen::VectorXd evaluate(const Values& values, std::vector<Eigen::MatrixXd>* jac) const = 0;

  Eigen::VectorXd whitened_residual(const Values& values) const;
  /// rho(|whitened r|^2) / 2
  double cost(const Values& values) const;

  struct Linearization {
    Eigen::VectorXd r;               // whitened and IRLS scaled
    std::vector<Eigen::MatrixXd> J;  // same scaling
    double sq_norm = 0.0;            // squared whitened norm before scaling
    double cost() const;             // rho(sq_norm) / 2
    RobustKernel kernel;
  };
  Linearization linearize(const Values& values) const;

 protected:
  /// For factors whose residual is already whitened.
  struct Prewhitened {};
  Factor(std::vector<Key> keys, int dim, Prewhitened);

 private:
  std::vector<Key> keys_;
  Eigen::MatrixXd sqrt_info_;
  RobustKernel kernel_;
};

using FactorPtr = std::shared_ptr<const Factor>;
using FactorList = std::vector<FactorPtr>;

/// Total cost sum_f rho_f / 2.
double total_cost(const FactorList& factors, const Values& values);

/// Diagonal covariance from per-axis sigmas with a variance floor of 1e-12.
Eigen::MatrixXd diagonal_covariance(const Eigen::VectorXd& sigmas);

class PriorFactor : public Factor {
 public:
  PriorFactor(const Key& key, const Variable& prior, const Eigen::MatrixXd& cov, RobustKernel kernel = {});
  std::string type() const override { return "prior"; }
  Eigen::VectorXd evaluate(const Values& values, std::vector<Eigen::MatrixXd>* jac) const override;
  const Variable& prior() const { return prior_; }

 private:
  Variable prior_;
};

/// r = log(rel^-1 T_1^-1 T_2)
class BetweenFactor : public Factor {
 public:
  BetweenFactor(const Key& k1, const Key& k2, const Pose3& rel, const Eigen::MatrixXd& cov, RobustKernel kernel = {});
  std::string type() const override { return "between"; }
  Eigen::VectorXd evaluate(const Values& values, std::vector<Eigen::MatrixXd>* jac) const override;
  const Pose3& measured() const { return rel_; }

 private:
  Pose3 rel_;
};

/// r = x_2 - x_1 - mean
class VectorBetweenFactor : public Factor {
 public:
  VectorBetweenFactor(const Key& k1, const Key& k2, const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov);
  std::string type() const override { return "vector_between"; }
  Eigen::VectorXd evaluate(const Values& values, std::vector<Eigen::MatrixXd>* jac) const override;

 private:
  Eigen::VectorXd mean_;
};

/// Whitened linear factor r = A * [local(x0_i, x_i)]_i + b. Used for the
/// marginalization prior and for linear test problems.
class LinearFactor : public Factor {
 public:
  LinearFactor(std::vector<Key> keys, const Values& linearization_point, const Eigen::MatrixXd& A,
               const Eigen::VectorXd& b);
  std::string type() const override { return "linear"; }
  Eigen::VectorXd evaluate(const Values& values, std::vector<Eigen::MatrixXd>* jac) const override;
  const Eigen::MatrixXd& A() const { return A_; }
  const Eigen::VectorXd& b() const { return b_; }

 private:
  std::vector<Variable> x0_;
  Eigen::MatrixXd A_;
  Eigen::VectorXd b_;
};

/// Preintegrated IMU constraint between (pose, vel)_i, (pose, vel)_j with the
/// bias of state i.
class ImuFactor : public Factor {
 public:
  ImuFactor(long i, long j, const PreintegratedImu& pim, const Vec3& gravity);
  std::string type() const override { return "imu"; }
  Eigen::VectorXd evaluate(const Values& values, std::vector<Eigen::MatrixXd>* jac) const override;
  const PreintegratedImu& pim() const { return pim_; }

 private:
  PreintegratedImu pim_;
  Vec3 gravity_;
};

}  // namespace hfusion
