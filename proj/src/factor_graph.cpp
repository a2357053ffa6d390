#include "hfusion/factor_graph.hpp"

#include <Eigen/Cholesky>
#include <cmath>
#include <stdexcept>
#include <tuple>

namespace hfusion {

std::strong_ordering Key::operator<=>(const Key& o) const {
  const int g = is_nav() ? 0 : 1;
  const int og = o.is_nav() ? 0 : 1;
  if (g != og) return g <=> og;
  if (g == 0) {
    if (index != o.index) return index <=> o.index;
    return static_cast<int>(kind) <=> static_cast<int>(o.kind);
  }
  if (kind != o.kind) return static_cast<int>(kind) <=> static_cast<int>(o.kind);
  if (auto c = frame.compare(o.frame); c != 0) return c <=> 0;
  return index <=> o.index;
}

std::string Key::str() const {
  switch (kind) {
    case VarKind::NavPose: return "x" + std::to_string(index);
    case VarKind::NavVel: return "v" + std::to_string(index);
    case VarKind::NavBias: return "b" + std::to_string(index);
    case VarKind::Align: return "T_W_" + frame + "_K" + std::to_string(index);
    case VarKind::Landmark: return "l" + std::to_string(index);
    case VarKind::CalibPose: return "calib_pose_" + frame;
    case VarKind::CalibPos: return "calib_pos_" + frame;
    case VarKind::Vector: return "y" + std::to_string(index);
  }
  return "?";
}

int variable_dim(const Variable& v) {
  if (std::holds_alternative<Pose3>(v)) return 6;
  return static_cast<int>(std::get<Eigen::VectorXd>(v).size());
}

Variable retract_variable(const Variable& v, const Eigen::VectorXd& delta) {
  if (const auto* p = std::get_if<Pose3>(&v)) return retract(*p, Vec6(delta));
  return Eigen::VectorXd(std::get<Eigen::VectorXd>(v) + delta);
}

Eigen::VectorXd local_coordinates(const Variable& a, const Variable& b) {
  if (const auto* pa = std::get_if<Pose3>(&a)) return se3_log_vector(pa->inverse() * std::get<Pose3>(b));
  return std::get<Eigen::VectorXd>(b) - std::get<Eigen::VectorXd>(a);
}

Eigen::MatrixXd local_jacobian(const Variable& x0, const Variable& x) {
  if (const auto* p0 = std::get_if<Pose3>(&x0)) {
    return right_jacobian_se3_inverse(se3_log_vector(p0->inverse() * std::get<Pose3>(x)));
  }
  const auto n = std::get<Eigen::VectorXd>(x0).size();
  return Eigen::MatrixXd::Identity(n, n);
}

const Variable& Values::at(const Key& k) const {
  auto it = vars_.find(k);
  if (it == vars_.end()) throw std::out_of_range("no value for key " + k.str());
  return it->second;
}

const Pose3& Values::pose(const Key& k) const { return std::get<Pose3>(at(k)); }
const Eigen::VectorXd& Values::vector(const Key& k) const { return std::get<Eigen::VectorXd>(at(k)); }

Vec3 Values::vec3(const Key& k) const {
  const Eigen::VectorXd& v = vector(k);
  if (v.size() != 3) throw std::logic_error("key " + k.str() + " is not a 3-vector");
  return v;
}

double RobustKernel::rho(double s) const {
  if (type == Type::None || std::isinf(c)) return s;
  const double c2 = c * c;
  switch (type) {
    case Type::Huber: return s <= c2 ? s : 2.0 * c * std::sqrt(s) - c2;
    case Type::Cauchy: return c2 * std::log1p(s / c2);
    case Type::Tukey: {
      if (s >= c2) return c2 / 3.0;
      const double u = 1.0 - s / c2;
      return c2 / 3.0 * (1.0 - u * u * u);
    }
    case Type::None: break;
  }
  return s;
}

double RobustKernel::weight(double s) const {
  if (type == Type::None || std::isinf(c)) return 1.0;
  const double c2 = c * c;
  switch (type) {
    case Type::Huber: return s <= c2 ? 1.0 : c / std::sqrt(s);
    case Type::Cauchy: return 1.0 / (1.0 + s / c2);
    case Type::Tukey: {
      if (s >= c2) return 0.0;
      const double u = 1.0 - s / c2;
      return u * u;
    }
    case Type::None: break;
  }
  return 1.0;
}

Factor::Factor(std::vector<Key> keys, const Eigen::MatrixXd& cov, RobustKernel kernel)
    : keys_(std::move(keys)), kernel_(kernel) {
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (cov.rows() != cov.cols() || llt.info() != Eigen::Success)
    throw std::invalid_argument("factor covariance is not positive definite");
  const Eigen::MatrixXd L = llt.matrixL();
  sqrt_info_ = L.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd::Identity(cov.rows(), cov.cols()));
}

Factor::Factor(std::vector<Key> keys, int dim, Prewhitened)
    : keys_(std::move(keys)), sqrt_info_(Eigen::MatrixXd::Identity(dim, dim)) {}

Eigen::VectorXd Factor::whitened_residual(const Values& values) const {
  return sqrt_info_ * evaluate(values, nullptr);
}

double Factor::cost(const Values& values) const { return 0.5 * kernel_.rho(whitened_residual(values).squaredNorm()); }

Factor::Linearization Factor::linearize(const Values& values) const {
  Linearization lin;
  const Eigen::VectorXd r = evaluate(values, &lin.J);
  lin.r = sqrt_info_ * r;
  lin.sq_norm = lin.r.squaredNorm();
  lin.kernel = kernel_;
  const double scale = std::sqrt(kernel_.weight(lin.sq_norm));
  lin.r *= scale;
  for (auto& J : lin.J) J = scale * (sqrt_info_ * J);
  return lin;
}

double Factor::Linearization::cost() const { return 0.5 * kernel.rho(sq_norm); }

double total_cost(const FactorList& factors, const Values& values) {
  double c = 0.0;
  for (const auto& f : factors) c += f->cost(values);
  return c;
}

Eigen::MatrixXd diagonal_covariance(const Eigen::VectorXd& sigmas) {
  Eigen::VectorXd var = sigmas.array().square();
  var = var.cwiseMax(1e-12);
  return var.asDiagonal();
}

PriorFactor::PriorFactor(const Key& key, const Variable& prior, const Eigen::MatrixXd& cov, RobustKernel kernel)
    : Factor({key}, cov, kernel), prior_(prior) {
  if (variable_dim(prior) != cov.rows()) throw std::invalid_argument("prior covariance dimension mismatch");
}

Eigen::VectorXd PriorFactor::evaluate(const Values& values, std::vector<Eigen::MatrixXd>* jac) const {
  const Variable& x = values.at(keys()[0]);
  const Eigen::VectorXd r = local_coordinates(prior_, x);
  if (jac) *jac = {local_jacobian(prior_, x)};
  return r;
}

BetweenFactor::BetweenFactor(const Key& k1, const Key& k2, const Pose3& rel, const Eigen::MatrixXd& cov,
                             RobustKernel kernel)
    : Factor({k1, k2}, cov, kernel), rel_(rel) {}

Eigen::VectorXd BetweenFactor::evaluate(const Values& values, std::vector<Eigen::MatrixXd>* jac) const {
  const Pose3& T1 = values.pose(keys()[0]);
  const Pose3& T2 = values.pose(keys()[1]);
  const Vec6 r = se3_log_vector(rel_.inverse() * T1.inverse() * T2);
  if (jac) {
    const Mat6 Jinv = right_jacobian_se3_inverse(r);
    *jac = {-Jinv * adjoint(T2.inverse() * T1), Jinv};
  }
  return r;
}

VectorBetweenFactor::VectorBetweenFactor(const Key& k1, const Key& k2, const Eigen::VectorXd& mean,
                                         const Eigen::MatrixXd& cov)
    : Factor({k1, k2}, cov), mean_(mean) {}

Eigen::VectorXd VectorBetweenFactor::evaluate(const Values& values, std::vector<Eigen::MatrixXd>* jac) const {
  const Eigen::VectorXd& a = values.vector(keys()[0]);
  const Eigen::VectorXd& b = values.vector(keys()[1]);
  if (jac) {
    const auto n = a.size();
    *jac = {-Eigen::MatrixXd::Identity(n, n), Eigen::MatrixXd::Identity(n, n)};
  }
  return b - a - mean_;
}

LinearFactor::LinearFactor(std::vector<Key> keys, const Values& linearization_point, const Eigen::MatrixXd& A,
                           const Eigen::VectorXd& b)
    : Factor(keys, static_cast<int>(A.rows()), Prewhitened{}), A_(A), b_(b) {
  int cols = 0;
  for (const Key& k : keys) {
    x0_.push_back(linearization_point.at(k));
    cols += variable_dim(x0_.back());
  }
  if (cols != A.cols() || b.size() != A.rows()) throw std::invalid_argument("linear factor dimension mismatch");
}

Eigen::VectorXd LinearFactor::evaluate(const Values& values, std::vector<Eigen::MatrixXd>* jac) const {
  Eigen::VectorXd r = b_;
  if (jac) jac->clear();
  int col = 0;
  for (std::size_t i = 0; i < keys().size(); ++i) {
    const Variable& x = values.at(keys()[i]);
    const int d = variable_dim(x0_[i]);
    const auto Ai = A_.middleCols(col, d);
    r += Ai * local_coordinates(x0_[i], x);
    if (jac) jac->push_back(Ai * local_jacobian(x0_[i], x));
    col += d;
  }
  return r;
}

namespace {

Eigen::MatrixXd imu_covariance(const PreintegratedImu& pim) {
  Eigen::MatrixXd c = pim.cov();
  Eigen::LLT<Eigen::MatrixXd> llt(c);
  if (llt.info() != Eigen::Success) c += 1e-12 * Eigen::MatrixXd::Identity(9, 9);
  return c;
}

}  // namespace

ImuFactor::ImuFactor(long i, long j, const PreintegratedImu& pim, const Vec3& gravity)
    : Factor({nav_pose_key(i), nav_vel_key(i), nav_pose_key(j), nav_vel_key(j), nav_bias_key(i)}, imu_covariance(pim)),
      pim_(pim),
      gravity_(gravity) {}

Eigen::VectorXd ImuFactor::evaluate(const Values& values, std::vector<Eigen::MatrixXd>* jac) const {
  const auto& k = keys();
  const ImuResidual res = imu_residual(pim_, values.pose(k[0]), values.vec3(k[1]), values.pose(k[2]),
                                       values.vec3(k[3]), values.bias(k[4]), gravity_);
  if (jac) *jac = {res.J_pose_i, res.J_vel_i, res.J_pose_j, res.J_vel_j, res.J_bias_i};
  return res.r;
}

}  // namespace hfusion
