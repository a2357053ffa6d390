#pragma once

// A linear-Gaussian chain of 3-vectors with an independent dense solution.

#include <Eigen/Dense>
#include <vector>

#include "hfusion/factor_graph.hpp"
#include "test_utils.hpp"

namespace hfusion::testing {

struct LinearTerm {
  int i, j;  // j < 0 for an absolute term on x_i
  Eigen::Vector3d z;
  Eigen::Matrix3d cov;
};

struct LinearProblem {
  int n = 0;
  std::vector<LinearTerm> terms;

  FactorList factors() const {
    FactorList out;
    for (const auto& t : terms) {
      if (t.j < 0)
        out.push_back(std::make_shared<PriorFactor>(vector_key(t.i), Eigen::VectorXd(t.z), t.cov));
      else
        out.push_back(std::make_shared<VectorBetweenFactor>(vector_key(t.i), vector_key(t.j), t.z, t.cov));
    }
    return out;
  }

  Values zeros() const {
    Values v;
    for (int i = 0; i < n; ++i) v.insert(vector_key(i), Eigen::VectorXd(Eigen::Vector3d::Zero()));
    return v;
  }

  // Dense information form: cost = 1/2 (A x - z)^T W (A x - z).
  void normal_equations(Eigen::MatrixXd& H, Eigen::VectorXd& rhs) const {
    H = Eigen::MatrixXd::Zero(3 * n, 3 * n);
    rhs = Eigen::VectorXd::Zero(3 * n);
    for (const auto& t : terms) {
      Eigen::MatrixXd A = Eigen::MatrixXd::Zero(3, 3 * n);
      if (t.j < 0) {
        A.block<3, 3>(0, 3 * t.i) = Eigen::Matrix3d::Identity();
      } else {
        A.block<3, 3>(0, 3 * t.i) = -Eigen::Matrix3d::Identity();
        A.block<3, 3>(0, 3 * t.j) = Eigen::Matrix3d::Identity();
      }
      const Eigen::Matrix3d W = t.cov.inverse();
      H += A.transpose() * W * A;
      rhs += A.transpose() * W * t.z;
    }
  }

  Eigen::VectorXd solution() const {
    Eigen::MatrixXd H;
    Eigen::VectorXd rhs;
    normal_equations(H, rhs);
    return H.inverse() * rhs;
  }

  Eigen::MatrixXd covariance() const {
    Eigen::MatrixXd H;
    Eigen::VectorXd rhs;
    normal_equations(H, rhs);
    return H.inverse();
  }

  double cost(const Eigen::VectorXd& x) const {
    double c = 0.0;
    for (const auto& t : terms) {
      const Eigen::Vector3d pred = t.j < 0 ? Eigen::Vector3d(x.segment<3>(3 * t.i))
                                           : Eigen::Vector3d(x.segment<3>(3 * t.j) - x.segment<3>(3 * t.i));
      const Eigen::Vector3d e = pred - t.z;
      c += 0.5 * e.dot(t.cov.inverse() * e);
    }
    return c;
  }
};

inline Eigen::Matrix3d random_spd3() {
  Eigen::Matrix3d A;
  for (int i = 0; i < 9; ++i) A(i / 3, i % 3) = uniform(-1, 1);
  return A * A.transpose() + 0.2 * Eigen::Matrix3d::Identity();
}

/// Chain with a prior on x0, odometry between neighbours and a few absolute
/// fixes.
inline LinearProblem random_chain(int n) {
  LinearProblem p;
  p.n = n;
  p.terms.push_back({0, -1, random_vec3(1), random_spd3()});
  for (int i = 0; i + 1 < n; ++i) p.terms.push_back({i, i + 1, random_vec3(1), random_spd3()});
  for (int i = 3; i < n; i += 4) p.terms.push_back({i, -1, random_vec3(5), random_spd3()});
  return p;
}

}  // namespace hfusion::testing
