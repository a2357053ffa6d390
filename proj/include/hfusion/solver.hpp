#pragma once

// Levenberg-Marquardt over the factor graph, marginal covariances and
// Schur-complement marginalization.

#include <Eigen/Sparse>
#include <map>
#include <stdexcept>
#include <vector>

#include "hfusion/factor_graph.hpp"

namespace hfusion {

class SolverError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SolverOptions {
  int max_iterations = 100;
  /// Converged when the relative cost decrease of an accepted step is below this.
  double rel_tol = 1e-8;
  /// Converged when the cost drops below this.
  double abs_tol = 0.0;
  /// Converged when the infinity norm of J^T r drops below this.
  double grad_tol = 0.0;
  /// Converged when an accepted step moves no coordinate by more than this
  /// (the cost change is then round-off).
  double step_tol = 1e-10;
  /// 0 gives plain Gauss-Newton until a step fails to decrease the cost.
  double initial_lambda = 1e-4;
  /// Damping taken up when a Gauss-Newton step fails. Damping that decays
  /// below 1e-12 switches back to Gauss-Newton.
  double gauss_newton_fallback = 1e-7;
  double max_lambda = 1e12;
};

struct SolverReport {
  int iterations = 0;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  bool converged = false;
  std::vector<double> cost_trace;  // cost after every accepted step
  double gradient_norm = 0.0;      // infinity norm of J^T r at the returned values
  std::string message;
};

struct OptimizeResult {
  Values values;
  SolverReport report;
};

/// Normal equations H dx = -g at the current values; H and g carry the
/// whitening and robust IRLS weights.
struct LinearSystem {
  std::vector<Key> ordering;
  std::map<Key, int> offsets;
  int dim = 0;
  Eigen::SparseMatrix<double> H;  // full symmetric
  Eigen::VectorXd g;
  double cost = 0.0;
};

/// Orders every key referenced by the factors (time-major, dynamic last).
LinearSystem build_linear_system(const FactorList& factors, const Values& values);

OptimizeResult optimize(const FactorList& factors, const Values& initial, const SolverOptions& options = {});

/// Tangent-space covariance blocks of the requested keys at `values`.
/// Throws SolverError when the information matrix is singular.
std::map<Key, Eigen::MatrixXd> marginal_covariances(const FactorList& factors, const Values& values,
                                                     const std::vector<Key>& keys);

/// Joint covariance of several keys, stacked in the given order.
Eigen::MatrixXd joint_marginal_covariance(const FactorList& factors, const Values& values,
                                          const std::vector<Key>& keys);

/// Maps a covariance of the right perturbation of T to the left (world)
/// perturbation: Ad(T) M Ad(T)^T.
Mat6 covariance_in_world(const Pose3& T, const Mat6& M);

struct MarginalizationResult {
  FactorList kept;             // factors not touching the dropped keys
  FactorPtr prior;             // null when the Markov blanket is empty
  std::vector<Key> blanket;
};

/// Eliminates drop_keys with a Schur complement linearized at `values` and
/// returns the remaining factors plus a linear prior on the Markov blanket.
MarginalizationResult marginalize(const FactorList& factors, const Values& values, const std::vector<Key>& drop_keys);

}  // namespace hfusion
