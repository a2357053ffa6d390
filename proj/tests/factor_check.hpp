#pragma once

#include <vector>

#include "hfusion/factor_graph.hpp"
#include "test_utils.hpp"

namespace hfusion::testing {

/// Worst relative error over the factor's Jacobian blocks against central
/// differences of evaluate() under each variable's own retraction.
inline double factor_jacobian_error(const Factor& f, const Values& values, double step = 1e-6) {
  std::vector<Eigen::MatrixXd> J;
  f.evaluate(values, &J);
  double worst = 0.0;
  for (std::size_t i = 0; i < f.keys().size(); ++i) {
    const Key& key = f.keys()[i];
    const int n = values.dim(key);
    const Eigen::MatrixXd num = numerical_jacobian(
        [&](const Eigen::VectorXd& d) -> Eigen::VectorXd {
          Values v = values;
          v.retract(key, d);
          return f.evaluate(v, nullptr);
        },
        n, step);
    worst = std::max(worst, jacobian_error(J[i], num));
  }
  return worst;
}

}  // namespace hfusion::testing
