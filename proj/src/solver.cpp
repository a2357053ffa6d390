#include "hfusion/solver.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/SparseCholesky>
#include <algorithm>
#include <cmath>
#include <set>

namespace hfusion {

namespace {

using SparseLDLT = Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>, Eigen::Lower, Eigen::AMDOrdering<int>>;

struct Block {
  int offset;
  int dim;
};

// Assembles J^T J and J^T r. The sparsity pattern depends only on the factor
// structure, so the slot of every Hessian entry is located once and later
// linearizations accumulate straight into the compressed storage.
class Assembler {
 public:
  Assembler(const FactorList& factors, const Values& values) : factors_(factors) {
    std::set<Key> keys;
    for (const auto& f : factors) keys.insert(f->keys().begin(), f->keys().end());
    for (const Key& k : keys) {
      ordering_.push_back(k);
      offsets_[k] = dim_;
      dim_ += values.dim(k);
    }
    blocks_.resize(factors.size());
    std::vector<Eigen::Triplet<double>> triplets;
    for (std::size_t i = 0; i < factors.size(); ++i) {
      for (const Key& k : factors[i]->keys()) blocks_[i].push_back({offsets_.at(k), values.dim(k)});
      for_each_entry(blocks_[i], [&](int r, int c) { triplets.emplace_back(r, c, 0.0); });
    }
    pattern_.resize(dim_, dim_);
    pattern_.setFromTriplets(triplets.begin(), triplets.end());
    pattern_.makeCompressed();
    slots_.reserve(triplets.size());
    for (const auto& t : triplets) {
      const int* begin = pattern_.innerIndexPtr() + pattern_.outerIndexPtr()[t.col()];
      const int* end = pattern_.innerIndexPtr() + pattern_.outerIndexPtr()[t.col() + 1];
      slots_.push_back(static_cast<int>(std::lower_bound(begin, end, t.row()) - pattern_.innerIndexPtr()));
    }
  }

  LinearSystem assemble(const Values& values) const {
    LinearSystem sys;
    sys.ordering = ordering_;
    sys.offsets = offsets_;
    sys.dim = dim_;
    sys.g = Eigen::VectorXd::Zero(dim_);
    sys.H = pattern_;
    double* H = sys.H.valuePtr();
    std::size_t n = 0;
    for (std::size_t i = 0; i < factors_.size(); ++i) {
      const Factor::Linearization lin = factors_[i]->linearize(values);
      sys.cost += lin.cost();
      const auto& blocks = blocks_[i];
      for (std::size_t a = 0; a < blocks.size(); ++a) {
        const Eigen::MatrixXd& Ja = lin.J[a];
        sys.g.segment(blocks[a].offset, blocks[a].dim) += Ja.transpose() * lin.r;
        for (std::size_t b = a; b < blocks.size(); ++b) {
          const Eigen::MatrixXd Hab = Ja.transpose() * lin.J[b];
          for (int r = 0; r < Hab.rows(); ++r)
            for (int c = 0; c < Hab.cols(); ++c) {
              H[slots_[n++]] += Hab(r, c);
              if (b != a) H[slots_[n++]] += Hab(r, c);
            }
        }
      }
    }
    return sys;
  }

 private:
  // Visits entries in the order assemble() fills them.
  template <class F>
  static void for_each_entry(const std::vector<Block>& blocks, F&& f) {
    for (std::size_t a = 0; a < blocks.size(); ++a)
      for (std::size_t b = a; b < blocks.size(); ++b)
        for (int r = 0; r < blocks[a].dim; ++r)
          for (int c = 0; c < blocks[b].dim; ++c) {
            f(blocks[a].offset + r, blocks[b].offset + c);
            if (b != a) f(blocks[b].offset + c, blocks[a].offset + r);
          }
  }

  const FactorList& factors_;
  std::vector<Key> ordering_;
  std::map<Key, int> offsets_;
  int dim_ = 0;
  std::vector<std::vector<Block>> blocks_;
  Eigen::SparseMatrix<double> pattern_;
  std::vector<int> slots_;
};

bool ldlt_ok(const SparseLDLT& ldlt) {
  if (ldlt.info() != Eigen::Success) return false;
  const Eigen::VectorXd D = ldlt.vectorD();
  if (D.size() == 0) return true;
  const double scale = std::max(1.0, D.cwiseAbs().maxCoeff());
  return D.minCoeff() > 1e-13 * scale && D.allFinite();
}

Values apply_step(const Values& values, const LinearSystem& sys, const Eigen::VectorXd& dx) {
  Values out = values;
  for (const Key& k : sys.ordering) {
    const int off = sys.offsets.at(k);
    out.retract(k, dx.segment(off, values.dim(k)));
  }
  return out;
}

}  // namespace

LinearSystem build_linear_system(const FactorList& factors, const Values& values) {
  return Assembler(factors, values).assemble(values);
}

OptimizeResult optimize(const FactorList& factors, const Values& initial, const SolverOptions& options) {
  OptimizeResult res{initial, {}};
  SolverReport& rep = res.report;
  double cost = total_cost(factors, initial);
  if (!std::isfinite(cost)) throw SolverError("non-finite cost at the initial values");
  rep.initial_cost = rep.final_cost = cost;
  rep.cost_trace.push_back(cost);
  double lambda = options.initial_lambda;
  bool gauss_newton = lambda == 0.0;
  double nu = 2.0;

  const Assembler assembler(factors, initial);
  SparseLDLT ldlt;
  bool analyzed = false;
  for (int it = 0; it < options.max_iterations; ++it) {
    const LinearSystem sys = assembler.assemble(res.values);
    rep.gradient_norm = sys.dim ? sys.g.lpNorm<Eigen::Infinity>() : 0.0;
    if (sys.dim == 0 || cost <= options.abs_tol || rep.gradient_norm < options.grad_tol) {
      rep.converged = true;
      rep.message = "converged";
      break;
    }
    ++rep.iterations;

    const Eigen::VectorXd diag = sys.H.diagonal().cwiseMax(1e-6).cwiseMin(1e32);
    // the pattern is fixed by the factor structure, so one analysis serves every iteration
    if (!analyzed) {
      ldlt.analyzePattern(sys.H);
      analyzed = true;
    }
    bool accepted = false;
    while (!accepted) {
      Eigen::SparseMatrix<double> A = sys.H;
      if (lambda > 0.0)
        for (int i = 0; i < sys.dim; ++i) A.coeffRef(i, i) += lambda * diag(i);
      ldlt.factorize(A);
      if (ldlt_ok(ldlt)) {
        const Eigen::VectorXd dx = ldlt.solve(-sys.g);
        Values candidate = apply_step(res.values, sys, dx);
        const double new_cost = total_cost(factors, candidate);
        if (std::isfinite(new_cost) && new_cost <= cost) {
          const double rel = cost > 0.0 ? (cost - new_cost) / cost : 0.0;
          const double cost_before = cost;
          res.values = std::move(candidate);
          cost = new_cost;
          rep.cost_trace.push_back(cost);
          // Nielsen's update: keep the damping where the quadratic model
          // predicts the decrease well. Below the floor the damping still
          // dominates weakly constrained directions, so switch to plain
          // Gauss-Newton.
          if (!gauss_newton) {
            const double predicted = -dx.dot(sys.g) - 0.5 * dx.dot(sys.H * dx);
            const double rho = predicted > 0.0 ? (cost_before - new_cost) / predicted : 0.0;
            lambda *= std::max(1.0 / 3.0, 1.0 - std::pow(2.0 * rho - 1.0, 3));
            nu = 2.0;
            if (lambda < 1e-12) {
              lambda = 0.0;
              gauss_newton = true;
            }
          }
          accepted = true;
          if (rel < options.rel_tol || cost <= options.abs_tol || dx.lpNorm<Eigen::Infinity>() < options.step_tol) {
            rep.converged = true;
            rep.message = "converged";
          }
          continue;
        }
      }
      if (gauss_newton) {
        gauss_newton = false;
        lambda = options.gauss_newton_fallback;
        nu = 2.0;
      } else {
        lambda *= nu;
        nu *= 2.0;
      }
      if (lambda > options.max_lambda) break;
    }
    if (!accepted) {
      rep.message = "damping exhausted";
      // no descent direction left: either a minimum or a singular system
      const LinearSystem s = assembler.assemble(res.values);
      rep.gradient_norm = s.g.lpNorm<Eigen::Infinity>();
      ldlt.factorize(s.H);
      if (!ldlt_ok(ldlt)) throw SolverError("singular system after damping escalation (missing prior?)");
      rep.converged = true;
      break;
    }
    if (rep.converged) {
      rep.gradient_norm = assembler.assemble(res.values).g.lpNorm<Eigen::Infinity>();
      break;
    }
  }
  if (!rep.converged) {
    if (rep.message.empty()) rep.message = "iteration limit";
    rep.gradient_norm = assembler.assemble(res.values).g.lpNorm<Eigen::Infinity>();
  }
  rep.final_cost = cost;
  return res;
}

Eigen::MatrixXd joint_marginal_covariance(const FactorList& factors, const Values& values,
                                          const std::vector<Key>& keys) {
  const LinearSystem sys = build_linear_system(factors, values);
  SparseLDLT ldlt(sys.H);
  if (!ldlt_ok(ldlt)) throw SolverError("singular information matrix");
  int n = 0;
  std::vector<int> cols;
  for (const Key& k : keys) {
    auto it = sys.offsets.find(k);
    if (it == sys.offsets.end()) throw SolverError("no factor constrains " + k.str());
    for (int i = 0; i < values.dim(k); ++i) cols.push_back(it->second + i);
    n += values.dim(k);
  }
  Eigen::MatrixXd E = Eigen::MatrixXd::Zero(sys.dim, n);
  for (int c = 0; c < n; ++c) E(cols[c], c) = 1.0;
  const Eigen::MatrixXd X = ldlt.solve(E);
  Eigen::MatrixXd out(n, n);
  for (int r = 0; r < n; ++r) out.row(r) = X.row(cols[r]);
  return 0.5 * (out + out.transpose());
}

std::map<Key, Eigen::MatrixXd> marginal_covariances(const FactorList& factors, const Values& values,
                                                     const std::vector<Key>& keys) {
  const LinearSystem sys = build_linear_system(factors, values);
  SparseLDLT ldlt(sys.H);
  if (!ldlt_ok(ldlt)) throw SolverError("singular information matrix");
  std::map<Key, Eigen::MatrixXd> out;
  for (const Key& k : keys) {
    auto it = sys.offsets.find(k);
    if (it == sys.offsets.end()) throw SolverError("no factor constrains " + k.str());
    const int d = values.dim(k);
    Eigen::MatrixXd E = Eigen::MatrixXd::Zero(sys.dim, d);
    for (int i = 0; i < d; ++i) E(it->second + i, i) = 1.0;
    const Eigen::MatrixXd X = ldlt.solve(E);
    const Eigen::MatrixXd block = X.middleRows(it->second, d);
    out[k] = 0.5 * (block + block.transpose());
  }
  return out;
}

Mat6 covariance_in_world(const Pose3& T, const Mat6& M) {
  const Mat6 Ad = adjoint(T);
  return Ad * M * Ad.transpose();
}

MarginalizationResult marginalize(const FactorList& factors, const Values& values, const std::vector<Key>& drop_keys) {
  MarginalizationResult out;
  const std::set<Key> drop(drop_keys.begin(), drop_keys.end());
  FactorList touching;
  std::set<Key> involved_drop, blanket;
  for (const auto& f : factors) {
    bool hit = false;
    for (const Key& k : f->keys()) hit = hit || drop.count(k);
    if (!hit) {
      out.kept.push_back(f);
      continue;
    }
    touching.push_back(f);
    for (const Key& k : f->keys()) (drop.count(k) ? involved_drop : blanket).insert(k);
  }
  out.blanket.assign(blanket.begin(), blanket.end());
  if (touching.empty()) return out;

  std::map<Key, int> offsets;
  int nd = 0, n = 0;
  for (const Key& k : involved_drop) {
    offsets[k] = n;
    n += values.dim(k);
  }
  nd = n;
  for (const Key& k : blanket) {
    offsets[k] = n;
    n += values.dim(k);
  }
  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(n, n);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(n);
  for (const auto& f : touching) {
    const Factor::Linearization lin = f->linearize(values);
    const auto& ks = f->keys();
    for (std::size_t a = 0; a < ks.size(); ++a) {
      const int oa = offsets.at(ks[a]);
      g.segment(oa, lin.J[a].cols()) += lin.J[a].transpose() * lin.r;
      for (std::size_t b = 0; b < ks.size(); ++b) {
        const int ob = offsets.at(ks[b]);
        H.block(oa, ob, lin.J[a].cols(), lin.J[b].cols()) += lin.J[a].transpose() * lin.J[b];
      }
    }
  }
  const int nb = n - nd;
  const Eigen::MatrixXd Hdd = H.topLeftCorner(nd, nd);
  Eigen::LDLT<Eigen::MatrixXd> ldlt(Hdd);
  const Eigen::VectorXd D = ldlt.vectorD();
  if (ldlt.info() != Eigen::Success || D.minCoeff() <= 1e-12 * std::max(1.0, D.cwiseAbs().maxCoeff()))
    throw SolverError("marginalized variables are not determined by their factors");
  if (nb == 0) return out;

  const Eigen::MatrixXd Hbd = H.bottomLeftCorner(nb, nd);
  const Eigen::MatrixXd Hm = H.bottomRightCorner(nb, nb) - Hbd * ldlt.solve(Hbd.transpose());
  const Eigen::VectorXd gm = g.tail(nb) - Hbd * ldlt.solve(g.head(nd));

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (Hm + Hm.transpose()));
  const Eigen::VectorXd ev = eig.eigenvalues();
  const double tol = 1e-12 * std::max(1.0, ev.cwiseAbs().maxCoeff());
  std::vector<int> keep;
  for (int i = 0; i < nb; ++i)
    if (ev(i) > tol) keep.push_back(i);
  if (keep.empty()) return out;
  Eigen::MatrixXd A(keep.size(), nb);
  Eigen::VectorXd b(keep.size());
  for (std::size_t r = 0; r < keep.size(); ++r) {
    const double s = std::sqrt(ev(keep[r]));
    const Eigen::VectorXd v = eig.eigenvectors().col(keep[r]);
    A.row(r) = s * v.transpose();
    b(r) = v.dot(gm) / s;
  }
  out.prior = std::make_shared<LinearFactor>(out.blanket, values, A, b);
  return out;
}

}  // namespace hfusion
