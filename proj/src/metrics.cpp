#include "hfusion/metrics.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace hfusion {

namespace {

constexpr double kRadToDeg = 180.0 / 3.14159265358979323846;

MeanStd mean_std(const std::vector<double>& v) {
  MeanStd out;
  if (v.empty()) return out;
  for (double x : v) out.mean += x;
  out.mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - out.mean) * (x - out.mean);
  out.std = std::sqrt(ss / static_cast<double>(v.size()));
  return out;
}

}  // namespace

Association associate(const Trajectory& est, const Trajectory& ref, double max_dt) {
  Association a;
  for (std::size_t i = 0; i < est.size(); ++i) {
    const long j = ref.nearest(est[i].t, max_dt);
    if (j < 0) continue;
    a.est.push_back(i);
    a.ref.push_back(static_cast<std::size_t>(j));
  }
  if (a.size() == 0) throw MetricsError("no timestamps associate within " + std::to_string(max_dt) + " s");
  return a;
}

Alignment umeyama_align(const std::vector<Vec3>& est, const std::vector<Vec3>& ref, bool with_scale) {
  if (est.size() != ref.size()) throw MetricsError("point sets differ in size");
  const std::size_t n = est.size();
  if (n < 3) throw MetricsError("alignment needs at least 3 points");
  Vec3 me = Vec3::Zero(), mr = Vec3::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    me += est[i];
    mr += ref[i];
  }
  me /= static_cast<double>(n);
  mr /= static_cast<double>(n);
  Mat3 sigma = Mat3::Zero();
  Mat3 spread_e = Mat3::Zero(), spread_r = Mat3::Zero();
  double var_e = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 de = est[i] - me, dr = ref[i] - mr;
    sigma += dr * de.transpose();
    spread_e += de * de.transpose();
    spread_r += dr * dr.transpose();
    var_e += de.squaredNorm();
  }
  sigma /= static_cast<double>(n);
  var_e /= static_cast<double>(n);
  for (const Mat3* s : {&spread_e, &spread_r}) {
    const Vec3 ev = Eigen::SelfAdjointEigenSolver<Mat3>(*s).eigenvalues();  // ascending
    if (!(ev(2) > 0.0) || ev(1) <= 1e-12 * ev(2)) throw MetricsError("degenerate (collinear) point set");
  }
  Eigen::JacobiSVD<Mat3> svd(sigma, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 S = Mat3::Identity();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) S(2, 2) = -1.0;
  const Mat3 R = svd.matrixU() * S * svd.matrixV().transpose();
  Alignment out;
  out.scale = with_scale ? (svd.singularValues().asDiagonal() * S).trace() / var_e : 1.0;
  out.T = Pose3(Rot3::from_matrix(R), mr - out.scale * (R * me));
  return out;
}

Alignment umeyama_align(const Trajectory& est, const Trajectory& ref, bool with_scale, double max_dt) {
  const Association a = associate(est, ref, max_dt);
  std::vector<Vec3> pe, pr;
  for (std::size_t k = 0; k < a.size(); ++k) {
    pe.push_back(est[a.est[k]].pose.translation());
    pr.push_back(ref[a.ref[k]].pose.translation());
  }
  return umeyama_align(pe, pr, with_scale);
}

AbsoluteErrors ate_are(const Trajectory& est, const Trajectory& ref, bool align, double max_dt) {
  const Association a = associate(est, ref, max_dt);
  AbsoluteErrors out;
  if (align) out.alignment = umeyama_align(est, ref, false, max_dt).T;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const Pose3 e = out.alignment * est[a.est[k]].pose;
    const Pose3& r = ref[a.ref[k]].pose;
    out.t.push_back(ref[a.ref[k]].t);
    out.translation.push_back((e.translation() - r.translation()).norm());
    out.rotation_deg.push_back(rotation_distance(e.rotation(), r.rotation()) * kRadToDeg);
  }
  out.ate = mean_std(out.translation);
  out.are = mean_std(out.rotation_deg);
  out.pairs = a.size();
  return out;
}

RelativeErrors rte_rre(const Trajectory& est, const Trajectory& ref, double delta, double max_dt) {
  if (!(delta > 0.0)) throw MetricsError("delta must be positive");
  const Association a = associate(est, ref, max_dt);
  std::vector<double> arc(a.size(), 0.0);
  for (std::size_t k = 1; k < a.size(); ++k)
    arc[k] = arc[k - 1] +
             (ref[a.ref[k]].pose.translation() - ref[a.ref[k - 1]].pose.translation()).norm();
  if (arc.back() < delta)
    throw MetricsError("reference covers " + std::to_string(arc.back()) + " m, less than delta");
  RelativeErrors out;
  double rte = 0.0, rre = 0.0;
  std::size_t j = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    j = std::max(j, i + 1);
    while (j < a.size() && arc[j] - arc[i] < delta) ++j;
    if (j >= a.size()) break;
    const double dist = arc[j] - arc[i];
    const Pose3 dr = ref[a.ref[i]].pose.inverse() * ref[a.ref[j]].pose;
    const Pose3 de = est[a.est[i]].pose.inverse() * est[a.est[j]].pose;
    const Pose3 err = dr.inverse() * de;
    rte += 100.0 * err.translation().norm() / dist;
    rre += rotation_distance(err.rotation(), Rot3::identity()) * kRadToDeg / dist;
    ++out.pairs;
  }
  out.rte = rte / static_cast<double>(out.pairs);
  out.rre = rre / static_cast<double>(out.pairs);
  return out;
}

Smoothness noj_jerk(const Trajectory& traj, double jump_threshold, double rate) {
  const std::size_t n = traj.size();
  if (n < 4) throw MetricsError("smoothness metrics need at least 4 samples");
  const double span = traj[n - 1].t - traj[0].t;
  const double h = rate > 0.0 ? 1.0 / rate : span / static_cast<double>(n - 1);
  for (std::size_t i = 1; i < n; ++i)
    if (std::abs(traj[i].t - traj[i - 1].t - h) > 1e-3 * h)
      throw MetricsError("trajectory is not uniformly sampled at " + std::to_string(1.0 / h) + " Hz");
  Smoothness out;
  for (std::size_t i = 1; i < n; ++i)
    if ((traj[i].pose.translation() - traj[i - 1].pose.translation()).norm() > jump_threshold) ++out.noj;
  double sum = 0.0;
  for (std::size_t i = 0; i + 3 < n; ++i) {
    const Vec3 d3 = traj[i + 3].pose.translation() - 3.0 * traj[i + 2].pose.translation() +
                    3.0 * traj[i + 1].pose.translation() - traj[i].pose.translation();
    sum += d3.norm() / (h * h * h);
  }
  out.jerk = sum / static_cast<double>(n - 3);
  return out;
}

Evaluation evaluate(const Trajectory& est, const Trajectory& ref, const EvalOptions& opts) {
  Evaluation e;
  e.absolute = ate_are(est, ref, opts.align, opts.max_dt);
  const RelativeErrors rel = rte_rre(est, ref, opts.delta, opts.max_dt);
  const Smoothness sm = noj_jerk(est, opts.jump_threshold, opts.rate);
  MetricsReport& r = e.report;
  r.ate_mean = e.absolute.ate.mean;
  r.ate_std = e.absolute.ate.std;
  r.are_mean = e.absolute.are.mean;
  r.are_std = e.absolute.are.std;
  r.rte = rel.rte;
  r.rre = rel.rre;
  r.noj = sm.noj;
  r.jerk = sm.jerk;
  r.pairs = e.absolute.pairs;
  return e;
}

std::string format_report(const MetricsReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "pairs        %zu\n"
                "ATE [m]      %.6f +- %.6f\n"
                "ARE [deg]    %.6f +- %.6f\n"
                "RTE [%%]      %.6f\n"
                "RRE [deg/m]  %.6f\n"
                "NOJ          %zu\n"
                "jerk [m/s^3] %.6f\n",
                r.pairs, r.ate_mean, r.ate_std, r.are_mean, r.are_std, r.rte, r.rre, r.noj, r.jerk);
  return buf;
}

void write_report_csv(const std::filesystem::path& path, const MetricsReport& r) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  char buf[512];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%zu,%.9g\n", r.pairs, r.ate_mean, r.ate_std,
                r.are_mean, r.are_std, r.rte, r.rre, r.noj, r.jerk);
  f << "pairs,ate_mean,ate_std,are_mean,are_std,rte,rre,noj,jerk\n" << buf;
}

void write_plot_csv(const std::filesystem::path& path, const Evaluation& e, const Trajectory& est,
                    const Trajectory& ref, double max_dt) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  const Association a = associate(est, ref, max_dt);
  f << "t,ate,are_deg,est_x,est_y,est_z,ref_x,ref_y,ref_z\n";
  char buf[256];
  for (std::size_t k = 0; k < a.size(); ++k) {
    const Vec3 pe = e.absolute.alignment * est[a.est[k]].pose.translation();
    const Vec3& pr = ref[a.ref[k]].pose.translation();
    std::snprintf(buf, sizeof buf, "%.9f,%.9g,%.9g,%.9f,%.9f,%.9f,%.9f,%.9f,%.9f\n", ref[a.ref[k]].t,
                  e.absolute.translation[k], e.absolute.rotation_deg[k], pe.x(), pe.y(), pe.z(), pr.x(), pr.y(),
                  pr.z());
    f << buf;
  }
}

}  // namespace hfusion
