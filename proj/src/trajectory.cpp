#include "hfusion/trajectory.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace hfusion {

Trajectory::Trajectory(std::vector<StampedPose> samples) : samples_(std::move(samples)) {
  for (std::size_t i = 1; i < samples_.size(); ++i)
    if (!(samples_[i].t > samples_[i - 1].t)) throw std::invalid_argument("trajectory stamps must increase");
}

void Trajectory::push_back(double t, const Pose3& pose) {
  if (!samples_.empty() && !(t > samples_.back().t)) throw std::invalid_argument("trajectory stamps must increase");
  samples_.push_back({t, pose});
}

long Trajectory::nearest(double t, double tol) const {
  auto it = std::lower_bound(samples_.begin(), samples_.end(), t,
                             [](const StampedPose& s, double v) { return s.t < v; });
  long best = -1;
  double best_d = tol;
  auto consider = [&](std::vector<StampedPose>::const_iterator c) {
    const double d = std::abs(c->t - t);
    if (d <= best_d) {
      best_d = d;
      best = c - samples_.begin();
    }
  };
  if (it != samples_.begin()) consider(std::prev(it));
  if (it != samples_.end()) consider(it);
  return best;
}

Trajectory Trajectory::transformed(const Pose3& T) const {
  Trajectory out;
  out.samples_.reserve(samples_.size());
  for (const auto& s : samples_) out.samples_.push_back({s.t, T * s.pose});
  return out;
}

std::string format_tum_line(double t, const Pose3& pose) {
  Quat q = pose.rotation().quaternion();
  if (q.w() < 0.0) q.coeffs() = -q.coeffs();
  const Vec3& p = pose.translation();
  char buf[256];
  std::snprintf(buf, sizeof buf, "%.9f %.9f %.9f %.9f %.12f %.12f %.12f %.12f", t, p.x(), p.y(), p.z(), q.x(), q.y(),
                q.z(), q.w());
  return buf;
}

void write_tum(std::ostream& os, const Trajectory& traj) {
  for (const auto& s : traj) os << format_tum_line(s.t, s.pose) << '\n';
}

void write_tum(const std::filesystem::path& path, const Trajectory& traj) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  write_tum(f, traj);
}

Trajectory read_tum(std::istream& is) {
  Trajectory traj;
  std::string line;
  int n = 0;
  while (std::getline(is, line)) {
    ++n;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ss(line);
    double v[8];
    for (double& x : v)
      if (!(ss >> x)) throw std::runtime_error("TUM line " + std::to_string(n) + ": expected 8 numbers");
    std::string extra;
    if (ss >> extra) throw std::runtime_error("TUM line " + std::to_string(n) + ": trailing data");
    Quat q(v[7], v[4], v[5], v[6]);
    if (std::abs(q.norm() - 1.0) > 1e-6) throw std::runtime_error("TUM line " + std::to_string(n) + ": quaternion not unit");
    if (traj.size() && !(v[0] > traj[traj.size() - 1].t))
      throw std::runtime_error("TUM line " + std::to_string(n) + ": timestamps must increase");
    traj.push_back(v[0], Pose3(Rot3(q.normalized()), Vec3(v[1], v[2], v[3])));
  }
  return traj;
}

Trajectory read_tum(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  return read_tum(f);
}

}  // namespace hfusion
