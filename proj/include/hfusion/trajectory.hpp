#pragma once

// Time-stamped pose sequences and their TUM text form
//   t x y z qx qy qz qw
// with t and xyz printed to 9 decimals, the quaternion to 12 and qw >= 0.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "hfusion/geometry.hpp"

namespace hfusion {

struct StampedPose {
  double t = 0.0;
  Pose3 pose;
};

class Trajectory {
 public:
  Trajectory() = default;
  explicit Trajectory(std::vector<StampedPose> samples);

  /// Appends a sample; t must exceed the last stamp.
  void push_back(double t, const Pose3& pose);
  std::size_t size() const { return samples_.size(); }
  bool empty() const { return samples_.empty(); }
  const StampedPose& operator[](std::size_t i) const { return samples_[i]; }
  const std::vector<StampedPose>& samples() const { return samples_; }
  auto begin() const { return samples_.begin(); }
  auto end() const { return samples_.end(); }
  /// Index of the sample nearest to t, or -1 when none lies within tol.
  long nearest(double t, double tol) const;
  /// Applies T on the left of every pose.
  Trajectory transformed(const Pose3& T) const;

 private:
  std::vector<StampedPose> samples_;
};

std::string format_tum_line(double t, const Pose3& pose);
void write_tum(std::ostream& os, const Trajectory& traj);
void write_tum(const std::filesystem::path& path, const Trajectory& traj);
/// Skips blank lines and lines starting with '#'. Throws std::runtime_error
/// with the line number on malformed input.
Trajectory read_tum(std::istream& is);
Trajectory read_tum(const std::filesystem::path& path);

}  // namespace hfusion
