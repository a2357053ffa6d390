#pragma once

// Trajectory alignment and error metrics.
//
// ATE/ARE are reported as mean and population standard deviation of the
// per-sample errors (mean of norms, not RMS). RTE/RRE average the relative
// pose error over every sample pair spanning `delta` meters of reference arc
// length; RTE in percent of the spanned distance, RRE in deg/m.

#include <filesystem>
#include <stdexcept>
#include <vector>

#include "hfusion/trajectory.hpp"

namespace hfusion {

class MetricsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Index pairs (est, ref) matched by nearest timestamp within max_dt.
struct Association {
  std::vector<std::size_t> est;
  std::vector<std::size_t> ref;
  std::size_t size() const { return est.size(); }
};

Association associate(const Trajectory& est, const Trajectory& ref, double max_dt = 0.005);

struct Alignment {
  Pose3 T;  // ref ~ scale * R * est + t
  double scale = 1.0;
};

/// Least-squares similarity (or rigid) transform mapping est onto ref.
/// Throws MetricsError on fewer than 3 points or a collinear set.
Alignment umeyama_align(const std::vector<Vec3>& est, const std::vector<Vec3>& ref, bool with_scale);
Alignment umeyama_align(const Trajectory& est, const Trajectory& ref, bool with_scale, double max_dt = 0.005);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

struct AbsoluteErrors {
  MeanStd ate;  // m
  MeanStd are;  // deg
  std::size_t pairs = 0;
  Pose3 alignment;  // applied to est
  std::vector<double> t, translation, rotation_deg;  // per associated sample
};

/// With align, est is first rigidly aligned to ref (Umeyama, no scale).
AbsoluteErrors ate_are(const Trajectory& est, const Trajectory& ref, bool align, double max_dt = 0.005);

struct RelativeErrors {
  double rte = 0.0;  // %
  double rre = 0.0;  // deg/m
  std::size_t pairs = 0;
};

/// Throws MetricsError when the reference covers less than delta of arc.
RelativeErrors rte_rre(const Trajectory& est, const Trajectory& ref, double delta = 1.0, double max_dt = 0.005);

struct Smoothness {
  std::size_t noj = 0;
  double jerk = 0.0;  // mean norm of the third derivative [m/s^3]
};

/// NOJ counts consecutive displacements above jump_threshold; jerk uses the
/// four-point third difference with spacing 1/rate. rate <= 0 infers it
/// from the timestamps. Throws on fewer than 4 samples or uneven sampling.
Smoothness noj_jerk(const Trajectory& traj, double jump_threshold = 0.10, double rate = 0.0);

struct EvalOptions {
  bool align = true;
  double delta = 1.0;
  double jump_threshold = 0.10;
  double rate = 0.0;
  double max_dt = 0.005;
};

struct MetricsReport {
  double ate_mean = 0.0, ate_std = 0.0;  // m
  double are_mean = 0.0, are_std = 0.0;  // deg
  double rte = 0.0;                      // %
  double rre = 0.0;                      // deg/m
  std::size_t noj = 0;
  double jerk = 0.0;  // m/s^3, of the estimate
  std::size_t pairs = 0;
};

struct Evaluation {
  MetricsReport report;
  AbsoluteErrors absolute;
};

Evaluation evaluate(const Trajectory& est, const Trajectory& ref, const EvalOptions& opts = {});

std::string format_report(const MetricsReport& r);
/// One header line and one value line.
void write_report_csv(const std::filesystem::path& path, const MetricsReport& r);
/// t, ate, are_deg, est xyz (aligned), ref xyz per associated sample.
void write_plot_csv(const std::filesystem::path& path, const Evaluation& e, const Trajectory& est,
                    const Trajectory& ref, double max_dt = 0.005);

}  // namespace hfusion
