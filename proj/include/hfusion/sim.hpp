#pragma once

// Deterministic synthetic scenarios: ground truth, drifting reference frames
// and every measurement kind. The random number generator is specified in
// docs/rng.md so logs can be reproduced elsewhere.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "hfusion/imu.hpp"
#include "hfusion/measurements.hpp"
#include "hfusion/trajectory.hpp"

namespace hfusion {

class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next();
  /// Uniform in [0, 1) from the top 53 bits.
  double uniform();
  /// Standard normal by Box-Muller; the second variate of each pair is cached.
  double gaussian();

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Seed of a named sub-stream: splitmix64 finalizer of seed ^ FNV-1a(name).
std::uint64_t stream_seed(std::uint64_t seed, std::string_view name);

enum class TrajectoryKind { Circle, FigureEight, Waypoints };

struct TrajectoryConfig {
  TrajectoryKind kind = TrajectoryKind::FigureEight;
  double speed = 1.5;     // nominal speed after the ramp [m/s]
  double size = 25.0;     // circle radius or figure-eight half width [m]
  std::vector<Vec3> waypoints;  // closed loop for Waypoints (z used as height)
  double hold = 2.0;      // static time at the start [s]
  double ramp = 3.0;      // smoothstep acceleration time [s]
  double roll_amp = 0.05;   // [rad]
  double pitch_amp = 0.05;  // [rad]
  double height_amp = 0.5;  // [m]
  Vec3 origin = Vec3::Zero();
};

struct DriftSpec {
  /// Random walk per sqrt(s), (rot, trans), stepped at 1 Hz and pivoting
  /// about the robot position.
  Vec6 rw_sigma = Vec6::Zero();
  /// Deterministic twist rate, applied as exp(rate * t).
  Vec6 linear_rate = Vec6::Zero();
  /// Smooth drift exp(amp * sin(2 pi t / period)).
  Vec6 sine_amp = Vec6::Zero();
  double sine_period = 60.0;
  Pose3 initial;  // T_W,R at t = 0
};

struct ImuSimConfig {
  double rate = 400.0;
  ImuNoiseDensities noise;
  Vec6 initial_bias_sigma = Vec6::Zero();  // (gyro, accel)
};

struct GnssSimConfig {
  std::string sensor = "G";
  double rate = 10.0;
  double sigma = 0.05;
  Pose3 extrinsic{Rot3::identity(), Vec3(0.1, 0.0, 0.3)};
};

struct PoseSimConfig {
  std::string sensor = "L";
  std::string ref_frame = "M_lo";
  double rate = 10.0;
  double sigma_pos = 0.02;
  double sigma_rot = 0.005;
  Pose3 extrinsic{Rot3::from_rpy(0.0, 0.0, 0.1), Vec3(0.2, 0.0, 0.1)};
  DriftSpec drift;
};

struct LandmarkSimConfig {
  std::string sensor = "C";
  double rate = 5.0;
  int count = 60;
  double range = 10.0;
  int max_per_frame = 6;
  double lateral_spread = 6.0;
  double sigma = 0.05;
  Pose3 extrinsic{Rot3::from_rpy(-1.5707963267948966, 0.0, -1.5707963267948966), Vec3(0.3, 0.0, 0.2)};
};

struct VelocitySimConfig {
  std::string sensor = "V";
  double rate = 20.0;
  double sigma = 0.05;
  Pose3 extrinsic{Rot3::identity(), Vec3(0.0, 0.0, -0.3)};
};

struct Outage {
  std::string stream;  // StreamKey name, e.g. "abs_pos:G"
  double start = 0.0;
  double end = 0.0;
};

struct ScenarioConfig {
  std::string name = "custom";
  double duration = 60.0;
  std::uint64_t seed = 1;
  /// Zero measurement and IMU noise, zero biases and no drift. The log
  /// still declares the configured sigmas.
  bool noise_free = false;
  double gravity = 9.81;
  TrajectoryConfig trajectory;
  ImuSimConfig imu;
  std::optional<GnssSimConfig> gnss;
  std::optional<PoseSimConfig> pose;
  std::optional<LandmarkSimConfig> landmarks;
  std::optional<VelocitySimConfig> velocity;
  std::vector<Outage> outages;

  /// Throws std::invalid_argument on an inconsistent configuration.
  void validate() const;
};

struct GroundTruth {
  std::vector<NavState> states;  // one per IMU sample, with the true bias
  std::vector<Vec3> body_rates;  // true angular rate over [t_k, t_k+1)
  std::map<FrameId, std::vector<std::pair<double, Pose3>>> drift_knots;  // random-walk knots at 1 Hz, geodesic in between
  std::map<FrameId, DriftSpec> drift_specs;
  std::map<long, Vec3> landmarks;
  double imu_rate = 400.0;

  /// True T_W,R(t).
  Pose3 alignment(const FrameId& frame, double t) const;
  /// Nearest stored state (exact on IMU ticks).
  const NavState& state_at(double t) const;
  Trajectory trajectory() const;
};

struct SimResult {
  GroundTruth gt;
  MeasurementLog log;
  double initial_yaw = 0.0;
};

SimResult generate(const ScenarioConfig& config);

/// Removes the stream's measurements with t in [start, end].
MeasurementLog inject_outage(const MeasurementLog& log, const std::string& stream, double start, double end);

/// Drift random walk of the corridor scenario relative to hike-like.
inline constexpr double kCorridorDriftFactor = 5.0;

/// "hike-like", "parkour-like", "degenerate-corridor".
std::map<std::string, ScenarioConfig> standard_scenarios();

/// JSON round trip. scenario_from_json accepts {"scenario": "<name>", ...}
/// and applies the remaining fields as a merge patch over that scenario.
std::string scenario_to_json(const ScenarioConfig& c);
ScenarioConfig scenario_from_json(const std::string& text);

/// gt.tum, gt_bias.csv, drift.csv and landmarks.csv in dir.
void write_ground_truth(const GroundTruth& gt, const std::filesystem::path& dir);

}  // namespace hfusion
