#pragma once

// Measurement data model, JSONL log ingestion and replay ordering.

#include <Eigen/Core>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "hfusion/geometry.hpp"

namespace hfusion {

using FrameId = std::string;

inline const FrameId kWorldFrame = "W";
inline const FrameId kOdomFrame = "O";
inline const FrameId kImuFrame = "I";

struct ImuSample {
  double t = 0.0;
  Vec3 accel = Vec3::Zero();  // specific force [m/s^2]
  Vec3 gyro = Vec3::Zero();   // [rad/s]
};

/// T_RS of sensor S expressed in reference frame R.
struct AbsolutePoseMeas {
  double t = 0.0;
  FrameId ref_frame;
  FrameId sensor_frame;
  Pose3 pose;
  Mat6 cov = Mat6::Identity();  // tangent space (angular, linear)
};

struct AbsolutePositionMeas {
  double t = 0.0;
  FrameId ref_frame;
  FrameId sensor_frame;
  Vec3 position = Vec3::Zero();
  Mat3 cov = Mat3::Identity();
};

struct LandmarkMeas {
  double t = 0.0;
  FrameId sensor_frame;
  long landmark_id = 0;
  Vec3 position_in_sensor = Vec3::Zero();
  Mat3 cov = Mat3::Identity();
};

/// Velocity of the sensor origin w.r.t. W, expressed in S. A zero angular
/// rate means "not measured"; the estimator then uses the IMU gyro.
struct LocalVelocityMeas {
  double t = 0.0;
  FrameId sensor_frame;
  Vec3 velocity_in_sensor = Vec3::Zero();
  Vec3 angular_in_sensor = Vec3::Zero();
  Mat3 cov = Mat3::Identity();
};

using Measurement = std::variant<ImuSample, AbsolutePoseMeas, AbsolutePositionMeas, LandmarkMeas, LocalVelocityMeas>;

// The enumerator order is also the tie-break order for equal timestamps.
enum class MeasKind { Imu = 0, AbsPose = 1, AbsPos = 2, Landmark = 3, LocalVel = 4 };

const char* kind_name(MeasKind k);
std::optional<MeasKind> kind_from_name(const std::string& s);

double meas_time(const Measurement& m);
MeasKind meas_kind(const Measurement& m);
/// Sensor frame; "I" for IMU samples.
const FrameId& meas_sensor(const Measurement& m);

struct StreamKey {
  MeasKind kind = MeasKind::Imu;
  FrameId sensor;
  auto operator<=>(const StreamKey&) const = default;
  /// "kind:sensor", e.g. "abs_pos:G". Used on the command line.
  std::string name() const;
  static std::optional<StreamKey> parse(const std::string& s);
};

StreamKey stream_of(const Measurement& m);

/// Continuous-time IMU noise densities and bias random walks.
struct ImuNoiseDensities {
  double gyro_noise_density = 1e-3;   // rad/s/sqrt(Hz)
  double accel_noise_density = 1e-2;  // m/s^2/sqrt(Hz)
  double gyro_bias_rw = 1e-5;         // rad/s^2/sqrt(Hz)
  double accel_bias_rw = 1e-4;        // m/s^3/sqrt(Hz)
  bool operator==(const ImuNoiseDensities&) const = default;
};

struct MeasurementLog {
  double gravity = 9.81;
  std::map<FrameId, Pose3> extrinsics{{kImuFrame, Pose3::identity()}};  // T_IS
  std::vector<FrameId> ref_frames{kWorldFrame};
  ImuNoiseDensities imu_noise;
  std::map<StreamKey, std::vector<Measurement>> streams;

  void add(const Measurement& m) { streams[stream_of(m)].push_back(m); }
  std::size_t size() const;
  /// All measurements ordered by (t, kind, sensor), stable within a stream.
  std::vector<Measurement> time_sorted() const;
  std::vector<ImuSample> imu() const;
  bool has_ref_frame(const FrameId& f) const;
};

class LogError : public std::runtime_error {
 public:
  LogError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// nullopt when m is symmetric (residual < 1e-9) and Cholesky succeeds;
/// otherwise the reason.
std::optional<std::string> validate_spd(const Eigen::MatrixXd& m);

MeasurementLog parse_log(const std::string& path);
MeasurementLog parse_log_text(const std::string& text);
std::string write_log_text(const MeasurementLog& log);
void write_log(const MeasurementLog& log, const std::string& path);

/// Field-for-field equality at full double precision.
bool logs_equal(const MeasurementLog& a, const MeasurementLog& b);
bool measurements_equal(const Measurement& a, const Measurement& b);

struct ReplayEvent {
  Measurement meas;
  double arrival = 0.0;
  bool droppable = false;  // delay exceeds the smoother lag
};

/// Events in arrival order, arrival = t + delay of the event's stream
/// (streams are named as in StreamKey::name). Ties keep timestamp order.
std::vector<ReplayEvent> merged_replay(const MeasurementLog& log, const std::map<std::string, double>& stream_delays,
                                       double lag);

}  // namespace hfusion
