#pragma once

// Online fixed-lag estimation with IMU-rate world and odometry outputs, and
// offline batch smoothing over a whole log.
//
// The online estimator is driven synchronously: measurements are handed to
// ingest() and IMU samples to tick_imu() in arrival order. All graph mutation
// happens on that single call path; beliefs handed out are immutable
// snapshots.

#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "hfusion/holistic.hpp"
#include "hfusion/solver.hpp"
#include "hfusion/trajectory.hpp"

namespace hfusion {

class EstimatorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EstimatorConfig {
  GraphConfig graph;
  double lag = 3.0;  // s
  InitialPriors priors;
  /// Prior sigmas used when no measurement or config fixes position / yaw.
  double unknown_position_sigma = 1e3;
  double unknown_yaw_sigma = 3.14159;
  double init_duration = 0.5;  // s of IMU data averaged for roll/pitch
  std::optional<Vec3> initial_position;
  std::optional<double> initial_yaw;
  /// Non-IMU measurements arriving within this window share one epoch.
  double coalesce_window = 0.01;
  /// Marginal covariance of the newest pose at every epoch.
  bool compute_marginals = true;
  /// Both start undamped: the dense state chain is badly conditioned and a
  /// Marquardt term of 1e-4 stalls the smooth modes for several iterations.
  SolverOptions online_solver{.max_iterations = 20, .rel_tol = 1e-6, .initial_lambda = 0.0};
  SolverOptions batch_solver{.initial_lambda = 0.0};
  /// Every n-th state's marginal is exported after a batch solve (0: none).
  int marginal_stride = 40;
  /// Overrides the densities declared in the log header.
  std::optional<ImuNoiseDensities> imu_noise;

  /// Throws EstimatorError. imu_rate <= 0 skips the rate check.
  void validate(double imu_rate = 0.0) const;
};

std::string estimator_config_to_json(const EstimatorConfig& c);
/// Every field is optional; missing ones keep their defaults.
EstimatorConfig estimator_config_from_json(const std::string& text);
EstimatorConfig load_estimator_config(const std::string& path);

struct SensorSetup {
  std::map<FrameId, Pose3> extrinsics;
  NoiseSpec noise;
  static SensorSetup from_log(const MeasurementLog& log, const EstimatorConfig& cfg);
};

struct WorldBelief {
  double t = 0.0;
  NavState state;                // newest optimized state
  std::optional<Mat6> pose_cov;  // its marginal, right perturbation
  std::map<FrameId, Pose3> alignments;  // T_W,R at t
  long epoch = 0;
};

struct OdomBelief {
  double t = 0.0;
  Pose3 T_OI;
  Vec3 v_O = Vec3::Zero();
};

struct InitialEstimate {
  NavState state;
  Mat6 pose_cov;  // prior covariance on the pose, right perturbation
};

/// Static-start initialization: roll/pitch from the mean specific force of
/// the first init_duration seconds, position and yaw from the first
/// world-frame absolute measurement (or the config), zero velocity and bias.
InitialEstimate initialize(const std::vector<ImuSample>& imu, const std::vector<Measurement>& early,
                           const EstimatorConfig& cfg, const SensorSetup& setup);

struct IngestResult {
  bool accepted = true;
  std::string reason;
};

struct DroppedMeasurement {
  Measurement meas;
  std::string reason;
};

struct EpochReport {
  double t = 0.0;
  int iterations = 0;
  double final_cost = 0.0;
  bool converged = false;
  bool skipped = false;  // solver failure, values kept
  std::string message;
  long window_states = 0;
  std::size_t num_values = 0;
  std::size_t num_dynamic = 0;
};

struct KeyframeTraceRow {
  double t = 0.0;  // epoch time
  FrameId frame;
  long k = 0;
  bool active = true;
  Vec3 t_RK = Vec3::Zero();
  Pose3 T_WK;
};

struct DriftRow {
  FrameId frame;
  double t = 0.0;
  Pose3 T_WR;
};

/// NavState advanced from x.t to t through buffered samples (sample k acts
/// on [t_k, t_k+1)).
NavState propagate_to(const NavState& x, const std::deque<ImuSample>& buffer, double t, const Vec3& gravity);

/// T_frame,I(t) from the graph's current values: the alignment and the nav
/// state come from the same solution.
Pose3 query_state_in_frame(const HolisticGraph& graph, const FrameId& frame, double t);

class OnlineEstimator {
 public:
  OnlineEstimator(EstimatorConfig config, SensorSetup setup);

  IngestResult ingest(const Measurement& m);

  struct Output {
    NavState world;  // newest belief propagated to the sample time
    OdomBelief odom;
  };
  /// Buffers the sample, runs any due epoch and advances both outputs.
  /// Nothing is returned before initialization.
  std::optional<Output> tick_imu(const ImuSample& s);

  /// Re-solves the window, applies marginalization and the variable
  /// lifecycle. Without new non-IMU factors (and without force) a no-op.
  bool optimize_epoch(bool force = false);

  bool initialized() const { return graph_.initialized(); }
  double now() const { return now_; }
  std::shared_ptr<const WorldBelief> belief() const { return belief_; }
  const OdomBelief& odom() const { return odom_; }
  const HolisticGraph& graph() const { return graph_; }
  const EstimatorConfig& config() const { return config_; }
  Pose3 query_state_in_frame(const FrameId& frame, double t) const;

  /// Last estimate of every state created so far.
  std::map<long, NavState> state_history() const;
  const std::vector<EpochReport>& epochs() const { return epochs_; }
  const std::vector<DroppedMeasurement>& dropped() const { return dropped_; }
  const std::vector<KeyframeTraceRow>& keyframe_trace() const { return keyframe_trace_; }
  const std::vector<DriftRow>& drift_trace() const { return drift_trace_; }

 private:
  void try_initialize();
  void add_to_graph(const Measurement& m);
  void retry_waiting();
  bool epoch_due() const;
  void manage_lifecycle(double cutoff);
  void publish_belief();

  EstimatorConfig config_;
  SensorSetup setup_;
  HolisticGraph graph_;
  double now_ = -std::numeric_limits<double>::infinity();
  std::vector<ImuSample> init_imu_;
  std::vector<Measurement> early_;
  std::vector<Measurement> waiting_;  // their states do not exist yet
  std::optional<double> first_pending_arrival_;
  std::size_t new_factors_ = 0;
  long epoch_count_ = 0;
  std::shared_ptr<const WorldBelief> belief_;
  std::optional<NavState> world_;
  std::optional<ImuSample> last_sample_;
  OdomBelief odom_;
  std::map<long, NavState> history_;
  std::vector<EpochReport> epochs_;
  std::vector<DroppedMeasurement> dropped_;
  std::vector<KeyframeTraceRow> keyframe_trace_;
  std::vector<DriftRow> drift_trace_;
};

struct OnlineRun {
  Trajectory world;  // IMU rate
  Trajectory odom;   // IMU rate
  std::map<FrameId, Trajectory> frames;  // T_R,I per reference frame
  std::map<long, NavState> states;
  std::vector<EpochReport> epochs;
  std::vector<DroppedMeasurement> dropped;
  std::vector<KeyframeTraceRow> keyframe_trace;
  std::vector<DriftRow> drift_trace;
  double t0 = 0.0;
};

/// Replays a log through the online estimator, with per-stream delays
/// (stream name -> s) applied to arrival times.
OnlineRun run_online(const MeasurementLog& log, const EstimatorConfig& cfg,
                     const std::map<std::string, double>& delays = {});

enum class BatchInit { Online, Propagation, Identity };

struct BatchOptions {
  BatchInit init = BatchInit::Propagation;
  const std::map<long, NavState>* online_states = nullptr;  // for BatchInit::Online
  bool compute_marginals = true;
  /// Measurements enter the graph in arrival order under these per-stream
  /// delays (the factor set does not change, only its order).
  std::map<std::string, double> delays;
};

struct BatchResult {
  HolisticGraph graph;  // holds the solution
  SolverReport report;
  Trajectory trajectory;  // one pose per state
  std::vector<std::pair<double, Mat6>> marginals;  // (t, pose covariance)
  std::size_t num_states = 0;
  std::size_t num_dynamic = 0;
};

/// Full-horizon smoothing: no marginalization, no reactivation priors.
BatchResult batch_optimize(const MeasurementLog& log, const EstimatorConfig& cfg, const BatchOptions& opts = {});

// Exports.
void write_keyframe_trace_csv(const std::filesystem::path& path, const std::vector<KeyframeTraceRow>& rows);
void write_drift_csv(const std::filesystem::path& path, const std::vector<DriftRow>& rows);
void write_marginals_csv(const std::filesystem::path& path, const std::vector<std::pair<double, Mat6>>& rows);
void write_epochs_csv(const std::filesystem::path& path, const std::vector<EpochReport>& rows);
std::vector<DriftRow> read_drift_csv(const std::filesystem::path& path);

}  // namespace hfusion
