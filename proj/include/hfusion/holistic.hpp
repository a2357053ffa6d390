#pragma once

// The holistic graph: dense navigation states created at a fixed rate from
// buffered IMU data, plus the dynamic variables (reference-frame keyframes,
// landmarks, calibration corrections) that measurements create on demand.

#include <deque>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "hfusion/factor_graph.hpp"
#include "hfusion/holistic_factors.hpp"
#include "hfusion/imu.hpp"
#include "hfusion/measurements.hpp"

namespace hfusion {

struct GraphConfig {
  double state_rate = 40.0;  // Hz
  double keyframe_dt = 10.0;  // s
  bool random_walk = true;    // false: one alignment variable per frame, never rolled over
  bool origin_anchoring = false;
  /// Random-walk density per sqrt(s), (rot, trans).
  Vec6 rw_sigma = make_vec6(1e-3, 2e-2);
  std::map<FrameId, Vec6> rw_sigma_per_frame;
  Vec6 align_prior_sigma = make_vec6(1.0, 10.0);
  std::set<FrameId> calibrate;
  Vec6 calib_prior_sigma = make_vec6(0.05, 0.1);
  std::map<FrameId, RobustKernel> kernels;
  NoiseSpec noise;
  /// Largest distance to an IMU sample for the velocity factor's body rate.
  double gyro_window = 0.05;

  const Vec6& rw_sigma_for(const FrameId& frame) const;
  RobustKernel kernel_for(const FrameId& sensor) const;
};

template <class T>
struct Belief {
  T mean;
  Eigen::MatrixXd cov;
};

struct RefAlignState {
  FrameId ref_frame;
  long k = 0;
  Vec3 t_RK = Vec3::Zero();  // keyframe position in the reference frame
  double created_at = 0.0;
  double last_seen = 0.0;
  bool active = true;        // variable present in the graph
  bool marginalized = false;  // eliminated for good (superseded keyframe)
  std::optional<Belief<Pose3>> belief;  // kept while inactive
  Key key() const { return align_key(ref_frame, k); }
};

struct LandmarkState {
  long id = 0;
  double first_seen = 0.0;
  double last_seen = 0.0;
  bool active = true;
  std::optional<Belief<Vec3>> belief;
  Key key() const { return landmark_key(id); }
};

struct CalibState {
  FrameId sensor;
  bool pose_kind = true;  // Pose3 correction, otherwise a position offset
  Key key() const { return pose_kind ? calib_pose_key(sensor) : calib_pos_key(sensor); }
};

enum class AddStatus { Added, Pending, Stale, Rejected };

struct AddResult {
  AddStatus status = AddStatus::Added;
  std::string reason;
  std::vector<Key> new_keys;
  FactorList factors;  // measurement factor first, then any structural factors
};

struct InitialPriors {
  Vec6 pose_sigma = make_vec6(0.05, 1.0);
  double vel_sigma = 0.1;
  Vec6 bias_sigma = (Vec6() << 0.01, 0.01, 0.01, 0.1, 0.1, 0.1).finished();
};

class GraphError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class HolisticGraph {
 public:
  HolisticGraph(GraphConfig config, std::map<FrameId, Pose3> extrinsics);

  /// Creates state 0 at x0.t with priors. IMU samples buffered before the
  /// call are kept. pose_cov replaces the diagonal pose prior when given.
  void initialize(const NavState& x0, const InitialPriors& priors = {},
                  const std::optional<Mat6>& pose_cov = std::nullopt);
  bool initialized() const { return initialized_; }

  /// Buffers a sample and creates every state the IMU data now covers.
  /// Returns the indices of the new states.
  std::vector<long> add_imu(const ImuSample& s);

  /// Overrides the predicted initial value for future states (batch
  /// initialization from an earlier estimate).
  void set_initial_guess(std::map<long, NavState> guess) { guess_ = std::move(guess); }

  AddResult add_measurement(const Measurement& m);

  const GraphConfig& config() const { return config_; }
  const Values& values() const { return values_; }
  void set_values(const Values& v);
  const FactorList& factors() const { return factors_; }
  void add_factor(FactorPtr f) { factors_.push_back(std::move(f)); }

  double t0() const { return t0_; }
  double state_time(long j) const { return t0_ + static_cast<double>(j) / config_.state_rate; }
  long state_index(double t) const;
  long first_state() const { return first_state_; }
  long last_state() const { return last_state_; }
  long num_states() const { return initialized_ ? last_state_ - first_state_ + 1 : 0; }
  NavState nav_state(long j) const;

  const std::map<FrameId, std::vector<RefAlignState>>& ref_frames() const { return frames_; }
  const std::map<long, LandmarkState>& landmarks() const { return landmarks_; }
  const std::map<FrameId, CalibState>& calibrations() const { return calibs_; }
  int rollover_count(const FrameId& frame) const;
  /// Number of dynamic variables currently in the graph.
  std::size_t num_dynamic_variables() const;

  /// Keyframe in use at time t (the last one created at or before t).
  const RefAlignState* keyframe_at(const FrameId& frame, double t) const;
  /// T_W,R at time t from the keyframe in use: T_WK * [I, -t_RK].
  std::optional<Pose3> alignment_at(const FrameId& frame, double t) const;

  const std::deque<ImuSample>& imu_buffer() const { return imu_; }

  // Window management.
  /// Eliminates the given keys (Schur complement at the current values).
  void marginalize(const std::vector<Key>& keys);
  /// Eliminates nav states with t_j < t; returns their last values.
  std::vector<NavState> marginalize_states_before(double t);
  /// Eliminates a dynamic variable, storing value and covariance so a later
  /// measurement can reinstate it through a prior.
  void deactivate(const Key& key, const Eigen::MatrixXd& cov);
  /// Drops buffered IMU samples no longer needed by the window.
  void trim_imu();

 private:
  void create_state(long j);
  PreintegratedImu preintegrate(double ta, double tb, const ImuBias& bias) const;
  std::optional<Vec3> body_rate(double t, const ImuBias& bias) const;

  // Steps of measurement factor creation.
  Pose3 extrinsic(const FrameId& sensor) const;
  std::optional<Key> calibration(const FrameId& sensor, bool pose_kind, AddResult& out);
  /// Returns nullptr when the keyframe for t has been eliminated.
  RefAlignState* keyframe_for(const FrameId& ref, double t, const Vec3& measured_position, const Pose3& T_WS_est,
                              const Pose3& z_full, bool has_rotation, AddResult& out);
  void reinstate(RefAlignState& kf, AddResult& out);
  RefAlignState& roll_over(std::vector<RefAlignState>& chain, double t, const Vec3& measured_position,
                           AddResult& out);

  GraphConfig config_;
  std::map<FrameId, Pose3> extrinsics_;
  bool initialized_ = false;
  double t0_ = 0.0;
  long first_state_ = 0;
  long last_state_ = -1;
  std::deque<ImuSample> imu_;
  std::map<long, NavState> guess_;
  Values values_;
  FactorList factors_;
  std::map<FrameId, std::vector<RefAlignState>> frames_;
  std::map<long, LandmarkState> landmarks_;
  std::map<FrameId, CalibState> calibs_;
};

}  // namespace hfusion
