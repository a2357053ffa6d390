#include "hfusion/estimator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <tuple>

#include "json.hpp"

namespace hfusion {

using json = nlohmann::json;

// ---- configuration -----------------------------------------------------------

void EstimatorConfig::validate(double imu_rate) const {
  const auto& g = graph;
  if (!(g.state_rate > 0.0)) throw EstimatorError("state_rate must be positive");
  if (imu_rate > 0.0 && g.state_rate > imu_rate + 1e-9)
    throw EstimatorError("state_rate exceeds the IMU rate");
  if (!(lag >= 2.0 / g.state_rate)) throw EstimatorError("lag must cover at least two states");
  if (!(g.keyframe_dt > 0.0)) throw EstimatorError("keyframe_dt must be positive");
  if (!(init_duration > 0.0)) throw EstimatorError("init_duration must be positive");
  if (coalesce_window < 0.0) throw EstimatorError("coalesce_window must be non-negative");
  if (marginal_stride < 0) throw EstimatorError("marginal_stride must be non-negative");
  auto nonneg = [](const Eigen::VectorXd& v, const char* what) {
    if ((v.array() < 0.0).any() || !v.allFinite()) throw EstimatorError(std::string(what) + " must be finite and >= 0");
  };
  nonneg(g.rw_sigma, "rw_sigma");
  for (const auto& [f, s] : g.rw_sigma_per_frame) nonneg(s, "rw_sigma_per_frame");
  nonneg(g.align_prior_sigma, "align_prior_sigma");
  nonneg(g.calib_prior_sigma, "calib_prior_sigma");
  nonneg(priors.pose_sigma, "prior_pose_sigma");
  nonneg(priors.bias_sigma, "prior_bias_sigma");
  if (!(priors.vel_sigma > 0.0)) throw EstimatorError("prior_vel_sigma must be positive");
  if (!(unknown_position_sigma > 0.0) || !(unknown_yaw_sigma > 0.0))
    throw EstimatorError("unknown_*_sigma must be positive");
}

namespace {

json vec_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

Eigen::VectorXd json_vec(const json& j, int n, const std::string& key) {
  if (!j.is_array() || static_cast<int>(j.size()) != n)
    throw EstimatorError("config key " + key + ": expected an array of " + std::to_string(n) + " numbers");
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = j.at(i).get<double>();
  return v;
}

const char* kernel_name(RobustKernel::Type t) {
  switch (t) {
    case RobustKernel::Type::None: return "none";
    case RobustKernel::Type::Huber: return "huber";
    case RobustKernel::Type::Cauchy: return "cauchy";
    case RobustKernel::Type::Tukey: return "tukey";
  }
  return "none";
}

RobustKernel kernel_from(const json& j) {
  const std::string type = j.at("type").get<std::string>();
  const double c = j.contains("threshold") ? j.at("threshold").get<double>() : std::numeric_limits<double>::infinity();
  if (type == "none") return RobustKernel::none();
  if (!(c > 0.0)) throw EstimatorError("kernel threshold must be positive");
  if (type == "huber") return RobustKernel::huber(c);
  if (type == "cauchy") return RobustKernel::cauchy(c);
  if (type == "tukey") return RobustKernel::tukey(c);
  throw EstimatorError("unknown kernel type " + type);
}

json solver_json(const SolverOptions& s) {
  return {{"max_iterations", s.max_iterations}, {"rel_tol", s.rel_tol},   {"abs_tol", s.abs_tol},
          {"grad_tol", s.grad_tol},             {"step_tol", s.step_tol}, {"initial_lambda", s.initial_lambda},
          {"gauss_newton_fallback", s.gauss_newton_fallback}, {"max_lambda", s.max_lambda}};
}

SolverOptions solver_from(const json& j, SolverOptions s) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    if (k == "max_iterations") s.max_iterations = it->get<int>();
    else if (k == "rel_tol") s.rel_tol = it->get<double>();
    else if (k == "abs_tol") s.abs_tol = it->get<double>();
    else if (k == "grad_tol") s.grad_tol = it->get<double>();
    else if (k == "step_tol") s.step_tol = it->get<double>();
    else if (k == "initial_lambda") s.initial_lambda = it->get<double>();
    else if (k == "gauss_newton_fallback") s.gauss_newton_fallback = it->get<double>();
    else if (k == "max_lambda") s.max_lambda = it->get<double>();
    else throw EstimatorError("unknown solver option " + k);
  }
  return s;
}

}  // namespace

std::string estimator_config_to_json(const EstimatorConfig& c) {
  const auto& g = c.graph;
  json j;
  j["state_rate"] = g.state_rate;
  j["lag"] = c.lag;
  j["keyframe_dt"] = g.keyframe_dt;
  j["random_walk"] = g.random_walk;
  j["origin_anchoring"] = g.origin_anchoring;
  j["rw_sigma"] = vec_json(g.rw_sigma);
  json per = json::object();
  for (const auto& [f, s] : g.rw_sigma_per_frame) per[f] = vec_json(s);
  j["rw_sigma_per_frame"] = per;
  j["align_prior_sigma"] = vec_json(g.align_prior_sigma);
  j["calibrate"] = std::vector<std::string>(g.calibrate.begin(), g.calibrate.end());
  j["calib_prior_sigma"] = vec_json(g.calib_prior_sigma);
  json kern = json::object();
  for (const auto& [s, k] : g.kernels) {
    kern[s] = {{"type", kernel_name(k.type)}};
    if (std::isfinite(k.c)) kern[s]["threshold"] = k.c;
  }
  j["kernels"] = kern;
  j["gyro_window"] = g.gyro_window;
  j["prior_pose_sigma"] = vec_json(c.priors.pose_sigma);
  j["prior_vel_sigma"] = c.priors.vel_sigma;
  j["prior_bias_sigma"] = vec_json(c.priors.bias_sigma);
  j["unknown_position_sigma"] = c.unknown_position_sigma;
  j["unknown_yaw_sigma"] = c.unknown_yaw_sigma;
  j["init_duration"] = c.init_duration;
  if (c.initial_position) j["initial_position"] = vec_json(*c.initial_position);
  if (c.initial_yaw) j["initial_yaw"] = *c.initial_yaw;
  j["coalesce_window"] = c.coalesce_window;
  j["compute_marginals"] = c.compute_marginals;
  j["marginal_stride"] = c.marginal_stride;
  j["online_solver"] = solver_json(c.online_solver);
  j["batch_solver"] = solver_json(c.batch_solver);
  if (c.imu_noise)
    j["imu_noise"] = {{"gyro_noise_density", c.imu_noise->gyro_noise_density},
                      {"accel_noise_density", c.imu_noise->accel_noise_density},
                      {"gyro_bias_rw", c.imu_noise->gyro_bias_rw},
                      {"accel_bias_rw", c.imu_noise->accel_bias_rw}};
  return j.dump(2);
}

EstimatorConfig estimator_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw EstimatorError(std::string("estimator config: ") + e.what());
  }
  if (!j.is_object()) throw EstimatorError("estimator config must be a JSON object");
  EstimatorConfig c;
  auto& g = c.graph;
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      const json& v = it.value();
      if (k == "state_rate") g.state_rate = v.get<double>();
      else if (k == "lag") c.lag = v.get<double>();
      else if (k == "keyframe_dt") g.keyframe_dt = v.get<double>();
      else if (k == "random_walk") g.random_walk = v.get<bool>();
      else if (k == "origin_anchoring") g.origin_anchoring = v.get<bool>();
      else if (k == "rw_sigma") g.rw_sigma = json_vec(v, 6, k);
      else if (k == "rw_sigma_per_frame") {
        for (auto f = v.begin(); f != v.end(); ++f) g.rw_sigma_per_frame[f.key()] = json_vec(f.value(), 6, k);
      } else if (k == "align_prior_sigma") g.align_prior_sigma = json_vec(v, 6, k);
      else if (k == "calibrate") {
        for (const auto& s : v) g.calibrate.insert(s.get<std::string>());
      } else if (k == "calib_prior_sigma") g.calib_prior_sigma = json_vec(v, 6, k);
      else if (k == "kernels") {
        for (auto f = v.begin(); f != v.end(); ++f) g.kernels[f.key()] = kernel_from(f.value());
      } else if (k == "gyro_window") g.gyro_window = v.get<double>();
      else if (k == "prior_pose_sigma") c.priors.pose_sigma = json_vec(v, 6, k);
      else if (k == "prior_vel_sigma") c.priors.vel_sigma = v.get<double>();
      else if (k == "prior_bias_sigma") c.priors.bias_sigma = json_vec(v, 6, k);
      else if (k == "unknown_position_sigma") c.unknown_position_sigma = v.get<double>();
      else if (k == "unknown_yaw_sigma") c.unknown_yaw_sigma = v.get<double>();
      else if (k == "init_duration") c.init_duration = v.get<double>();
      else if (k == "initial_position") c.initial_position = Vec3(json_vec(v, 3, k));
      else if (k == "initial_yaw") c.initial_yaw = v.get<double>();
      else if (k == "coalesce_window") c.coalesce_window = v.get<double>();
      else if (k == "compute_marginals") c.compute_marginals = v.get<bool>();
      else if (k == "marginal_stride") c.marginal_stride = v.get<int>();
      else if (k == "online_solver") c.online_solver = solver_from(v, c.online_solver);
      else if (k == "batch_solver") c.batch_solver = solver_from(v, c.batch_solver);
      else if (k == "imu_noise") {
        ImuNoiseDensities n;
        n.gyro_noise_density = v.at("gyro_noise_density").get<double>();
        n.accel_noise_density = v.at("accel_noise_density").get<double>();
        n.gyro_bias_rw = v.at("gyro_bias_rw").get<double>();
        n.accel_bias_rw = v.at("accel_bias_rw").get<double>();
        c.imu_noise = n;
      } else throw EstimatorError("unknown config key " + k);
    }
  } catch (const json::exception& e) {
    throw EstimatorError(std::string("estimator config: ") + e.what());
  }
  c.validate();
  return c;
}

EstimatorConfig load_estimator_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw EstimatorError("cannot read " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return estimator_config_from_json(ss.str());
}

SensorSetup SensorSetup::from_log(const MeasurementLog& log, const EstimatorConfig& cfg) {
  SensorSetup s;
  s.extrinsics = log.extrinsics;
  s.noise = NoiseSpec::from_log(log);
  if (cfg.imu_noise) {
    s.noise.gyro_noise_density = cfg.imu_noise->gyro_noise_density;
    s.noise.accel_noise_density = cfg.imu_noise->accel_noise_density;
    s.noise.gyro_bias_rw = cfg.imu_noise->gyro_bias_rw;
    s.noise.accel_bias_rw = cfg.imu_noise->accel_bias_rw;
  }
  return s;
}

// ---- initialization ----------------------------------------------------------

InitialEstimate initialize(const std::vector<ImuSample>& imu, const std::vector<Measurement>& early,
                           const EstimatorConfig& cfg, const SensorSetup& setup) {
  if (imu.empty()) throw EstimatorError("initialization needs IMU data");
  const double t0 = imu.front().t;
  const double t_end = t0 + cfg.init_duration;
  if (imu.back().t < t_end - 1e-9)
    throw EstimatorError("initialization needs " + std::to_string(cfg.init_duration) + " s of IMU data");
  Vec3 f = Vec3::Zero();
  int n = 0;
  for (const auto& s : imu) {
    if (s.t > t_end + 1e-9) break;
    f += s.accel;
    ++n;
  }
  f /= n;
  const double g = setup.noise.gravity.norm();
  if (std::abs(f.norm() - g) > 0.2 * g)
    throw EstimatorError("mean specific force " + std::to_string(f.norm()) + " is inconsistent with gravity " +
                         std::to_string(g));
  const double roll = std::atan2(f.y(), f.z());
  const double pitch = std::atan2(-f.x(), std::hypot(f.y(), f.z()));

  std::vector<const Measurement*> world;
  for (const auto& m : early) {
    const double t = meas_time(m);
    if (t > t_end + 1e-9 || !setup.extrinsics.count(meas_sensor(m))) continue;
    if (const auto* p = std::get_if<AbsolutePoseMeas>(&m); p && p->ref_frame == kWorldFrame) world.push_back(&m);
    if (const auto* p = std::get_if<AbsolutePositionMeas>(&m); p && p->ref_frame == kWorldFrame) world.push_back(&m);
  }
  // canonical order, independent of arrival
  std::stable_sort(world.begin(), world.end(), [](const Measurement* a, const Measurement* b) {
    return std::make_tuple(meas_time(*a), meas_kind(*a), meas_sensor(*a)) <
           std::make_tuple(meas_time(*b), meas_kind(*b), meas_sensor(*b));
  });

  std::optional<double> yaw;
  for (const Measurement* m : world)
    if (const auto* p = std::get_if<AbsolutePoseMeas>(m)) {
      yaw = (p->pose * setup.extrinsics.at(p->sensor_frame).inverse()).rotation().yaw();
      break;
    }
  if (!yaw) yaw = cfg.initial_yaw;
  if (!yaw && !world.empty())
    throw EstimatorError("world-frame position measurements without a heading source: set initial_yaw");
  const bool yaw_known = yaw.has_value();

  InitialEstimate out;
  NavState& x = out.state;
  x.t = t0;
  x.R = Rot3::from_rpy(roll, pitch, yaw.value_or(0.0));
  bool position_known = true;
  if (!world.empty()) {
    const Measurement* m = world.front();
    if (const auto* p = std::get_if<AbsolutePoseMeas>(m))
      x.p = (p->pose * setup.extrinsics.at(p->sensor_frame).inverse()).translation();
    else {
      const auto& q = std::get<AbsolutePositionMeas>(*m);
      x.p = q.position - x.R * setup.extrinsics.at(q.sensor_frame).translation();
    }
  } else if (cfg.initial_position) {
    x.p = *cfg.initial_position;
  } else {
    position_known = false;
  }

  // world-frame sigmas mapped to the right perturbation of the pose
  const Vec6& s = cfg.priors.pose_sigma;
  Mat3 rot_w = Vec3(s(0) * s(0), s(1) * s(1), 0.0).asDiagonal();
  const double sy = yaw_known ? s(2) : cfg.unknown_yaw_sigma;
  rot_w(2, 2) = sy * sy;
  Mat3 trans_w = Vec3(s(3) * s(3), s(4) * s(4), s(5) * s(5)).asDiagonal();
  if (!position_known) trans_w = Mat3::Identity() * cfg.unknown_position_sigma * cfg.unknown_position_sigma;
  const Mat3 R = x.R.matrix();
  out.pose_cov = Mat6::Zero();
  out.pose_cov.topLeftCorner<3, 3>() = R.transpose() * rot_w * R;
  out.pose_cov.bottomRightCorner<3, 3>() = R.transpose() * trans_w * R;
  return out;
}

// ---- propagation and queries ---------------------------------------------------

NavState propagate_to(const NavState& x, const std::deque<ImuSample>& buffer, double t, const Vec3& gravity) {
  NavState s = x;
  if (t <= x.t + 1e-12) return s;
  auto it = std::upper_bound(buffer.begin(), buffer.end(), x.t + 1e-9,
                             [](double v, const ImuSample& a) { return v < a.t; });
  if (it == buffer.begin()) throw EstimatorError("no IMU sample covers the propagation start");
  --it;
  double cur = x.t;
  for (; it != buffer.end() && cur < t - 1e-12; ++it) {
    auto nx = std::next(it);
    const double end = nx == buffer.end() ? t : std::min(nx->t, t);
    if (end - cur > 1e-12) {
      s = propagate_step(s, *it, end - cur, gravity);
      cur = end;
    }
  }
  s.t = t;
  return s;
}

Pose3 query_state_in_frame(const HolisticGraph& graph, const FrameId& frame, double t) {
  if (!graph.initialized()) throw EstimatorError("estimator not initialized");
  const double t_first = graph.state_time(graph.first_state());
  const double t_last = graph.state_time(graph.last_state());
  if (t < t_first - 1e-9 || t > t_last + 1e-9) throw EstimatorError("time outside the estimated trajectory");
  const long j = std::clamp(static_cast<long>(std::floor((t - graph.t0()) * graph.config().state_rate + 1e-9)),
                            graph.first_state(), graph.last_state());
  NavState x = graph.nav_state(j);
  if (t - x.t > 1e-12) x = propagate_to(x, graph.imu_buffer(), t, graph.config().noise.gravity);
  if (frame == kWorldFrame) return x.pose();
  const auto a = graph.alignment_at(frame, t);
  if (!a) throw EstimatorError("unknown reference frame " + frame);
  return a->inverse() * x.pose();
}

// ---- online estimator ------------------------------------------------------------

namespace {

EstimatorConfig with_noise(EstimatorConfig c, const SensorSetup& s) {
  c.graph.noise = s.noise;
  c.validate();
  return c;
}

}  // namespace

OnlineEstimator::OnlineEstimator(EstimatorConfig config, SensorSetup setup)
    : config_(with_noise(std::move(config), setup)),
      setup_(std::move(setup)),
      graph_(config_.graph, setup_.extrinsics) {}

IngestResult OnlineEstimator::ingest(const Measurement& m) {
  if (meas_kind(m) == MeasKind::Imu) throw EstimatorError("IMU samples go through tick_imu");
  const FrameId& sensor = meas_sensor(m);
  if (!setup_.extrinsics.count(sensor)) throw EstimatorError("unknown sensor frame " + sensor);
  const double t = meas_time(m);
  if (!initialized()) {
    early_.push_back(m);
    return {};
  }
  if (t < now_ - config_.lag) {
    dropped_.push_back({m, "stale: older than the lag window"});
    return {false, dropped_.back().reason};
  }
  const std::size_t before = dropped_.size();
  add_to_graph(m);
  if (dropped_.size() > before) return {false, dropped_.back().reason};
  return {};
}

void OnlineEstimator::add_to_graph(const Measurement& m) {
  const AddResult r = graph_.add_measurement(m);
  switch (r.status) {
    case AddStatus::Added:
      new_factors_ += r.factors.size();
      if (!first_pending_arrival_) first_pending_arrival_ = now_;
      break;
    case AddStatus::Pending:
      waiting_.push_back(m);
      break;
    case AddStatus::Stale:
      dropped_.push_back({m, "stale: " + r.reason});
      break;
    case AddStatus::Rejected:
      dropped_.push_back({m, "rejected: " + r.reason});
      break;
  }
}

void OnlineEstimator::retry_waiting() {
  if (waiting_.empty()) return;
  std::vector<Measurement> still;
  auto pending = std::move(waiting_);
  waiting_.clear();
  for (const auto& m : pending) {
    if (graph_.state_index(meas_time(m)) > graph_.last_state())
      still.push_back(m);
    else
      add_to_graph(m);
  }
  waiting_.insert(waiting_.end(), still.begin(), still.end());
}

void OnlineEstimator::try_initialize() {
  if (init_imu_.back().t - init_imu_.front().t < config_.init_duration - 1e-9) return;
  const InitialEstimate e = initialize(init_imu_, early_, config_, setup_);
  graph_.initialize(e.state, config_.priors, e.pose_cov);
  init_imu_.clear();
  const Vec3& g = config_.graph.noise.gravity;
  world_ = propagate_to(e.state, graph_.imu_buffer(), now_, g);
  auto b = std::make_shared<WorldBelief>();
  b->t = e.state.t;
  b->state = e.state;
  b->pose_cov = e.pose_cov;
  belief_ = b;
  odom_.t = now_;
  odom_.T_OI = Pose3(combine_yaw_tilt(Rot3::identity(), world_->R), Vec3::Zero());
  odom_.v_O = odom_.T_OI.rotation() * (world_->R.inverse() * world_->v);
  auto early = std::move(early_);
  early_.clear();
  std::stable_sort(early.begin(), early.end(),
                   [](const Measurement& a, const Measurement& b) { return meas_time(a) < meas_time(b); });
  for (const auto& m : early) {
    if (meas_time(m) < now_ - config_.lag)
      dropped_.push_back({m, "stale: older than the lag window"});
    else
      add_to_graph(m);
  }
}

bool OnlineEstimator::epoch_due() const {
  if (!initialized()) return false;
  if (new_factors_ > 0 && first_pending_arrival_ && now_ >= *first_pending_arrival_ + config_.coalesce_window - 1e-12)
    return true;
  return graph_.state_time(graph_.last_state()) - graph_.state_time(graph_.first_state()) > config_.lag + 1.0;
}

std::optional<OnlineEstimator::Output> OnlineEstimator::tick_imu(const ImuSample& s) {
  if (last_sample_ && !(s.t > last_sample_->t)) throw EstimatorError("IMU timestamps must increase");
  now_ = s.t;
  graph_.add_imu(s);
  if (!initialized()) {
    init_imu_.push_back(s);
    try_initialize();
    last_sample_ = s;
    if (!initialized()) return std::nullopt;
    return Output{*world_, odom_};
  }
  retry_waiting();
  const Vec3& g = config_.graph.noise.gravity;
  const double dt = s.t - last_sample_->t;

  NavState o;
  o.R = odom_.T_OI.rotation();
  o.p = odom_.T_OI.translation();
  o.v = odom_.v_O;
  o.bias = belief_->state.bias;
  o = propagate_step(o, *last_sample_, dt, g);

  bool updated = false;
  if (epoch_due()) {
    const bool forced = new_factors_ == 0;
    updated = optimize_epoch(forced);
  }
  if (updated) {
    world_ = propagate_to(belief_->state, graph_.imu_buffer(), s.t, g);
    // an unconverged solve can carry a transient velocity; odometry keeps
    // integrating until a solve settles
    if (epochs_.back().converged) {
      o.R = combine_yaw_tilt(o.R, world_->R);
      o.v = o.R * (world_->R.inverse() * world_->v);
    }
  } else {
    world_ = propagate_step(*world_, *last_sample_, dt, g);
  }
  world_->t = s.t;
  odom_.t = s.t;
  odom_.T_OI = Pose3(o.R, o.p);
  odom_.v_O = o.v;
  last_sample_ = s;
  return Output{*world_, odom_};
}

void OnlineEstimator::manage_lifecycle(double cutoff) {
  std::vector<Key> keys;
  for (const auto& [frame, chain] : graph_.ref_frames())
    for (const auto& kf : chain)
      if (kf.active && kf.last_seen < cutoff) keys.push_back(kf.key());
  for (const auto& [id, l] : graph_.landmarks())
    if (l.active && l.last_seen < cutoff) keys.push_back(l.key());
  if (keys.empty()) return;
  std::map<Key, Eigen::MatrixXd> cov;
  try {
    cov = marginal_covariances(graph_.factors(), graph_.values(), keys);
  } catch (const SolverError&) {
    for (const Key& k : keys) cov[k] = 1e6 * Eigen::MatrixXd::Identity(graph_.values().dim(k), graph_.values().dim(k));
  }
  for (const Key& k : keys) graph_.deactivate(k, cov.at(k));
}

void OnlineEstimator::publish_belief() {
  auto b = std::make_shared<WorldBelief>();
  const long j = graph_.last_state();
  b->t = graph_.state_time(j);
  b->state = graph_.nav_state(j);
  if (config_.compute_marginals) {
    try {
      b->pose_cov = Mat6(marginal_covariances(graph_.factors(), graph_.values(), {nav_pose_key(j)}).at(nav_pose_key(j)));
    } catch (const SolverError&) {
    }
  }
  for (const auto& [frame, chain] : graph_.ref_frames()) {
    if (auto a = graph_.alignment_at(frame, b->t)) {
      b->alignments[frame] = *a;
      drift_trace_.push_back({frame, b->t, *a});
    }
    for (const auto& kf : chain) {
      if (kf.marginalized) continue;
      Pose3 T;
      if (graph_.values().contains(kf.key()))
        T = graph_.values().pose(kf.key());
      else if (kf.belief)
        T = kf.belief->mean;
      else
        continue;
      keyframe_trace_.push_back({b->t, frame, kf.k, kf.active, kf.t_RK, T});
    }
  }
  b->epoch = epoch_count_;
  belief_ = b;
}

bool OnlineEstimator::optimize_epoch(bool force) {
  if (!initialized()) return false;
  if (new_factors_ == 0 && !force) return false;
  EpochReport rep;
  rep.t = graph_.state_time(graph_.last_state());
  try {
    const OptimizeResult r = optimize(graph_.factors(), graph_.values(), config_.online_solver);
    graph_.set_values(r.values);
    rep.iterations = r.report.iterations;
    rep.final_cost = r.report.final_cost;
    rep.converged = r.report.converged;
    rep.message = r.report.message;
  } catch (const SolverError& e) {
    rep.skipped = true;
    rep.message = e.what();
  }
  new_factors_ = 0;
  first_pending_arrival_.reset();
  ++epoch_count_;

  const double cutoff = rep.t - config_.lag;
  manage_lifecycle(cutoff);
  const long first = graph_.first_state();
  const auto gone = graph_.marginalize_states_before(cutoff);
  for (std::size_t i = 0; i < gone.size(); ++i) history_[first + static_cast<long>(i)] = gone[i];
  graph_.trim_imu();
  publish_belief();

  rep.window_states = graph_.num_states();
  rep.num_values = graph_.values().size();
  rep.num_dynamic = graph_.num_dynamic_variables();
  epochs_.push_back(rep);
  return true;
}

Pose3 OnlineEstimator::query_state_in_frame(const FrameId& frame, double t) const {
  return hfusion::query_state_in_frame(graph_, frame, t);
}

std::map<long, NavState> OnlineEstimator::state_history() const {
  std::map<long, NavState> out = history_;
  if (initialized())
    for (long j = graph_.first_state(); j <= graph_.last_state(); ++j) out[j] = graph_.nav_state(j);
  return out;
}

OnlineRun run_online(const MeasurementLog& log, const EstimatorConfig& cfg,
                     const std::map<std::string, double>& delays) {
  for (const auto& [stream, d] : delays) {
    const auto key = StreamKey::parse(stream);
    if (!key) throw EstimatorError("unknown stream name " + stream);
    if (key->kind == MeasKind::Imu) throw EstimatorError("the IMU stream cannot be delayed");
    if (!(d >= 0.0)) throw EstimatorError("delays must be non-negative");
  }
  const SensorSetup setup = SensorSetup::from_log(log, cfg);
  OnlineEstimator est(cfg, setup);
  OnlineRun run;
  for (const ReplayEvent& ev : merged_replay(log, delays, cfg.lag)) {
    if (const auto* s = std::get_if<ImuSample>(&ev.meas)) {
      const auto out = est.tick_imu(*s);
      if (!out) continue;
      run.world.push_back(s->t, out->world.pose());
      run.odom.push_back(s->t, out->odom.T_OI);
      for (const auto& [frame, T_WR] : est.belief()->alignments) {
        auto& tr = run.frames[frame];
        tr.push_back(s->t, T_WR.inverse() * out->world.pose());
      }
    } else {
      est.ingest(ev.meas);
    }
  }
  est.optimize_epoch(true);
  run.states = est.state_history();
  run.epochs = est.epochs();
  run.dropped = est.dropped();
  run.keyframe_trace = est.keyframe_trace();
  run.drift_trace = est.drift_trace();
  run.t0 = est.initialized() ? est.graph().t0() : 0.0;
  return run;
}

// ---- batch ------------------------------------------------------------------------

namespace {

void set_nav(Values& v, long j, const NavState& x) {
  v.insert(nav_pose_key(j), x.pose());
  v.insert(nav_vel_key(j), Eigen::VectorXd(x.v));
  v.insert(nav_bias_key(j), Eigen::VectorXd(x.bias.vector()));
}

}  // namespace

BatchResult batch_optimize(const MeasurementLog& log, const EstimatorConfig& cfg_in, const BatchOptions& opts) {
  const SensorSetup setup = SensorSetup::from_log(log, cfg_in);
  const EstimatorConfig cfg = with_noise(cfg_in, setup);
  const std::vector<ImuSample> imu = log.imu();
  if (imu.empty()) throw EstimatorError("log has no IMU data");
  std::vector<Measurement> meas;
  for (const ReplayEvent& ev : merged_replay(log, opts.delays, std::numeric_limits<double>::infinity()))
    if (meas_kind(ev.meas) != MeasKind::Imu) meas.push_back(ev.meas);

  std::vector<ImuSample> head;
  for (const auto& s : imu) {
    if (s.t > imu.front().t + cfg.init_duration + 1e-9) break;
    head.push_back(s);
  }
  const InitialEstimate e = initialize(head, meas, cfg, setup);

  HolisticGraph graph(cfg.graph, setup.extrinsics);
  graph.initialize(e.state, cfg.priors, e.pose_cov);
  std::optional<NavState> first_value;
  switch (opts.init) {
    case BatchInit::Online: {
      if (!opts.online_states) throw EstimatorError("online initialization needs the online states");
      std::map<long, NavState> guess = *opts.online_states;
      if (auto it = guess.find(0); it != guess.end()) {
        first_value = it->second;
        guess.erase(it);
      }
      graph.set_initial_guess(std::move(guess));
      break;
    }
    case BatchInit::Identity: {
      NavState id;
      first_value = id;
      std::map<long, NavState> guess;
      const long last = static_cast<long>(std::floor((imu.back().t - e.state.t) * cfg.graph.state_rate + 1e-9));
      for (long j = 1; j <= last; ++j) guess[j] = id;
      graph.set_initial_guess(std::move(guess));
      break;
    }
    case BatchInit::Propagation:
      break;
  }
  if (first_value) {
    Values v = graph.values();
    set_nav(v, 0, *first_value);
    graph.set_values(v);
  }
  for (const auto& s : imu) graph.add_imu(s);
  for (const auto& m : meas) {
    const AddResult r = graph.add_measurement(m);
    (void)r;  // Pending past the last state, Stale before the first: outside the horizon
  }

  OptimizeResult sol;
  try {
    sol = optimize(graph.factors(), graph.values(), cfg.batch_solver);
  } catch (const SolverError& err) {
    throw EstimatorError(std::string("batch solve failed: ") + err.what());
  }
  graph.set_values(sol.values);

  BatchResult out{std::move(graph), sol.report, {}, {}, 0, 0};
  const HolisticGraph& g = out.graph;
  for (long j = g.first_state(); j <= g.last_state(); ++j) out.trajectory.push_back(g.state_time(j), g.nav_state(j).pose());
  out.num_states = static_cast<std::size_t>(g.num_states());
  out.num_dynamic = g.num_dynamic_variables();
  if (opts.compute_marginals && cfg.marginal_stride > 0) {
    std::vector<Key> keys;
    for (long j = g.first_state(); j <= g.last_state(); j += cfg.marginal_stride) keys.push_back(nav_pose_key(j));
    const auto cov = marginal_covariances(g.factors(), g.values(), keys);
    for (const Key& k : keys) out.marginals.emplace_back(g.state_time(k.index), Mat6(cov.at(k)));
  }
  return out;
}

// ---- exports ------------------------------------------------------------------------

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  return f;
}

std::string pose_fields(const Pose3& T) {
  Quat q = T.rotation().quaternion();
  if (q.w() < 0.0) q.coeffs() = -q.coeffs();
  const Vec3& p = T.translation();
  char buf[200];
  std::snprintf(buf, sizeof buf, "%.9f,%.9f,%.9f,%.12f,%.12f,%.12f,%.12f", p.x(), p.y(), p.z(), q.x(), q.y(), q.z(),
                q.w());
  return buf;
}

}  // namespace

void write_keyframe_trace_csv(const std::filesystem::path& path, const std::vector<KeyframeTraceRow>& rows) {
  auto f = open_out(path);
  f << "t,frame,k,active,t_rk_x,t_rk_y,t_rk_z,x,y,z,qx,qy,qz,qw\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.9f,%s,%ld,%d,%.9f,%.9f,%.9f,", r.t, r.frame.c_str(), r.k, r.active ? 1 : 0,
                  r.t_RK.x(), r.t_RK.y(), r.t_RK.z());
    f << buf << pose_fields(r.T_WK) << '\n';
  }
}

void write_drift_csv(const std::filesystem::path& path, const std::vector<DriftRow>& rows) {
  auto f = open_out(path);
  f << "frame,t,x,y,z,qx,qy,qz,qw\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.9f,", r.t);
    f << r.frame << ',' << buf << pose_fields(r.T_WR) << '\n';
  }
}

std::vector<DriftRow> read_drift_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::vector<DriftRow> rows;
  std::string line;
  int n = 0;
  while (std::getline(f, line)) {
    ++n;
    if (n == 1 || line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 9) throw std::runtime_error("drift CSV line " + std::to_string(n) + ": expected 9 fields");
    double v[8];
    try {
      for (int i = 0; i < 8; ++i) v[i] = std::stod(cells[i + 1]);
    } catch (const std::exception&) {
      throw std::runtime_error("drift CSV line " + std::to_string(n) + ": bad number");
    }
    Quat q(v[7], v[4], v[5], v[6]);
    if (std::abs(q.norm() - 1.0) > 1e-6) throw std::runtime_error("drift CSV line " + std::to_string(n) + ": quaternion not unit");
    rows.push_back({cells[0], v[0], Pose3(Rot3(q.normalized()), Vec3(v[1], v[2], v[3]))});
  }
  return rows;
}

void write_marginals_csv(const std::filesystem::path& path, const std::vector<std::pair<double, Mat6>>& rows) {
  auto f = open_out(path);
  f << "t";
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j) f << ",c" << i << j;
  f << '\n';
  char buf[64];
  for (const auto& [t, c] : rows) {
    std::snprintf(buf, sizeof buf, "%.9f", t);
    f << buf;
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < 6; ++j) {
        std::snprintf(buf, sizeof buf, ",%.12e", c(i, j));
        f << buf;
      }
    f << '\n';
  }
}

void write_epochs_csv(const std::filesystem::path& path, const std::vector<EpochReport>& rows) {
  auto f = open_out(path);
  f << "t,iterations,final_cost,converged,skipped,window_states,num_values,num_dynamic\n";
  char buf[200];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.9f,%d,%.9e,%d,%d,%ld,%zu,%zu\n", r.t, r.iterations, r.final_cost,
                  r.converged ? 1 : 0, r.skipped ? 1 : 0, r.window_states, r.num_values, r.num_dynamic);
    f << buf;
  }
}

}  // namespace hfusion
