#include "hfusion/holistic.hpp"

#include <algorithm>
#include <cmath>

#include "hfusion/solver.hpp"

namespace hfusion {

const Vec6& GraphConfig::rw_sigma_for(const FrameId& frame) const {
  auto it = rw_sigma_per_frame.find(frame);
  return it == rw_sigma_per_frame.end() ? rw_sigma : it->second;
}

RobustKernel GraphConfig::kernel_for(const FrameId& sensor) const {
  auto it = kernels.find(sensor);
  return it == kernels.end() ? RobustKernel{} : it->second;
}

namespace {

Eigen::MatrixXd spd(Eigen::MatrixXd c) {
  c = 0.5 * (c + c.transpose());
  Eigen::LLT<Eigen::MatrixXd> llt(c);
  if (llt.info() != Eigen::Success) c += 1e-12 * Eigen::MatrixXd::Identity(c.rows(), c.cols());
  return c;
}

Eigen::VectorXd as_vec(const Vec3& v) { return v; }

}  // namespace

HolisticGraph::HolisticGraph(GraphConfig config, std::map<FrameId, Pose3> extrinsics)
    : config_(std::move(config)), extrinsics_(std::move(extrinsics)) {
  if (!(config_.state_rate > 0.0)) throw GraphError("state rate must be positive");
  if (!(config_.keyframe_dt > 0.0)) throw GraphError("keyframe interval must be positive");
  extrinsics_.emplace(kImuFrame, Pose3::identity());
}

long HolisticGraph::state_index(double t) const { return std::llround((t - t0_) * config_.state_rate); }

NavState HolisticGraph::nav_state(long j) const {
  NavState s;
  s.t = state_time(j);
  const Pose3& T = values_.pose(nav_pose_key(j));
  s.R = T.rotation();
  s.p = T.translation();
  s.v = values_.vec3(nav_vel_key(j));
  s.bias = values_.bias(nav_bias_key(j));
  return s;
}

void HolisticGraph::set_values(const Values& v) {
  for (const auto& [k, _] : values_)
    if (!v.contains(k)) throw GraphError("replacement values lack " + k.str());
  values_ = v;
}

void HolisticGraph::initialize(const NavState& x0, const InitialPriors& priors, const std::optional<Mat6>& pose_cov) {
  if (initialized_) throw GraphError("graph already initialized");
  initialized_ = true;
  t0_ = x0.t;
  first_state_ = last_state_ = 0;
  values_.insert(nav_pose_key(0), x0.pose());
  values_.insert(nav_vel_key(0), as_vec(x0.v));
  values_.insert(nav_bias_key(0), Eigen::VectorXd(x0.bias.vector()));
  factors_.push_back(std::make_shared<PriorFactor>(
      nav_pose_key(0), x0.pose(), pose_cov ? Eigen::MatrixXd(*pose_cov) : diagonal_covariance(priors.pose_sigma)));
  factors_.push_back(std::make_shared<PriorFactor>(nav_vel_key(0), as_vec(x0.v),
                                                   diagonal_covariance(Vec3::Constant(priors.vel_sigma))));
  factors_.push_back(std::make_shared<PriorFactor>(nav_bias_key(0), Eigen::VectorXd(x0.bias.vector()),
                                                   diagonal_covariance(priors.bias_sigma)));
  while (!imu_.empty() && state_time(last_state_ + 1) <= imu_.back().t + 1e-9) create_state(last_state_ + 1);
}

std::vector<long> HolisticGraph::add_imu(const ImuSample& s) {
  if (!imu_.empty() && !(s.t > imu_.back().t)) throw GraphError("IMU timestamps must increase");
  imu_.push_back(s);
  std::vector<long> created;
  if (!initialized_) return created;
  while (state_time(last_state_ + 1) <= s.t + 1e-9) {
    create_state(last_state_ + 1);
    created.push_back(last_state_);
  }
  return created;
}

PreintegratedImu HolisticGraph::preintegrate(double ta, double tb, const ImuBias& bias) const {
  PreintegratedImu pim(config_.noise, bias);
  auto it = std::upper_bound(imu_.begin(), imu_.end(), ta + 1e-9,
                             [](double t, const ImuSample& s) { return t < s.t; });
  if (it == imu_.begin()) throw GraphError("no IMU sample covers the state interval");
  --it;
  for (; it != imu_.end(); ++it) {
    const double s = std::max(it->t, ta);
    if (s >= tb - 1e-9) break;
    auto nx = std::next(it);
    if (nx == imu_.end()) throw GraphError("IMU data ends before the state time");
    const double e = std::min(nx->t, tb);
    if (e - s > 1e-9) pim.integrate(*it, e - s);
  }
  return pim;
}

void HolisticGraph::create_state(long j) {
  const long i = j - 1;
  const NavState xi = nav_state(i);
  const double ti = state_time(i), tj = state_time(j);
  const PreintegratedImu pim = preintegrate(ti, tj, xi.bias);
  NavState xj;
  if (auto g = guess_.find(j); g != guess_.end()) {
    xj = g->second;
    guess_.erase(g);
  } else {
    const Vec3& grav = config_.noise.gravity;
    const double T = pim.delta_t();
    xj.R = xi.R * pim.delta_R();
    xj.v = xi.v + grav * T + (xi.R * pim.delta_v());
    xj.p = xi.p + xi.v * T + 0.5 * grav * T * T + (xi.R * pim.delta_p());
    xj.bias = xi.bias;
  }
  xj.t = tj;
  values_.insert(nav_pose_key(j), xj.pose());
  values_.insert(nav_vel_key(j), as_vec(xj.v));
  values_.insert(nav_bias_key(j), Eigen::VectorXd(xj.bias.vector()));
  factors_.push_back(std::make_shared<ImuFactor>(i, j, pim, config_.noise.gravity));
  const double T = tj - ti;
  Vec6 sig;
  sig << Vec3::Constant(config_.noise.gyro_bias_rw * std::sqrt(T)), Vec3::Constant(config_.noise.accel_bias_rw * std::sqrt(T));
  factors_.push_back(std::make_shared<VectorBetweenFactor>(nav_bias_key(i), nav_bias_key(j),
                                                           Eigen::VectorXd(Vec6::Zero()), diagonal_covariance(sig)));
  last_state_ = j;
}

std::optional<Vec3> HolisticGraph::body_rate(double t, const ImuBias& bias) const {
  if (imu_.empty()) return std::nullopt;
  auto it = std::lower_bound(imu_.begin(), imu_.end(), t, [](const ImuSample& s, double v) { return s.t < v; });
  const ImuSample* best = nullptr;
  if (it != imu_.end()) best = &*it;
  if (it != imu_.begin()) {
    const ImuSample* prev = &*std::prev(it);
    if (!best || std::abs(prev->t - t) <= std::abs(best->t - t)) best = prev;
  }
  if (std::abs(best->t - t) > config_.gyro_window) return std::nullopt;
  return best->gyro - bias.gyro;
}

Pose3 HolisticGraph::extrinsic(const FrameId& sensor) const { return extrinsics_.at(sensor); }

std::optional<Key> HolisticGraph::calibration(const FrameId& sensor, bool pose_kind, AddResult& out) {
  if (!config_.calibrate.count(sensor)) return std::nullopt;
  if (auto it = calibs_.find(sensor); it != calibs_.end()) {
    if (it->second.pose_kind != pose_kind)
      throw GraphError("sensor " + sensor + " mixes pose and position calibration");
    return it->second.key();
  }
  CalibState c{sensor, pose_kind};
  const Key k = c.key();
  if (pose_kind) {
    values_.insert(k, Pose3::identity());
    out.factors.push_back(
        std::make_shared<PriorFactor>(k, Pose3::identity(), diagonal_covariance(config_.calib_prior_sigma)));
  } else {
    values_.insert(k, as_vec(Vec3::Zero()));
    out.factors.push_back(std::make_shared<PriorFactor>(
        k, as_vec(Vec3::Zero()), diagonal_covariance(Eigen::VectorXd(config_.calib_prior_sigma.tail<3>()))));
  }
  out.new_keys.push_back(k);
  calibs_.emplace(sensor, c);
  return k;
}

void HolisticGraph::reinstate(RefAlignState& kf, AddResult& out) {
  const Belief<Pose3>& b = *kf.belief;
  values_.insert(kf.key(), b.mean);
  out.factors.push_back(std::make_shared<PriorFactor>(kf.key(), b.mean, spd(b.cov)));
  out.new_keys.push_back(kf.key());
  kf.active = true;
  kf.belief.reset();
}

RefAlignState& HolisticGraph::roll_over(std::vector<RefAlignState>& chain, double t, const Vec3& measured_position,
                                        AddResult& out) {
  const RefAlignState prev = chain.back();
  RefAlignState next;
  next.ref_frame = prev.ref_frame;
  next.k = prev.k + 1;
  next.t_RK = config_.origin_anchoring ? Vec3::Zero() : measured_position;
  next.created_at = next.last_seen = t;
  const Pose3 shift(Rot3::identity(), next.t_RK - prev.t_RK);
  values_.insert(next.key(), values_.pose(prev.key()) * shift);
  const double dt = t - prev.created_at;
  const Vec6 sig = config_.rw_sigma_for(prev.ref_frame) * std::sqrt(std::max(dt, 0.0));
  out.factors.push_back(std::make_shared<BetweenFactor>(prev.key(), next.key(), shift, diagonal_covariance(sig)));
  out.new_keys.push_back(next.key());
  chain.push_back(next);
  return chain.back();
}

RefAlignState* HolisticGraph::keyframe_for(const FrameId& ref, double t, const Vec3& measured_position,
                                           const Pose3& T_WS_est, const Pose3& z_full, bool has_rotation,
                                           AddResult& out) {
  auto& chain = frames_[ref];
  if (chain.empty()) {
    RefAlignState kf;
    kf.ref_frame = ref;
    kf.t_RK = config_.origin_anchoring ? Vec3::Zero() : measured_position;
    kf.created_at = kf.last_seen = t;
    const Pose3 T_WR = has_rotation ? T_WS_est * z_full.inverse()
                                    : Pose3(Rot3::identity(), T_WS_est.translation() - z_full.translation());
    const Pose3 T_WK = T_WR * Pose3(Rot3::identity(), kf.t_RK);
    values_.insert(kf.key(), T_WK);
    out.factors.push_back(
        std::make_shared<PriorFactor>(kf.key(), T_WK, diagonal_covariance(config_.align_prior_sigma)));
    out.new_keys.push_back(kf.key());
    chain.push_back(kf);
    return &chain.back();
  }
  if (t < chain.back().created_at) {
    // delayed measurement: use the keyframe that was in force at t
    auto it = std::find_if(chain.rbegin(), chain.rend(), [t](const RefAlignState& k) { return k.created_at <= t; });
    RefAlignState& kf = it == chain.rend() ? chain.front() : *it;
    if (kf.marginalized) return nullptr;
    if (!kf.active) reinstate(kf, out);
    return &kf;
  }
  RefAlignState* cur = &chain.back();
  if (!cur->active) reinstate(*cur, out);
  if (config_.random_walk && t - cur->created_at >= config_.keyframe_dt)
    cur = &roll_over(chain, t, measured_position, out);
  return cur;
}

AddResult HolisticGraph::add_measurement(const Measurement& m) {
  AddResult out;
  if (meas_kind(m) == MeasKind::Imu) throw GraphError("IMU samples go through add_imu");
  if (!initialized_) {
    out.status = AddStatus::Pending;
    out.reason = "graph not initialized";
    return out;
  }
  const double t = meas_time(m);
  const long j = state_index(t);
  if (j > last_state_) {
    out.status = AddStatus::Pending;
    out.reason = "state not yet created";
    return out;
  }
  if (j < first_state_) {
    out.status = AddStatus::Stale;
    out.reason = "older than the graph horizon";
    return out;
  }
  const FrameId sensor = meas_sensor(m);
  if (!extrinsics_.count(sensor)) {
    out.status = AddStatus::Rejected;
    out.reason = "unknown sensor extrinsic " + sensor;
    return out;
  }
  const Pose3 T_IS = extrinsic(sensor);
  const RobustKernel kernel = config_.kernel_for(sensor);
  const NavState x = nav_state(j);
  auto existing_calib_pose = [&]() {
    auto it = calibs_.find(sensor);
    return it != calibs_.end() && it->second.pose_kind ? values_.pose(it->second.key()) : Pose3::identity();
  };
  FactorPtr factor;

  if (const auto* z = std::get_if<AbsolutePoseMeas>(&m)) {
    const Pose3 T_WS_est = x.pose() * T_IS * existing_calib_pose();
    std::optional<Key> align;
    Pose3 z_adj = z->pose;
    if (z->ref_frame != kWorldFrame) {
      RefAlignState* kf = keyframe_for(z->ref_frame, t, z->pose.translation(), T_WS_est, z->pose, true, out);
      if (!kf) {
        out.status = AddStatus::Stale;
        out.reason = "reference keyframe already eliminated";
        return out;
      }
      kf->last_seen = std::max(kf->last_seen, t);
      align = kf->key();
      z_adj = Pose3(z->pose.rotation(), z->pose.translation() - kf->t_RK);
    }
    const auto calib = calibration(sensor, true, out);
    factor = std::make_shared<AbsolutePoseFactor>(j, align, calib, z_adj, T_IS, z->cov, kernel);
  } else if (const auto* z = std::get_if<AbsolutePositionMeas>(&m)) {
    Vec3 t_SC = Vec3::Zero();
    if (auto it = calibs_.find(sensor); it != calibs_.end() && !it->second.pose_kind)
      t_SC = values_.vec3(it->second.key());
    const Vec3 p_WS = x.p + x.R * (T_IS.translation() + T_IS.rotation() * t_SC);
    std::optional<Key> align;
    Vec3 z_adj = z->position;
    if (z->ref_frame != kWorldFrame) {
      RefAlignState* kf = keyframe_for(z->ref_frame, t, z->position, Pose3(Rot3::identity(), p_WS),
                                       Pose3(Rot3::identity(), z->position), false, out);
      if (!kf) {
        out.status = AddStatus::Stale;
        out.reason = "reference keyframe already eliminated";
        return out;
      }
      kf->last_seen = std::max(kf->last_seen, t);
      align = kf->key();
      z_adj = z->position - kf->t_RK;
    }
    const auto calib = calibration(sensor, false, out);
    factor = std::make_shared<AbsolutePositionFactor>(j, align, calib, z_adj, T_IS, z->cov, kernel);
  } else if (const auto* z = std::get_if<LandmarkMeas>(&m)) {
    auto it = landmarks_.find(z->landmark_id);
    if (it == landmarks_.end()) {
      LandmarkState l;
      l.id = z->landmark_id;
      l.first_seen = l.last_seen = t;
      const Pose3 T_WC = x.pose() * T_IS * existing_calib_pose();
      values_.insert(l.key(), as_vec(T_WC.rotation() * z->position_in_sensor + T_WC.translation()));
      out.new_keys.push_back(l.key());
      it = landmarks_.emplace(l.id, l).first;
    } else if (!it->second.active) {
      const Belief<Vec3>& b = *it->second.belief;
      values_.insert(it->second.key(), as_vec(b.mean));
      out.factors.push_back(std::make_shared<PriorFactor>(it->second.key(), as_vec(b.mean), spd(b.cov)));
      out.new_keys.push_back(it->second.key());
      it->second.active = true;
      it->second.belief.reset();
    }
    it->second.last_seen = std::max(it->second.last_seen, t);
    const auto calib = calibration(sensor, true, out);
    factor = std::make_shared<LandmarkFactor>(j, z->landmark_id, calib, z->position_in_sensor, T_IS, z->cov, kernel);
  } else if (const auto* z = std::get_if<LocalVelocityMeas>(&m)) {
    Vec3 omega_I;
    if (!z->angular_in_sensor.isZero()) {
      omega_I = T_IS.rotation() * z->angular_in_sensor;
    } else {
      const auto w = body_rate(t, x.bias);
      if (!w) {
        out.status = AddStatus::Rejected;
        out.reason = "no IMU sample near the velocity measurement";
        return out;
      }
      omega_I = *w;
    }
    const auto calib = calibration(sensor, true, out);
    factor = std::make_shared<LocalVelocityFactor>(j, calib, z->velocity_in_sensor, omega_I, T_IS, z->cov, kernel);
  }
  out.factors.insert(out.factors.begin(), factor);
  factors_.insert(factors_.end(), out.factors.begin(), out.factors.end());
  out.status = AddStatus::Added;
  return out;
}

int HolisticGraph::rollover_count(const FrameId& frame) const {
  auto it = frames_.find(frame);
  return it == frames_.end() || it->second.empty() ? 0 : static_cast<int>(it->second.size()) - 1;
}

std::size_t HolisticGraph::num_dynamic_variables() const {
  std::size_t n = 0;
  for (const auto& [k, _] : values_) n += !k.is_nav();
  return n;
}

const RefAlignState* HolisticGraph::keyframe_at(const FrameId& frame, double t) const {
  auto it = frames_.find(frame);
  if (it == frames_.end() || it->second.empty()) return nullptr;
  const auto& chain = it->second;
  auto r = std::find_if(chain.rbegin(), chain.rend(), [t](const RefAlignState& k) { return k.created_at <= t; });
  return r == chain.rend() ? &chain.front() : &*r;
}

std::optional<Pose3> HolisticGraph::alignment_at(const FrameId& frame, double t) const {
  if (frame == kWorldFrame) return Pose3::identity();
  const RefAlignState* kf = keyframe_at(frame, t);
  if (!kf) return std::nullopt;
  Pose3 T_WK;
  if (values_.contains(kf->key()))
    T_WK = values_.pose(kf->key());
  else if (kf->belief)
    T_WK = kf->belief->mean;
  else
    return std::nullopt;
  return T_WK * Pose3(Rot3::identity(), -kf->t_RK);
}

void HolisticGraph::marginalize(const std::vector<Key>& keys) {
  MarginalizationResult r = hfusion::marginalize(factors_, values_, keys);
  factors_ = std::move(r.kept);
  if (r.prior) factors_.push_back(r.prior);
  for (const Key& k : keys) values_.erase(k);
}

std::vector<NavState> HolisticGraph::marginalize_states_before(double t) {
  std::vector<NavState> out;
  std::vector<Key> keys;
  long j = first_state_;
  for (; j < last_state_ && state_time(j) < t; ++j) {
    out.push_back(nav_state(j));
    keys.push_back(nav_pose_key(j));
    keys.push_back(nav_vel_key(j));
    keys.push_back(nav_bias_key(j));
  }
  if (keys.empty()) return out;
  marginalize(keys);
  first_state_ = j;
  return out;
}

void HolisticGraph::deactivate(const Key& key, const Eigen::MatrixXd& cov) {
  if (key.kind == VarKind::Align) {
    for (auto& kf : frames_.at(key.frame)) {
      if (kf.k != key.index) continue;
      if (&kf == &frames_.at(key.frame).back()) {
        kf.belief = Belief<Pose3>{values_.pose(key), cov};
      } else {
        kf.marginalized = true;
      }
      kf.active = false;
    }
  } else if (key.kind == VarKind::Landmark) {
    LandmarkState& l = landmarks_.at(key.index);
    l.belief = Belief<Vec3>{values_.vec3(key), cov};
    l.active = false;
  } else {
    throw GraphError("only alignment and landmark variables can be deactivated");
  }
  marginalize({key});
}

void HolisticGraph::trim_imu() {
  if (!initialized_) return;
  const double cutoff = state_time(first_state_) - 0.1;
  while (imu_.size() > 2 && imu_[1].t <= cutoff) imu_.pop_front();
}

}  // namespace hfusion
