#include "hfusion/sim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include "json.hpp"
#include <numbers>
#include <stdexcept>

namespace hfusion {

using json = nlohmann::json;

std::uint64_t SplitMix64::next() {
  state_ += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double SplitMix64::uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

double SplitMix64::gaussian() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(a);
  has_spare_ = true;
  return r * std::cos(a);
}

std::uint64_t stream_seed(std::uint64_t seed, std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return SplitMix64(seed ^ h).next();
}

namespace {

Vec3 gauss3(SplitMix64& r) {
  const double x = r.gaussian(), y = r.gaussian(), z = r.gaussian();
  return {x, y, z};
}

Vec6 gauss6(SplitMix64& r) {
  Vec6 v;
  for (int i = 0; i < 6; ++i) v(i) = r.gaussian();
  return v;
}

constexpr double kHeightWavelength = 7.0;

struct PathPoint {
  Vec3 P;   // position relative to the trajectory origin
  Vec3 dP;  // derivative with respect to the path parameter S
};

double waypoint_segment_length(const TrajectoryConfig& c) {
  const auto& w = c.waypoints;
  double len = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) len += (w[(i + 1) % w.size()] - w[i]).head<2>().norm();
  return len / static_cast<double>(w.size());
}

PathPoint eval_path(const TrajectoryConfig& c, double S) {
  PathPoint out;
  const double h = c.height_amp;
  const double zh = h * std::sin(S / kHeightWavelength);
  const double dzh = h / kHeightWavelength * std::cos(S / kHeightWavelength);
  switch (c.kind) {
    case TrajectoryKind::Circle: {
      const double r = c.size, th = S / r;
      out.P = Vec3(r * std::sin(th), r * (1.0 - std::cos(th)), zh);
      out.dP = Vec3(std::cos(th), std::sin(th), dzh);
      break;
    }
    case TrajectoryKind::FigureEight: {
      const double a = c.size, u = S / a;
      out.P = Vec3(a * std::sin(u), 0.5 * a * std::sin(2.0 * u), zh);
      out.dP = Vec3(std::cos(u), std::cos(2.0 * u), dzh);
      break;
    }
    case TrajectoryKind::Waypoints: {
      const auto& w = c.waypoints;
      const long n = static_cast<long>(w.size());
      const double L = waypoint_segment_length(c);
      const double u = S / L;
      const double fl = std::floor(u);
      const double tau = u - fl;
      const long i = static_cast<long>(fl);
      auto at = [&](long k) { return w[((k % n) + n) % n]; };
      const Vec3 p0 = at(i - 1), p1 = at(i), p2 = at(i + 1), p3 = at(i + 2);
      const Vec3 a1 = -p0 + p2, a2 = 2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3, a3 = -p0 + 3.0 * p1 - 3.0 * p2 + p3;
      out.P = 0.5 * (2.0 * p1 + a1 * tau + a2 * tau * tau + a3 * tau * tau * tau);
      out.dP = 0.5 * (a1 + 2.0 * a2 * tau + 3.0 * a3 * tau * tau) / L;
      out.P.z() += zh;
      out.dP.z() += dzh;
      break;
    }
  }
  return out;
}

// Arc parameter S(t) and its rate: hold, smoothstep ramp, then constant speed.
std::pair<double, double> arc(const TrajectoryConfig& c, double t) {
  if (t <= c.hold) return {0.0, 0.0};
  const double v = c.speed;
  const double u = (t - c.hold) / c.ramp;
  if (u < 1.0) return {v * c.ramp * (u * u * u - 0.5 * u * u * u * u), v * (3.0 * u * u - 2.0 * u * u * u)};
  return {v * c.ramp * 0.5 + v * (t - c.hold - c.ramp), v};
}

Rot3 attitude(const TrajectoryConfig& c, double S, const Vec3& dP) {
  const double yaw = std::atan2(dP.y(), dP.x());
  return Rot3::from_rpy(c.roll_amp * std::sin(S / 3.1), c.pitch_amp * std::sin(S / 4.3), yaw);
}

long tick_of(double t, double imu_rate) { return std::llround(t * imu_rate); }

Pose3 drift_smooth(const DriftSpec& d, double t) {
  const Vec6 xi = d.linear_rate * t + d.sine_amp * std::sin(2.0 * std::numbers::pi * t / d.sine_period);
  return se3_exp(xi);
}

// Measurement instants of a stream: i / rate snapped to IMU ticks, t < duration.
std::vector<long> stream_ticks(double rate, double duration, double imu_rate, long num_ticks) {
  std::vector<long> ticks;
  for (long i = 0;; ++i) {
    const double t = static_cast<double>(i) / rate;
    if (t >= duration - 1e-12) break;
    const long k = tick_of(t, imu_rate);
    if (k >= num_ticks) break;
    if (!ticks.empty() && k == ticks.back()) continue;
    ticks.push_back(k);
  }
  return ticks;
}

}  // namespace

void ScenarioConfig::validate() const {
  if (!(duration > 0.0)) throw std::invalid_argument("duration must be positive");
  if (!(imu.rate > 0.0)) throw std::invalid_argument("IMU rate must be positive");
  if (!(trajectory.speed >= 0.0) || !(trajectory.ramp > 0.0) || trajectory.hold < 0.0)
    throw std::invalid_argument("invalid trajectory timing");
  if (trajectory.kind == TrajectoryKind::Waypoints && trajectory.waypoints.size() < 3)
    throw std::invalid_argument("waypoint trajectory needs at least 3 waypoints");
  if (trajectory.kind != TrajectoryKind::Waypoints && !(trajectory.size > 0.0))
    throw std::invalid_argument("trajectory size must be positive");
  auto check_rate = [&](double r, const char* what) {
    if (!(r > 0.0) || r > imu.rate) throw std::invalid_argument(std::string(what) + " rate must be in (0, imu rate]");
  };
  if (gnss) check_rate(gnss->rate, "GNSS");
  if (pose) {
    check_rate(pose->rate, "pose sensor");
    if (pose->ref_frame == kWorldFrame) throw std::invalid_argument("pose sensor reference must differ from W");
    if (!(pose->drift.sine_period > 0.0)) throw std::invalid_argument("drift sine period must be positive");
  }
  if (landmarks) check_rate(landmarks->rate, "landmark");
  if (velocity) check_rate(velocity->rate, "velocity");
  for (const auto& o : outages) {
    if (o.end < o.start) throw std::invalid_argument("outage window ends before it starts");
    if (!StreamKey::parse(o.stream)) throw std::invalid_argument("unknown stream name " + o.stream);
  }
}

Pose3 GroundTruth::alignment(const FrameId& frame, double t) const {
  if (frame == kWorldFrame) return Pose3::identity();
  const auto& knots = drift_knots.at(frame);
  const long last = static_cast<long>(knots.size()) - 1;
  const long n = std::clamp<long>(static_cast<long>(std::floor(t + 1e-9)), 0, last);
  Pose3 rw = knots[n].second;
  // geodesic between the 1 Hz knots
  const double frac = t - knots[n].first;
  if (n < last && frac > 0.0) rw = rw * se3_exp(frac * se3_log_vector(rw.inverse() * knots[n + 1].second));
  return rw * drift_smooth(drift_specs.at(frame), t);
}

const NavState& GroundTruth::state_at(double t) const {
  const long k = std::clamp<long>(tick_of(t, imu_rate), 0, static_cast<long>(states.size()) - 1);
  return states[k];
}

Trajectory GroundTruth::trajectory() const {
  Trajectory tr;
  for (const auto& s : states) tr.push_back(s.t, s.pose());
  return tr;
}

SimResult generate(const ScenarioConfig& c) {
  c.validate();
  SimResult out;
  GroundTruth& gt = out.gt;
  MeasurementLog& log = out.log;
  const bool noisy = !c.noise_free;
  const double imu_rate = c.imu.rate;
  const double dt = 1.0 / imu_rate;
  const long K = std::llround(c.duration * imu_rate);
  const Vec3 g(0.0, 0.0, -c.gravity);
  gt.imu_rate = imu_rate;

  log.gravity = c.gravity;
  log.imu_noise = c.imu.noise;

  // ground truth and IMU samples
  SplitMix64 imu_rng(stream_seed(c.seed, "imu"));
  SplitMix64 bias_rng(stream_seed(c.seed, "bias"));
  auto analytic = [&](double t) {
    const auto [S, Sd] = arc(c.trajectory, t);
    const PathPoint pp = eval_path(c.trajectory, S);
    return std::make_tuple(attitude(c.trajectory, S, pp.dP), Vec3(pp.dP * Sd), Vec3(pp.P + c.trajectory.origin));
  };
  NavState x;
  {
    const auto [R0, v0, p0] = analytic(0.0);
    x.R = R0;
    x.v = v0;
    x.p = p0;
    if (noisy) {
      const Vec6 b = c.imu.initial_bias_sigma.cwiseProduct(gauss6(bias_rng));
      x.bias = ImuBias::from_vector(b);
    }
  }
  const ImuNoiseDensities& nd = c.imu.noise;
  const double sg = nd.gyro_noise_density / std::sqrt(dt), sa = nd.accel_noise_density / std::sqrt(dt);
  const double sbg = nd.gyro_bias_rw * std::sqrt(dt), sba = nd.accel_bias_rw * std::sqrt(dt);
  gt.states.reserve(K);
  gt.body_rates.reserve(K);
  for (long k = 0; k < K; ++k) {
    x.t = static_cast<double>(k) / imu_rate;
    gt.states.push_back(x);
    const double t1 = static_cast<double>(k + 1) / imu_rate;
    const auto [R1, v1, p1] = analytic(t1);
    (void)p1;
    const Vec3 omega = so3_log(x.R.inverse() * R1) / dt;
    const Vec3 aW = (v1 - x.v) / dt;
    const Vec3 f = x.R.inverse() * (aW - g);
    gt.body_rates.push_back(omega);
    ImuSample s{x.t, f + x.bias.accel, omega + x.bias.gyro};
    if (noisy) {
      s.gyro += sg * gauss3(imu_rng);
      s.accel += sa * gauss3(imu_rng);
    }
    log.add(s);
    NavState nx;
    nx.R = x.R * so3_exp(omega * dt);
    nx.p = x.p + x.v * dt + 0.5 * aW * dt * dt;
    nx.v = x.v + aW * dt;
    nx.bias = x.bias;
    if (noisy) {
      nx.bias.gyro += sbg * gauss3(bias_rng);
      nx.bias.accel += sba * gauss3(bias_rng);
    }
    x = nx;
  }
  out.initial_yaw = gt.states.front().R.yaw();

  // GNSS
  if (c.gnss) {
    const auto& s = *c.gnss;
    log.extrinsics[s.sensor] = s.extrinsic;
    SplitMix64 r(stream_seed(c.seed, "gnss"));
    for (long k : stream_ticks(s.rate, c.duration, imu_rate, K)) {
      const NavState& st = gt.states[k];
      Vec3 z = st.p + st.R * s.extrinsic.translation();
      if (noisy) z += s.sigma * gauss3(r);
      log.add(AbsolutePositionMeas{st.t, kWorldFrame, s.sensor, z, Mat3::Identity() * s.sigma * s.sigma});
    }
  }

  // pose sensor in a drifting frame
  if (c.pose) {
    const auto& s = *c.pose;
    log.extrinsics[s.sensor] = s.extrinsic;
    log.ref_frames.push_back(s.ref_frame);
    DriftSpec spec = s.drift;
    if (!noisy) {
      spec.rw_sigma.setZero();
      spec.linear_rate.setZero();
      spec.sine_amp.setZero();
    }
    gt.drift_specs[s.ref_frame] = spec;
    SplitMix64 dr(stream_seed(c.seed, "drift:" + s.ref_frame));
    auto& knots = gt.drift_knots[s.ref_frame];
    knots.emplace_back(0.0, spec.initial);
    const long steps = static_cast<long>(std::floor(c.duration));
    for (long n = 1; n <= steps; ++n) {
      const double tn = static_cast<double>(n);
      const Pose3& prev = knots.back().second;
      const Vec3 p_WI = gt.state_at(std::min(tn, gt.states.back().t)).p;
      const Pose3 pivot(Rot3::identity(), prev.transform_to(p_WI));
      const Vec6 step = spec.rw_sigma.cwiseProduct(gauss6(dr));
      knots.emplace_back(tn, prev * pivot * se3_exp(step) * pivot.inverse());
    }
    SplitMix64 r(stream_seed(c.seed, "pose"));
    Mat6 cov = Mat6::Zero();
    cov.diagonal() << Vec3::Constant(s.sigma_rot * s.sigma_rot), Vec3::Constant(s.sigma_pos * s.sigma_pos);
    for (long k : stream_ticks(s.rate, c.duration, imu_rate, K)) {
      const NavState& st = gt.states[k];
      Pose3 z = gt.alignment(s.ref_frame, st.t).inverse() * st.pose() * s.extrinsic;
      if (noisy) {
        const Vec3 nr = s.sigma_rot * gauss3(r);
        const Vec3 np = s.sigma_pos * gauss3(r);
        Vec6 xi;
        xi << nr, np;
        z = z * se3_exp(xi);
      }
      log.add(AbsolutePoseMeas{st.t, s.ref_frame, s.sensor, z, cov});
    }
  }

  // landmarks
  if (c.landmarks) {
    const auto& s = *c.landmarks;
    log.extrinsics[s.sensor] = s.extrinsic;
    SplitMix64 lay(stream_seed(c.seed, "landmark_layout"));
    const double S_total = arc(c.trajectory, c.duration).first;
    for (int i = 0; i < s.count; ++i) {
      const double S = (static_cast<double>(i) + 0.5) / s.count * S_total;
      const PathPoint pp = eval_path(c.trajectory, S);
      Vec3 n(-pp.dP.y(), pp.dP.x(), 0.0);
      if (n.norm() < 1e-9) n = Vec3::UnitY();
      n.normalize();
      const double lateral = s.lateral_spread * (2.0 * lay.uniform() - 1.0);
      const double up = 2.0 * lay.uniform() - 1.0;
      gt.landmarks[i] = pp.P + c.trajectory.origin + lateral * n + Vec3(0.0, 0.0, up);
    }
    SplitMix64 r(stream_seed(c.seed, "landmarks"));
    for (long k : stream_ticks(s.rate, c.duration, imu_rate, K)) {
      const NavState& st = gt.states[k];
      const Pose3 T_WC = st.pose() * s.extrinsic;
      std::vector<std::pair<double, long>> visible;
      for (const auto& [id, p] : gt.landmarks) {
        const double d = (p - T_WC.translation()).norm();
        if (d < s.range) visible.emplace_back(d, id);
      }
      std::sort(visible.begin(), visible.end());
      if (static_cast<int>(visible.size()) > s.max_per_frame) visible.resize(s.max_per_frame);
      std::sort(visible.begin(), visible.end(), [](auto& a, auto& b) { return a.second < b.second; });
      for (const auto& [d, id] : visible) {
        Vec3 z = T_WC.transform_to(gt.landmarks.at(id));
        if (noisy) z += s.sigma * gauss3(r);
        log.add(LandmarkMeas{st.t, s.sensor, id, z, Mat3::Identity() * s.sigma * s.sigma});
      }
    }
  }

  // body velocity
  if (c.velocity) {
    const auto& s = *c.velocity;
    log.extrinsics[s.sensor] = s.extrinsic;
    SplitMix64 r(stream_seed(c.seed, "velocity"));
    for (long k : stream_ticks(s.rate, c.duration, imu_rate, K)) {
      const NavState& st = gt.states[k];
      const Vec3 w = gt.body_rates[k];
      Vec3 z = s.extrinsic.rotation().inverse() * (st.R.inverse() * st.v + w.cross(s.extrinsic.translation()));
      if (noisy) z += s.sigma * gauss3(r);
      log.add(LocalVelocityMeas{st.t, s.sensor, z, Vec3::Zero(), Mat3::Identity() * s.sigma * s.sigma});
    }
  }

  for (const auto& o : c.outages) log = inject_outage(log, o.stream, o.start, o.end);
  return out;
}

MeasurementLog inject_outage(const MeasurementLog& log, const std::string& stream, double start, double end) {
  const auto key = StreamKey::parse(stream);
  if (!key) throw std::invalid_argument("unknown stream name " + stream);
  auto it = log.streams.find(*key);
  if (it == log.streams.end()) throw std::invalid_argument("unknown stream " + stream);
  MeasurementLog out = log;
  auto& ms = out.streams[*key];
  std::erase_if(ms, [&](const Measurement& m) {
    const double t = meas_time(m);
    return t >= start && t <= end;
  });
  return out;
}

std::map<std::string, ScenarioConfig> standard_scenarios() {
  std::map<std::string, ScenarioConfig> out;

  ScenarioConfig hike;
  hike.name = "hike-like";
  hike.seed = 11;
  hike.duration = 120.0;
  hike.trajectory.kind = TrajectoryKind::FigureEight;
  hike.trajectory.size = 30.0;
  hike.trajectory.speed = 1.2;
  hike.imu.initial_bias_sigma << 2e-3, 2e-3, 2e-3, 3e-2, 3e-2, 3e-2;
  hike.gnss = GnssSimConfig{};
  hike.pose = PoseSimConfig{};
  hike.pose->drift.rw_sigma = make_vec6(1e-4, 1e-2);
  hike.pose->drift.initial = Pose3(Rot3::from_rpy(0.0, 0.0, 0.4), Vec3(3.0, -2.0, 0.5));
  hike.landmarks = LandmarkSimConfig{};
  hike.outages.push_back({"abs_pos:G", 50.0, 70.0});
  out[hike.name] = hike;

  ScenarioConfig parkour;
  parkour.name = "parkour-like";
  parkour.seed = 12;
  parkour.duration = 60.0;
  parkour.trajectory.kind = TrajectoryKind::Circle;
  parkour.trajectory.size = 6.0;
  parkour.trajectory.speed = 3.0;
  parkour.trajectory.roll_amp = 0.25;
  parkour.trajectory.pitch_amp = 0.25;
  parkour.trajectory.height_amp = 0.3;
  parkour.imu.initial_bias_sigma = hike.imu.initial_bias_sigma;
  parkour.landmarks = LandmarkSimConfig{};
  parkour.landmarks->count = 40;
  parkour.landmarks->range = 8.0;
  parkour.landmarks->lateral_spread = 4.0;
  parkour.landmarks->rate = 10.0;
  out[parkour.name] = parkour;

  ScenarioConfig corridor;
  corridor.name = "degenerate-corridor";
  corridor.seed = 13;
  corridor.duration = 120.0;
  corridor.trajectory.kind = TrajectoryKind::Waypoints;
  corridor.trajectory.speed = 1.5;
  corridor.trajectory.height_amp = 0.1;
  corridor.trajectory.waypoints = {Vec3(0, 0, 0), Vec3(60, 0, 0), Vec3(70, 4, 0), Vec3(60, 8, 0), Vec3(0, 8, 0),
                                   Vec3(-10, 4, 0)};
  corridor.imu.initial_bias_sigma = hike.imu.initial_bias_sigma;
  corridor.gnss = GnssSimConfig{};
  corridor.pose = *hike.pose;
  corridor.pose->drift.rw_sigma = hike.pose->drift.rw_sigma * kCorridorDriftFactor;
  corridor.velocity = VelocitySimConfig{};
  corridor.outages.push_back({"abs_pos:G", 40.0, 90.0});
  out[corridor.name] = corridor;
  return out;
}

// ---- JSON ------------------------------------------------------------------

namespace {

json vec_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

template <int N>
Eigen::Matrix<double, N, 1> json_vec(const json& j) {
  if (!j.is_array() || j.size() != N) throw std::invalid_argument("expected an array of " + std::to_string(N));
  Eigen::Matrix<double, N, 1> v;
  for (int i = 0; i < N; ++i) v(i) = j.at(i).get<double>();
  return v;
}

json pose_json(const Pose3& p) {
  const Quat& q = p.rotation().quaternion();
  return {{"t", vec_json(p.translation())}, {"q", {q.x(), q.y(), q.z(), q.w()}}};
}

Pose3 json_pose(const json& j) {
  const Eigen::Vector4d q = json_vec<4>(j.at("q"));
  Quat quat(q(3), q(0), q(1), q(2));
  if (std::abs(quat.norm() - 1.0) > 1e-6) throw std::invalid_argument("quaternion is not unit");
  return Pose3(Rot3(quat.normalized()), json_vec<3>(j.at("t")));
}

const char* kind_name(TrajectoryKind k) {
  switch (k) {
    case TrajectoryKind::Circle: return "circle";
    case TrajectoryKind::FigureEight: return "figure-eight";
    case TrajectoryKind::Waypoints: return "waypoints";
  }
  return "?";
}

TrajectoryKind kind_from(const std::string& s) {
  if (s == "circle") return TrajectoryKind::Circle;
  if (s == "figure-eight") return TrajectoryKind::FigureEight;
  if (s == "waypoints") return TrajectoryKind::Waypoints;
  throw std::invalid_argument("unknown trajectory kind " + s);
}

json drift_json(const DriftSpec& d) {
  return {{"rw_sigma", vec_json(d.rw_sigma)},
          {"linear_rate", vec_json(d.linear_rate)},
          {"sine_amp", vec_json(d.sine_amp)},
          {"sine_period", d.sine_period},
          {"initial", pose_json(d.initial)}};
}

DriftSpec json_drift(const json& j) {
  DriftSpec d;
  d.rw_sigma = json_vec<6>(j.at("rw_sigma"));
  d.linear_rate = json_vec<6>(j.at("linear_rate"));
  d.sine_amp = json_vec<6>(j.at("sine_amp"));
  d.sine_period = j.at("sine_period").get<double>();
  d.initial = json_pose(j.at("initial"));
  return d;
}

json config_json(const ScenarioConfig& c) {
  json j;
  j["name"] = c.name;
  j["duration"] = c.duration;
  j["seed"] = c.seed;
  j["noise_free"] = c.noise_free;
  j["gravity"] = c.gravity;
  const auto& tr = c.trajectory;
  json wps = json::array();
  for (const auto& w : tr.waypoints) wps.push_back(vec_json(w));
  j["trajectory"] = {{"kind", kind_name(tr.kind)}, {"speed", tr.speed},         {"size", tr.size},
                     {"waypoints", wps},          {"hold", tr.hold},           {"ramp", tr.ramp},
                     {"roll_amp", tr.roll_amp},   {"pitch_amp", tr.pitch_amp}, {"height_amp", tr.height_amp},
                     {"origin", vec_json(tr.origin)}};
  j["imu"] = {{"rate", c.imu.rate},
              {"gyro_noise_density", c.imu.noise.gyro_noise_density},
              {"accel_noise_density", c.imu.noise.accel_noise_density},
              {"gyro_bias_rw", c.imu.noise.gyro_bias_rw},
              {"accel_bias_rw", c.imu.noise.accel_bias_rw},
              {"initial_bias_sigma", vec_json(c.imu.initial_bias_sigma)}};
  j["gnss"] = c.gnss ? json{{"sensor", c.gnss->sensor},
                            {"rate", c.gnss->rate},
                            {"sigma", c.gnss->sigma},
                            {"extrinsic", pose_json(c.gnss->extrinsic)}}
                     : json(nullptr);
  j["pose"] = c.pose ? json{{"sensor", c.pose->sensor},
                            {"ref_frame", c.pose->ref_frame},
                            {"rate", c.pose->rate},
                            {"sigma_pos", c.pose->sigma_pos},
                            {"sigma_rot", c.pose->sigma_rot},
                            {"extrinsic", pose_json(c.pose->extrinsic)},
                            {"drift", drift_json(c.pose->drift)}}
                     : json(nullptr);
  j["landmarks"] = c.landmarks ? json{{"sensor", c.landmarks->sensor},
                                      {"rate", c.landmarks->rate},
                                      {"count", c.landmarks->count},
                                      {"range", c.landmarks->range},
                                      {"max_per_frame", c.landmarks->max_per_frame},
                                      {"lateral_spread", c.landmarks->lateral_spread},
                                      {"sigma", c.landmarks->sigma},
                                      {"extrinsic", pose_json(c.landmarks->extrinsic)}}
                               : json(nullptr);
  j["velocity"] = c.velocity ? json{{"sensor", c.velocity->sensor},
                                    {"rate", c.velocity->rate},
                                    {"sigma", c.velocity->sigma},
                                    {"extrinsic", pose_json(c.velocity->extrinsic)}}
                             : json(nullptr);
  json outs = json::array();
  for (const auto& o : c.outages) outs.push_back({{"stream", o.stream}, {"start", o.start}, {"end", o.end}});
  j["outages"] = outs;
  return j;
}

ScenarioConfig json_config(const json& j) {
  ScenarioConfig c;
  c.name = j.at("name").get<std::string>();
  c.duration = j.at("duration").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.noise_free = j.at("noise_free").get<bool>();
  c.gravity = j.at("gravity").get<double>();
  const json& t = j.at("trajectory");
  c.trajectory.kind = kind_from(t.at("kind").get<std::string>());
  c.trajectory.speed = t.at("speed").get<double>();
  c.trajectory.size = t.at("size").get<double>();
  for (const auto& w : t.at("waypoints")) c.trajectory.waypoints.push_back(json_vec<3>(w));
  c.trajectory.hold = t.at("hold").get<double>();
  c.trajectory.ramp = t.at("ramp").get<double>();
  c.trajectory.roll_amp = t.at("roll_amp").get<double>();
  c.trajectory.pitch_amp = t.at("pitch_amp").get<double>();
  c.trajectory.height_amp = t.at("height_amp").get<double>();
  c.trajectory.origin = json_vec<3>(t.at("origin"));
  const json& im = j.at("imu");
  c.imu.rate = im.at("rate").get<double>();
  c.imu.noise.gyro_noise_density = im.at("gyro_noise_density").get<double>();
  c.imu.noise.accel_noise_density = im.at("accel_noise_density").get<double>();
  c.imu.noise.gyro_bias_rw = im.at("gyro_bias_rw").get<double>();
  c.imu.noise.accel_bias_rw = im.at("accel_bias_rw").get<double>();
  c.imu.initial_bias_sigma = json_vec<6>(im.at("initial_bias_sigma"));
  if (j.contains("gnss") && !j["gnss"].is_null()) {
    const json& s = j["gnss"];
    c.gnss = GnssSimConfig{s.at("sensor").get<std::string>(), s.at("rate").get<double>(), s.at("sigma").get<double>(),
                           json_pose(s.at("extrinsic"))};
  }
  if (j.contains("pose") && !j["pose"].is_null()) {
    const json& s = j["pose"];
    PoseSimConfig p;
    p.sensor = s.at("sensor").get<std::string>();
    p.ref_frame = s.at("ref_frame").get<std::string>();
    p.rate = s.at("rate").get<double>();
    p.sigma_pos = s.at("sigma_pos").get<double>();
    p.sigma_rot = s.at("sigma_rot").get<double>();
    p.extrinsic = json_pose(s.at("extrinsic"));
    p.drift = json_drift(s.at("drift"));
    c.pose = p;
  }
  if (j.contains("landmarks") && !j["landmarks"].is_null()) {
    const json& s = j["landmarks"];
    LandmarkSimConfig l;
    l.sensor = s.at("sensor").get<std::string>();
    l.rate = s.at("rate").get<double>();
    l.count = s.at("count").get<int>();
    l.range = s.at("range").get<double>();
    l.max_per_frame = s.at("max_per_frame").get<int>();
    l.lateral_spread = s.at("lateral_spread").get<double>();
    l.sigma = s.at("sigma").get<double>();
    l.extrinsic = json_pose(s.at("extrinsic"));
    c.landmarks = l;
  }
  if (j.contains("velocity") && !j["velocity"].is_null()) {
    const json& s = j["velocity"];
    c.velocity = VelocitySimConfig{s.at("sensor").get<std::string>(), s.at("rate").get<double>(),
                                   s.at("sigma").get<double>(), json_pose(s.at("extrinsic"))};
  }
  for (const auto& o : j.at("outages"))
    c.outages.push_back({o.at("stream").get<std::string>(), o.at("start").get<double>(), o.at("end").get<double>()});
  return c;
}

}  // namespace

std::string scenario_to_json(const ScenarioConfig& c) { return config_json(c).dump(2); }

ScenarioConfig scenario_from_json(const std::string& text) {
  json patch;
  try {
    patch = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("scenario config: ") + e.what());
  }
  if (!patch.is_object()) throw std::invalid_argument("scenario config must be a JSON object");
  ScenarioConfig base;
  if (patch.contains("scenario")) {
    const auto all = standard_scenarios();
    const std::string name = patch["scenario"].get<std::string>();
    auto it = all.find(name);
    if (it == all.end()) throw std::invalid_argument("unknown scenario " + name);
    base = it->second;
    patch.erase("scenario");
  }
  json j = config_json(base);
  j.merge_patch(patch);
  try {
    ScenarioConfig c = json_config(j);
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("scenario config: ") + e.what());
  }
}

void write_ground_truth(const GroundTruth& gt, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_tum(dir / "gt.tum", gt.trajectory());
  auto open = [&](const char* name) {
    std::ofstream f(dir / name);
    if (!f) throw std::runtime_error("cannot write " + (dir / name).string());
    return f;
  };
  char buf[320];
  {
    std::ofstream f = open("gt_bias.csv");
    f << "t,bgx,bgy,bgz,bax,bay,baz\n";
    for (const auto& s : gt.states) {
      std::snprintf(buf, sizeof buf, "%.9f,%.12f,%.12f,%.12f,%.12f,%.12f,%.12f\n", s.t, s.bias.gyro.x(), s.bias.gyro.y(),
                    s.bias.gyro.z(), s.bias.accel.x(), s.bias.accel.y(), s.bias.accel.z());
      f << buf;
    }
  }
  {
    std::ofstream f = open("drift.csv");
    f << "frame,t,x,y,z,qx,qy,qz,qw\n";
    const double end = gt.states.empty() ? 0.0 : gt.states.back().t;
    for (const auto& [frame, knots] : gt.drift_knots) {
      (void)knots;
      for (long i = 0; static_cast<double>(i) / 10.0 <= end + 1e-9; ++i) {
        const double t = static_cast<double>(i) / 10.0;
        const Pose3 T = gt.alignment(frame, t);
        Quat q = T.rotation().quaternion();
        if (q.w() < 0.0) q.coeffs() = -q.coeffs();
        const Vec3& p = T.translation();
        std::snprintf(buf, sizeof buf, "%s,%.9f,%.9f,%.9f,%.9f,%.12f,%.12f,%.12f,%.12f\n", frame.c_str(), t, p.x(),
                      p.y(), p.z(), q.x(), q.y(), q.z(), q.w());
        f << buf;
      }
    }
  }
  {
    std::ofstream f = open("landmarks.csv");
    f << "id,x,y,z\n";
    for (const auto& [id, p] : gt.landmarks) {
      std::snprintf(buf, sizeof buf, "%ld,%.9f,%.9f,%.9f\n", id, p.x(), p.y(), p.z());
      f << buf;
    }
  }
}

}  // namespace hfusion
