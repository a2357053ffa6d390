#include "hfusion/measurements.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace hfusion {

using nlohmann::json;

namespace {

constexpr const char* kFormat = "hf_log_v1";

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};

json vec_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

json quat_json(const Quat& q) { return json::array({q.x(), q.y(), q.z(), q.w()}); }

json upper_json(const Eigen::MatrixXd& m) {
  json a = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = r; c < m.cols(); ++c) a.push_back(m(r, c));
  return a;
}

json pose_json(const Pose3& p) {
  return {{"t", vec_json(p.translation())}, {"q", quat_json(p.rotation().quaternion())}};
}

// ---- parsing helpers; all throw LogError with the current line ----

struct Reader {
  std::size_t line;

  [[noreturn]] void fail(const std::string& what) const { throw LogError(line, what); }

  const json& field(const json& j, const char* name) const {
    if (!j.is_object()) fail("expected an object");
    auto it = j.find(name);
    if (it == j.end()) fail(std::string("missing field '") + name + "'");
    return *it;
  }

  double number(const json& j, const char* name) const {
    const json& v = field(j, name);
    if (!v.is_number()) fail(std::string("field '") + name + "' is not a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) fail(std::string("field '") + name + "' is not finite");
    return d;
  }

  std::string text(const json& j, const char* name) const {
    const json& v = field(j, name);
    if (!v.is_string() || v.get<std::string>().empty()) fail(std::string("field '") + name + "' must be a non-empty string");
    return v.get<std::string>();
  }

  Eigen::VectorXd array(const json& v, const char* name, std::size_t n) const {
    if (!v.is_array() || v.size() != n)
      fail(std::string("field '") + name + "' must be an array of " + std::to_string(n) + " numbers");
    Eigen::VectorXd out(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
      if (!v[i].is_number()) fail(std::string("field '") + name + "' contains a non-number");
      out[static_cast<Eigen::Index>(i)] = v[i].get<double>();
      if (!std::isfinite(out[static_cast<Eigen::Index>(i)])) fail(std::string("field '") + name + "' is not finite");
    }
    return out;
  }

  Vec3 vec3(const json& j, const char* name) const { return array(field(j, name), name, 3); }

  Quat quat(const json& j, const char* name) const {
    const Eigen::VectorXd q = array(field(j, name), name, 4);
    if (std::abs(q.norm() - 1.0) > 1e-6) fail(std::string("quaternion '") + name + "' is not unit length");
    return Quat(q[3], q[0], q[1], q[2]);
  }

  Eigen::MatrixXd cov(const json& j, int n) const {
    const std::size_t count = static_cast<std::size_t>(n * (n + 1) / 2);
    const Eigen::VectorXd u = array(field(j, "cov"), "cov", count);
    Eigen::MatrixXd m(n, n);
    Eigen::Index k = 0;
    for (int r = 0; r < n; ++r)
      for (int c = r; c < n; ++c) {
        m(r, c) = u[k];
        m(c, r) = u[k];
        ++k;
      }
    if (auto err = validate_spd(m)) fail("covariance: " + *err);
    return m;
  }

  Pose3 pose(const json& j) const { return {Rot3(quat(j, "q")), vec3(j, "t")}; }
};

void parse_header(const json& j, const Reader& rd, MeasurementLog& log) {
  if (rd.text(j, "format") != kFormat) rd.fail("unsupported format, expected hf_log_v1");
  if (j.contains("gravity")) log.gravity = rd.number(j, "gravity");
  if (j.contains("extrinsics")) {
    const json& ex = j["extrinsics"];
    if (!ex.is_object()) rd.fail("'extrinsics' must be an object");
    for (auto it = ex.begin(); it != ex.end(); ++it) {
      if (it.key().empty()) rd.fail("empty frame name in extrinsics");
      log.extrinsics[it.key()] = rd.pose(it.value());
    }
  }
  if (j.contains("ref_frames")) {
    const json& rf = j["ref_frames"];
    if (!rf.is_array()) rd.fail("'ref_frames' must be an array");
    log.ref_frames.clear();
    for (const json& f : rf) {
      if (!f.is_string() || f.get<std::string>().empty()) rd.fail("reference frame names must be non-empty strings");
      const std::string name = f.get<std::string>();
      if (std::find(log.ref_frames.begin(), log.ref_frames.end(), name) != log.ref_frames.end())
        rd.fail("duplicate reference frame '" + name + "'");
      log.ref_frames.push_back(name);
    }
    if (!log.has_ref_frame(kWorldFrame)) log.ref_frames.insert(log.ref_frames.begin(), kWorldFrame);
  }
  if (j.contains("imu_noise")) {
    const json& n = j["imu_noise"];
    log.imu_noise.gyro_noise_density = rd.number(n, "gyro_noise_density");
    log.imu_noise.accel_noise_density = rd.number(n, "accel_noise_density");
    log.imu_noise.gyro_bias_rw = rd.number(n, "gyro_bias_rw");
    log.imu_noise.accel_bias_rw = rd.number(n, "accel_bias_rw");
  }
}

Measurement parse_measurement(const json& j, const Reader& rd, const MeasurementLog& log) {
  const std::string kind = rd.text(j, "kind");
  const double t = rd.number(j, "t");
  auto check_sensor = [&](const FrameId& s) {
    if (!log.extrinsics.count(s)) rd.fail("unknown sensor frame '" + s + "' (no extrinsic)");
  };
  auto check_ref = [&](const FrameId& r, const FrameId& s) {
    if (!log.has_ref_frame(r)) rd.fail("unknown reference frame '" + r + "'");
    if (r == s) rd.fail("reference frame equals sensor frame");
  };
  if (kind == "imu") {
    return ImuSample{t, rd.vec3(j, "accel"), rd.vec3(j, "gyro")};
  }
  if (kind == "abs_pose") {
    AbsolutePoseMeas m;
    m.t = t;
    m.ref_frame = rd.text(j, "ref");
    m.sensor_frame = rd.text(j, "sensor");
    check_sensor(m.sensor_frame);
    check_ref(m.ref_frame, m.sensor_frame);
    m.pose = Pose3(Rot3(rd.quat(j, "q")), rd.vec3(j, "position"));
    m.cov = rd.cov(j, 6);
    return m;
  }
  if (kind == "abs_pos") {
    AbsolutePositionMeas m;
    m.t = t;
    m.ref_frame = rd.text(j, "ref");
    m.sensor_frame = rd.text(j, "sensor");
    check_sensor(m.sensor_frame);
    check_ref(m.ref_frame, m.sensor_frame);
    m.position = rd.vec3(j, "position");
    m.cov = rd.cov(j, 3);
    return m;
  }
  if (kind == "landmark") {
    LandmarkMeas m;
    m.t = t;
    m.sensor_frame = rd.text(j, "sensor");
    check_sensor(m.sensor_frame);
    const json& id = rd.field(j, "id");
    if (!id.is_number_integer()) rd.fail("field 'id' must be an integer");
    m.landmark_id = id.get<long>();
    m.position_in_sensor = rd.vec3(j, "position");
    m.cov = rd.cov(j, 3);
    return m;
  }
  if (kind == "local_vel") {
    LocalVelocityMeas m;
    m.t = t;
    m.sensor_frame = rd.text(j, "sensor");
    check_sensor(m.sensor_frame);
    m.velocity_in_sensor = rd.vec3(j, "velocity");
    m.angular_in_sensor = j.contains("angular") ? rd.vec3(j, "angular") : Vec3::Zero();
    m.cov = rd.cov(j, 3);
    return m;
  }
  rd.fail("unknown measurement kind '" + kind + "'");
}

json measurement_json(const Measurement& m) {
  return std::visit(
      Overloaded{
          [](const ImuSample& s) -> json {
            return {{"kind", "imu"}, {"t", s.t}, {"accel", vec_json(s.accel)}, {"gyro", vec_json(s.gyro)}};
          },
          [](const AbsolutePoseMeas& s) -> json {
            return {{"kind", "abs_pose"},
                    {"t", s.t},
                    {"ref", s.ref_frame},
                    {"sensor", s.sensor_frame},
                    {"position", vec_json(s.pose.translation())},
                    {"q", quat_json(s.pose.rotation().quaternion())},
                    {"cov", upper_json(s.cov)}};
          },
          [](const AbsolutePositionMeas& s) -> json {
            return {{"kind", "abs_pos"},     {"t", s.t},
                    {"ref", s.ref_frame},    {"sensor", s.sensor_frame},
                    {"position", vec_json(s.position)}, {"cov", upper_json(s.cov)}};
          },
          [](const LandmarkMeas& s) -> json {
            return {{"kind", "landmark"}, {"t", s.t},
                    {"sensor", s.sensor_frame}, {"id", s.landmark_id},
                    {"position", vec_json(s.position_in_sensor)}, {"cov", upper_json(s.cov)}};
          },
          [](const LocalVelocityMeas& s) -> json {
            return {{"kind", "local_vel"},
                    {"t", s.t},
                    {"sensor", s.sensor_frame},
                    {"velocity", vec_json(s.velocity_in_sensor)},
                    {"angular", vec_json(s.angular_in_sensor)},
                    {"cov", upper_json(s.cov)}};
          }},
      m);
}

bool poses_equal(const Pose3& a, const Pose3& b) {
  return a.rotation().quaternion().coeffs() == b.rotation().quaternion().coeffs() &&
         a.translation() == b.translation();
}

}  // namespace

const char* kind_name(MeasKind k) {
  switch (k) {
    case MeasKind::Imu: return "imu";
    case MeasKind::AbsPose: return "abs_pose";
    case MeasKind::AbsPos: return "abs_pos";
    case MeasKind::Landmark: return "landmark";
    case MeasKind::LocalVel: return "local_vel";
  }
  return "?";
}

std::optional<MeasKind> kind_from_name(const std::string& s) {
  for (MeasKind k : {MeasKind::Imu, MeasKind::AbsPose, MeasKind::AbsPos, MeasKind::Landmark, MeasKind::LocalVel})
    if (s == kind_name(k)) return k;
  return std::nullopt;
}

double meas_time(const Measurement& m) {
  return std::visit([](const auto& x) { return x.t; }, m);
}

MeasKind meas_kind(const Measurement& m) { return static_cast<MeasKind>(m.index()); }

const FrameId& meas_sensor(const Measurement& m) {
  return std::visit(Overloaded{[](const ImuSample&) -> const FrameId& { return kImuFrame; },
                               [](const auto& x) -> const FrameId& { return x.sensor_frame; }},
                    m);
}

std::string StreamKey::name() const { return std::string(kind_name(kind)) + ":" + sensor; }

std::optional<StreamKey> StreamKey::parse(const std::string& s) {
  const auto colon = s.find(':');
  if (colon == std::string::npos) {
    if (s == "imu") return StreamKey{MeasKind::Imu, kImuFrame};
    return std::nullopt;
  }
  auto kind = kind_from_name(s.substr(0, colon));
  if (!kind || colon + 1 >= s.size()) return std::nullopt;
  return StreamKey{*kind, s.substr(colon + 1)};
}

StreamKey stream_of(const Measurement& m) { return {meas_kind(m), meas_sensor(m)}; }

std::size_t MeasurementLog::size() const {
  std::size_t n = 0;
  for (const auto& [k, v] : streams) n += v.size();
  return n;
}

std::vector<Measurement> MeasurementLog::time_sorted() const {
  struct Ref {
    double t;
    const StreamKey* key;
    std::size_t idx;
    const Measurement* m;
  };
  std::vector<Ref> refs;
  refs.reserve(size());
  for (const auto& [key, vec] : streams)
    for (std::size_t i = 0; i < vec.size(); ++i) refs.push_back({meas_time(vec[i]), &key, i, &vec[i]});
  std::sort(refs.begin(), refs.end(), [](const Ref& a, const Ref& b) {
    if (a.t != b.t) return a.t < b.t;
    if (*a.key != *b.key) return *a.key < *b.key;
    return a.idx < b.idx;
  });
  std::vector<Measurement> out;
  out.reserve(refs.size());
  for (const Ref& r : refs) out.push_back(*r.m);
  return out;
}

std::vector<ImuSample> MeasurementLog::imu() const {
  std::vector<ImuSample> out;
  auto it = streams.find(StreamKey{MeasKind::Imu, kImuFrame});
  if (it == streams.end()) return out;
  out.reserve(it->second.size());
  for (const Measurement& m : it->second) out.push_back(std::get<ImuSample>(m));
  return out;
}

bool MeasurementLog::has_ref_frame(const FrameId& f) const {
  return std::find(ref_frames.begin(), ref_frames.end(), f) != ref_frames.end();
}

std::optional<std::string> validate_spd(const Eigen::MatrixXd& m) {
  if (m.rows() != m.cols() || m.rows() == 0) return "matrix is not square";
  if (!m.allFinite()) return "matrix has non-finite entries";
  if ((m - m.transpose()).cwiseAbs().maxCoeff() >= 1e-9) return "matrix is not symmetric";
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() != Eigen::Success) return "matrix is not positive definite";
  const Eigen::VectorXd d = llt.matrixL().toDenseMatrix().diagonal();
  if (d.minCoeff() <= 0.0) return "matrix is not positive definite";
  return std::nullopt;
}

MeasurementLog parse_log_text(const std::string& text) {
  MeasurementLog log;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  bool seen_any = false;
  std::map<StreamKey, double> last_t;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Reader rd{line_no};
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      rd.fail(std::string("invalid JSON: ") + e.what());
    }
    if (!seen_any) {
      seen_any = true;
      if (j.is_object() && j.contains("format")) {
        parse_header(j, rd, log);
        continue;
      }
    } else if (j.is_object() && j.contains("format")) {
      rd.fail("header must be the first line");
    }
    Measurement m = parse_measurement(j, rd, log);
    const StreamKey key = stream_of(m);
    const double t = meas_time(m);
    auto it = last_t.find(key);
    if (it != last_t.end()) {
      const bool ok = key.kind == MeasKind::Imu ? t > it->second : t >= it->second;
      if (!ok) rd.fail("timestamps of stream " + key.name() + " are not increasing");
    }
    last_t[key] = t;
    log.streams[key].push_back(std::move(m));
  }
  return log;
}

MeasurementLog parse_log(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open log file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_log_text(ss.str());
}

std::string write_log_text(const MeasurementLog& log) {
  json header = {{"format", kFormat}, {"gravity", log.gravity}};
  json ex = json::object();
  for (const auto& [name, pose] : log.extrinsics) ex[name] = pose_json(pose);
  header["extrinsics"] = ex;
  header["ref_frames"] = log.ref_frames;
  header["imu_noise"] = {{"gyro_noise_density", log.imu_noise.gyro_noise_density},
                         {"accel_noise_density", log.imu_noise.accel_noise_density},
                         {"gyro_bias_rw", log.imu_noise.gyro_bias_rw},
                         {"accel_bias_rw", log.imu_noise.accel_bias_rw}};
  std::string out = header.dump() + "\n";
  for (const Measurement& m : log.time_sorted()) out += measurement_json(m).dump() + "\n";
  return out;
}

void write_log(const MeasurementLog& log, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write log file " + path);
  f << write_log_text(log);
}

bool measurements_equal(const Measurement& a, const Measurement& b) {
  if (a.index() != b.index()) return false;
  return std::visit(
      Overloaded{
          [&](const ImuSample& x) {
            const auto& y = std::get<ImuSample>(b);
            return x.t == y.t && x.accel == y.accel && x.gyro == y.gyro;
          },
          [&](const AbsolutePoseMeas& x) {
            const auto& y = std::get<AbsolutePoseMeas>(b);
            return x.t == y.t && x.ref_frame == y.ref_frame && x.sensor_frame == y.sensor_frame &&
                   poses_equal(x.pose, y.pose) && x.cov == y.cov;
          },
          [&](const AbsolutePositionMeas& x) {
            const auto& y = std::get<AbsolutePositionMeas>(b);
            return x.t == y.t && x.ref_frame == y.ref_frame && x.sensor_frame == y.sensor_frame &&
                   x.position == y.position && x.cov == y.cov;
          },
          [&](const LandmarkMeas& x) {
            const auto& y = std::get<LandmarkMeas>(b);
            return x.t == y.t && x.sensor_frame == y.sensor_frame && x.landmark_id == y.landmark_id &&
                   x.position_in_sensor == y.position_in_sensor && x.cov == y.cov;
          },
          [&](const LocalVelocityMeas& x) {
            const auto& y = std::get<LocalVelocityMeas>(b);
            return x.t == y.t && x.sensor_frame == y.sensor_frame && x.velocity_in_sensor == y.velocity_in_sensor &&
                   x.angular_in_sensor == y.angular_in_sensor && x.cov == y.cov;
          }},
      a);
}

bool logs_equal(const MeasurementLog& a, const MeasurementLog& b) {
  if (a.gravity != b.gravity || a.ref_frames != b.ref_frames || !(a.imu_noise == b.imu_noise)) return false;
  if (a.extrinsics.size() != b.extrinsics.size()) return false;
  for (const auto& [name, pose] : a.extrinsics) {
    auto it = b.extrinsics.find(name);
    if (it == b.extrinsics.end() || !poses_equal(pose, it->second)) return false;
  }
  if (a.streams.size() != b.streams.size()) return false;
  for (const auto& [key, vec] : a.streams) {
    auto it = b.streams.find(key);
    if (it == b.streams.end() || it->second.size() != vec.size()) return false;
    for (std::size_t i = 0; i < vec.size(); ++i)
      if (!measurements_equal(vec[i], it->second[i])) return false;
  }
  return true;
}

std::vector<ReplayEvent> merged_replay(const MeasurementLog& log, const std::map<std::string, double>& stream_delays,
                                       double lag) {
  std::vector<ReplayEvent> events;
  for (const Measurement& m : log.time_sorted()) {
    double delay = 0.0;
    auto it = stream_delays.find(stream_of(m).name());
    if (it != stream_delays.end()) delay = it->second;
    events.push_back({m, meas_time(m) + delay, delay > lag});
  }
  // time_sorted already fixed the tie order; a stable sort keeps it.
  std::stable_sort(events.begin(), events.end(),
                   [](const ReplayEvent& a, const ReplayEvent& b) { return a.arrival < b.arrival; });
  return events;
}

}  // namespace hfusion
