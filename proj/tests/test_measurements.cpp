#include <cmath>
#include <limits>
#include <tuple>

#include "doctest.h"
#include "hfusion/measurements.hpp"
#include "test_utils.hpp"

using namespace hfusion;
using namespace hfusion::testing;

namespace {

const char* kHeader =
    R"({"format":"hf_log_v1","gravity":9.81,"extrinsics":{"I":{"t":[0,0,0],"q":[0,0,0,1]},)"
    R"("G":{"t":[0.1,0,0.3],"q":[0,0,0,1]}},"ref_frames":["W","M"]})";

std::string with_header(const std::string& body) { return std::string(kHeader) + "\n" + body; }

MeasurementLog sample_log() {
  MeasurementLog log;
  log.extrinsics["G"] = Pose3(Rot3::identity(), Vec3(0.1, 0.2, 0.3));
  log.extrinsics["L"] = random_pose();
  log.extrinsics["C"] = random_pose();
  log.extrinsics["V"] = random_pose();
  log.ref_frames = {"W", "M_lo"};
  for (int k = 0; k < 50; ++k) {
    const double t = k / 400.0;
    log.add(ImuSample{t, random_vec3(10), random_vec3(2)});
  }
  Eigen::MatrixXd A6 = Eigen::MatrixXd::Random(6, 6);
  Eigen::MatrixXd A3 = Eigen::MatrixXd::Random(3, 3);
  const Mat6 c6 = A6.transpose() * A6 + 0.1 * Mat6::Identity();
  const Mat3 c3 = A3.transpose() * A3 + 0.1 * Mat3::Identity();
  for (int k = 0; k < 5; ++k) {
    const double t = k * 0.025;
    log.add(AbsolutePoseMeas{t, "M_lo", "L", random_pose(), c6});
    log.add(AbsolutePositionMeas{t, "W", "G", random_vec3(100), c3});
    log.add(LandmarkMeas{t, "C", k % 2, random_vec3(5), c3});
    log.add(LandmarkMeas{t, "C", 7, random_vec3(5), c3});
    log.add(LocalVelocityMeas{t, "V", random_vec3(), Vec3::Zero(), c3});
  }
  return log;
}

}  // namespace

TEST_CASE("validate_spd") {
  CHECK_FALSE(validate_spd(Eigen::MatrixXd::Identity(3, 3)).has_value());
  CHECK(validate_spd(Eigen::Vector3d(1, 1, 0).asDiagonal().toDenseMatrix()).has_value());
  Eigen::MatrixXd asym = Eigen::MatrixXd::Identity(3, 3);
  asym(0, 1) = 1e-6;
  CHECK(validate_spd(asym).has_value());
  CHECK(validate_spd(Eigen::MatrixXd::Identity(2, 3)).has_value());
  for (int i = 0; i < 50; ++i) {
    const Eigen::MatrixXd A = Eigen::MatrixXd::Random(6, 6);
    const Eigen::MatrixXd m = A.transpose() * A + 1e-6 * Eigen::MatrixXd::Identity(6, 6);
    CHECK_FALSE(validate_spd(0.5 * (m + m.transpose())).has_value());
  }
}

TEST_CASE("parse trivial logs") {
  const MeasurementLog empty = parse_log_text("");
  CHECK(empty.streams.empty());
  CHECK(empty.size() == 0);

  const MeasurementLog one = parse_log_text(R"({"kind":"imu","t":0.5,"accel":[0,0,9.81],"gyro":[0,0,0]})");
  REQUIRE(one.streams.size() == 1);
  CHECK(one.size() == 1);
  CHECK(one.imu().at(0).accel.z() == 9.81);
}

TEST_CASE("write/parse round trip is lossless") {
  const MeasurementLog log = sample_log();
  const MeasurementLog back = parse_log_text(write_log_text(log));
  CHECK(logs_equal(log, back));
  // writing again is byte identical
  CHECK(write_log_text(back) == write_log_text(log));
}

TEST_CASE("parse errors report line numbers") {
  auto expect_error_line = [](const std::string& text, std::size_t line) {
    try {
      parse_log_text(text);
      FAIL("expected a parse error");
    } catch (const LogError& e) {
      CHECK(e.line() == line);
    }
  };
  // missing field
  expect_error_line(with_header(R"({"kind":"imu","t":0.5,"accel":[0,0,9.81]})"), 2);
  // NaN is not representable; null is rejected as a number
  expect_error_line(with_header(R"({"kind":"imu","t":null,"accel":[0,0,1],"gyro":[0,0,0]})"), 2);
  expect_error_line(with_header(R"({"kind":"imu","t":0.1,"accel":[0,NaN,1],"gyro":[0,0,0]})"), 2);
  // non-SPD covariance
  expect_error_line(
      with_header(R"({"kind":"abs_pos","t":0.1,"ref":"W","sensor":"G","position":[0,0,0],"cov":[1,0,0,1,0,0]})"), 2);
  // unknown sensor and unknown reference frames
  expect_error_line(
      with_header(R"({"kind":"abs_pos","t":0.1,"ref":"W","sensor":"X","position":[0,0,0],"cov":[1,0,0,1,0,1]})"), 2);
  expect_error_line(
      with_header(R"({"kind":"abs_pos","t":0.1,"ref":"Q","sensor":"G","position":[0,0,0],"cov":[1,0,0,1,0,1]})"), 2);
  // non-monotone IMU timestamps on line 3
  expect_error_line(with_header(R"({"kind":"imu","t":0.5,"accel":[0,0,1],"gyro":[0,0,0]})"
                                "\n"
                                R"({"kind":"imu","t":0.5,"accel":[0,0,1],"gyro":[0,0,0]})"),
                    3);
  expect_error_line(with_header(R"({"kind":"teleport","t":0.5})"), 2);
}

TEST_CASE("merged_replay ordering") {
  const MeasurementLog log = sample_log();
  const std::vector<Measurement> sorted = log.time_sorted();

  SUBCASE("zero delay is the identity permutation") {
    const auto events = merged_replay(log, {}, 3.0);
    REQUIRE(events.size() == sorted.size());
    for (std::size_t i = 0; i < events.size(); ++i) {
      CHECK(measurements_equal(events[i].meas, sorted[i]));
      CHECK_FALSE(events[i].droppable);
    }
  }

  SUBCASE("delayed stream matches the arrival-time oracle") {
    MeasurementLog two;
    two.extrinsics["G"] = Pose3::identity();
    for (int k = 0; k < 20; ++k) two.add(ImuSample{k * 0.05, Vec3::Zero(), Vec3::Zero()});
    for (int k = 0; k < 5; ++k) two.add(AbsolutePositionMeas{k * 0.2, "W", "G", Vec3::Zero(), Mat3::Identity()});
    const auto events = merged_replay(two, {{"abs_pos:G", 0.1}}, 3.0);
    // Oracle: arrival = t (+0.1 for GNSS); ties broken by true time, then IMU first.
    std::vector<std::tuple<double, double, int>> oracle;
    for (int k = 0; k < 20; ++k) oracle.push_back({k * 0.05, k * 0.05, 0});
    for (int k = 0; k < 5; ++k) oracle.push_back({k * 0.2 + 0.1, k * 0.2, 1});
    std::sort(oracle.begin(), oracle.end());
    REQUIRE(events.size() == oracle.size());
    for (std::size_t i = 0; i < events.size(); ++i) {
      CHECK(events[i].arrival == std::get<0>(oracle[i]));
      CHECK(meas_time(events[i].meas) == std::get<1>(oracle[i]));
      CHECK((meas_kind(events[i].meas) == MeasKind::AbsPos) == (std::get<2>(oracle[i]) == 1));
    }
  }

  SUBCASE("delays beyond the lag are droppable") {
    const auto events = merged_replay(log, {{"abs_pose:L", 4.0}, {"abs_pos:G", 1.0}}, 3.0);
    for (const auto& e : events) CHECK(e.droppable == (stream_of(e.meas).name() == "abs_pose:L"));
  }
}

TEST_CASE("stream keys") {
  const auto k = StreamKey::parse("abs_pos:G");
  REQUIRE(k.has_value());
  CHECK(k->kind == MeasKind::AbsPos);
  CHECK(k->sensor == "G");
  CHECK(k->name() == "abs_pos:G");
  CHECK_FALSE(StreamKey::parse("nonsense:G").has_value());
}
