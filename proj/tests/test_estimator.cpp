#include <cmath>

#include "doctest.h"
#include "hfusion/estimator.hpp"
#include "hfusion/sim.hpp"

using namespace hfusion;

namespace {

constexpr double kDeg = 3.14159265358979323846 / 180.0;

ScenarioConfig scenario(bool noise_free, double duration = 20.0) {
  ScenarioConfig c;
  c.duration = duration;
  c.seed = 5;
  c.noise_free = noise_free;
  c.trajectory.kind = TrajectoryKind::Circle;
  c.trajectory.size = 8.0;
  c.trajectory.speed = 1.5;
  c.imu.initial_bias_sigma << 1e-3, 1e-3, 1e-3, 2e-2, 2e-2, 2e-2;
  c.gnss = GnssSimConfig{};
  c.pose = PoseSimConfig{};
  c.pose->drift.rw_sigma = make_vec6(2e-4, 5e-3);
  c.pose->drift.initial = Pose3(Rot3::from_rpy(0.0, 0.0, 0.3), Vec3(2.0, 1.0, 0.5));
  c.velocity = VelocitySimConfig{};
  return c;
}

EstimatorConfig config_for(const SimResult& sim) {
  EstimatorConfig c;
  c.initial_yaw = sim.initial_yaw;
  return c;
}

std::vector<ImuSample> static_imu(const Vec3& f, double duration, double rate = 400.0, double noise = 0.0) {
  SplitMix64 rng(99);
  std::vector<ImuSample> out;
  for (long i = 0; i * (1.0 / rate) <= duration + 1e-12; ++i) {
    ImuSample s;
    s.t = static_cast<double>(i) / rate;
    s.accel = f + noise * Vec3(rng.gaussian(), rng.gaussian(), rng.gaussian());
    s.gyro = noise * 0.1 * Vec3(rng.gaussian(), rng.gaussian(), rng.gaussian());
    out.push_back(s);
  }
  return out;
}

SensorSetup imu_only_setup() {
  SensorSetup s;
  s.extrinsics = {{kImuFrame, Pose3::identity()}, {"G", Pose3(Rot3::identity(), Vec3(0.1, 0.0, 0.3))},
                  {"L", Pose3::identity()}};
  s.noise.gravity = Vec3(0.0, 0.0, -9.81);
  return s;
}

double max_translation_gap(const Trajectory& a, const Trajectory& b) {
  double m = 0.0;
  for (const auto& s : a) {
    const long j = b.nearest(s.t, 1e-6);
    REQUIRE(j >= 0);
    m = std::max(m, (s.pose.translation() - b[j].pose.translation()).norm());
  }
  return m;
}

}  // namespace

TEST_CASE("level static start gives identity roll and pitch") {
  const auto imu = static_imu(Vec3(0.0, 0.0, 9.81), 0.6, 400.0, 0.02);
  const InitialEstimate e = initialize(imu, {}, EstimatorConfig{}, imu_only_setup());
  CHECK(std::abs(e.state.R.roll()) < 0.2 * kDeg);
  CHECK(std::abs(e.state.R.pitch()) < 0.2 * kDeg);
  CHECK(e.state.v.norm() == 0.0);
  CHECK(e.state.t == 0.0);
}

TEST_CASE("a 10 degree tilt about x is recovered as roll") {
  const Rot3 R = Rot3::from_rpy(10.0 * kDeg, 0.0, 0.0);
  const Vec3 f = R.inverse() * Vec3(0.0, 0.0, 9.81);
  const auto imu = static_imu(f, 0.6, 400.0, 0.02);
  const InitialEstimate e = initialize(imu, {}, EstimatorConfig{}, imu_only_setup());
  CHECK(std::abs(e.state.R.roll() - 10.0 * kDeg) < 0.2 * kDeg);
  CHECK(std::abs(e.state.R.pitch()) < 0.2 * kDeg);

  // pitch the other way round
  const Rot3 P = Rot3::from_rpy(0.0, -7.0 * kDeg, 0.0);
  const auto imu2 = static_imu(P.inverse() * Vec3(0.0, 0.0, 9.81), 0.6);
  CHECK(initialize(imu2, {}, EstimatorConfig{}, imu_only_setup()).state.R.pitch() ==
        doctest::Approx(-7.0 * kDeg).epsilon(1e-9));
}

TEST_CASE("initialization errors") {
  const SensorSetup setup = imu_only_setup();
  CHECK_THROWS_AS(initialize({}, {}, EstimatorConfig{}, setup), EstimatorError);
  CHECK_THROWS_AS(initialize(static_imu(Vec3(0, 0, 9.81), 0.3), {}, EstimatorConfig{}, setup), EstimatorError);
  CHECK_THROWS_AS(initialize(static_imu(Vec3(0, 0, 7.5), 0.6), {}, EstimatorConfig{}, setup), EstimatorError);
  CHECK_NOTHROW(initialize(static_imu(Vec3(0, 0, 8.0), 0.6), {}, EstimatorConfig{}, setup));

  // position-only world measurements need a heading source
  AbsolutePositionMeas g{0.1, kWorldFrame, "G", Vec3(1, 2, 3), Mat3::Identity()};
  CHECK_THROWS_AS(initialize(static_imu(Vec3(0, 0, 9.81), 0.6), {g}, EstimatorConfig{}, setup), EstimatorError);
  EstimatorConfig cfg;
  cfg.initial_yaw = 0.5;
  const InitialEstimate e = initialize(static_imu(Vec3(0, 0, 9.81), 0.6), {g}, cfg, setup);
  CHECK(e.state.R.yaw() == doctest::Approx(0.5).epsilon(1e-12));
  // the antenna offset is removed through the initial attitude
  const Vec3 p_imu = g.position - e.state.R * Vec3(0.1, 0.0, 0.3);
  CHECK((e.state.p - p_imu).norm() < 1e-12);
}

TEST_CASE("a world-frame pose fixes position and yaw; otherwise the priors are weak") {
  const SensorSetup setup = imu_only_setup();
  const Pose3 T_WI(Rot3::from_rpy(0.0, 0.0, 1.2), Vec3(4.0, -1.0, 2.0));
  AbsolutePoseMeas z{0.2, kWorldFrame, "L", T_WI, Mat6::Identity()};
  const InitialEstimate e = initialize(static_imu(Vec3(0, 0, 9.81), 0.6), {z}, EstimatorConfig{}, setup);
  CHECK(e.state.R.yaw() == doctest::Approx(1.2).epsilon(1e-12));
  CHECK((e.state.p - T_WI.translation()).norm() < 1e-12);

  EstimatorConfig cfg;
  const InitialEstimate free = initialize(static_imu(Vec3(0, 0, 9.81), 0.6), {}, cfg, setup);
  CHECK(free.pose_cov(2, 2) == doctest::Approx(cfg.unknown_yaw_sigma * cfg.unknown_yaw_sigma));
  CHECK(free.pose_cov(3, 3) == doctest::Approx(cfg.unknown_position_sigma * cfg.unknown_position_sigma));
  CHECK(free.pose_cov(0, 0) == doctest::Approx(cfg.priors.pose_sigma(0) * cfg.priors.pose_sigma(0)));
}

TEST_CASE("measurements older than the lag are dropped; unknown sensors throw") {
  const SimResult sim = generate(scenario(false, 12.0));
  const EstimatorConfig cfg = config_for(sim);
  OnlineEstimator est(cfg, SensorSetup::from_log(sim.log, cfg));
  const auto meas = sim.log.time_sorted();
  for (const auto& m : meas) {
    if (meas_time(m) > 8.0) break;
    if (const auto* s = std::get_if<ImuSample>(&m))
      est.tick_imu(*s);
    else
      CHECK(est.ingest(m).accepted);
  }
  REQUIRE(est.initialized());
  const Measurement& old = sim.log.streams.at(StreamKey{MeasKind::AbsPos, "G"}).at(10);  // t = 1 s
  const IngestResult r = est.ingest(old);
  CHECK_FALSE(r.accepted);
  CHECK(r.reason.find("stale") != std::string::npos);
  CHECK(est.dropped().size() == 1);

  AbsolutePositionMeas bad{7.9, kWorldFrame, "nope", Vec3::Zero(), Mat3::Identity()};
  CHECK_THROWS_AS(est.ingest(bad), EstimatorError);
  CHECK_THROWS_AS(est.ingest(sim.log.imu().front()), EstimatorError);
  CHECK_THROWS_AS(est.tick_imu(sim.log.imu().front()), EstimatorError);
}

TEST_CASE("a delayed measurement is attached at its true time") {
  const SimResult sim = generate(scenario(false, 12.0));
  const EstimatorConfig cfg = config_for(sim);
  const OnlineRun late = run_online(sim.log, cfg, {{"abs_pos:G", 0.5}});
  CHECK(late.dropped.empty());
  CHECK_THROWS_AS(run_online(sim.log, cfg, {{"imu:I", 0.1}}), EstimatorError);
  CHECK_THROWS_AS(run_online(sim.log, cfg, {{"abs_pos:G", -0.1}}), EstimatorError);
  CHECK_THROWS_AS(run_online(sim.log, cfg, {{"bogus", 0.1}}), EstimatorError);

  // the batch graph does not depend on the order measurements arrive in
  EstimatorConfig tight = cfg;
  tight.batch_solver.max_iterations = 30;
  BatchOptions in_order{BatchInit::Propagation, nullptr, false, {}};
  BatchOptions delayed{BatchInit::Propagation, nullptr, false, {{"abs_pos:G", 0.5}, {"abs_pose:L", 1.4}}};
  const BatchResult ra = batch_optimize(sim.log, tight, in_order);
  const BatchResult rb = batch_optimize(sim.log, tight, delayed);
  CHECK(ra.report.iterations == rb.report.iterations);
  CHECK(max_translation_gap(ra.trajectory, rb.trajectory) < 1e-9);
}

TEST_CASE("static robot: odometry stays at the origin") {
  ScenarioConfig c = scenario(true, 4.0);
  c.trajectory.hold = 10.0;
  const SimResult sim = generate(c);
  const OnlineRun run = run_online(sim.log, config_for(sim));
  REQUIRE(run.odom.size() > 1000);
  for (const auto& s : run.odom) {
    CHECK(s.pose.translation().norm() < 1e-6);
  }
}

TEST_CASE("noise-free: odometry and world differ by a constant offset") {
  const SimResult sim = generate(scenario(true, 15.0));
  const OnlineRun run = run_online(sim.log, config_for(sim));
  REQUIRE(run.world.size() == run.odom.size());
  const Pose3 T_WO0 = run.world[0].pose * run.odom[0].pose.inverse();
  double worst = 0.0, worst_gt = 0.0;
  for (std::size_t i = 0; i < run.world.size(); ++i) {
    const Pose3 T_WO = run.world[i].pose * run.odom[i].pose.inverse();
    worst = std::max(worst, se3_log_vector(T_WO0.inverse() * T_WO).norm());
    const NavState& gt = sim.gt.state_at(run.world[i].t);
    worst_gt = std::max(worst_gt, (gt.p - run.world[i].pose.translation()).norm());
  }
  CHECK(worst < 1e-6);
  CHECK(worst_gt < 1e-6);
}

TEST_CASE("odometry is continuous across a world-frame correction") {
  ScenarioConfig c = scenario(false, 30.0);
  c.pose.reset();
  c.velocity.reset();
  c.imu.noise.accel_noise_density = 0.05;
  c.imu.initial_bias_sigma << 2e-3, 2e-3, 2e-3, 0.1, 0.1, 0.1;
  c.outages.push_back({"abs_pos:G", 12.0, 24.0});
  const SimResult sim = generate(c);
  const OnlineRun run = run_online(sim.log, config_for(sim));
  double world_step = 0.0, odom_step = 0.0;
  for (std::size_t i = 1; i < run.world.size(); ++i) {
    world_step = std::max(world_step, (run.world[i].pose.translation() - run.world[i - 1].pose.translation()).norm());
    odom_step = std::max(odom_step, (run.odom[i].pose.translation() - run.odom[i - 1].pose.translation()).norm());
  }
  CHECK(world_step > 0.10);
  CHECK(odom_step < 0.10);
}

TEST_CASE("roll, pitch and body velocity of odometry follow the world solution") {
  const SimResult sim = generate(scenario(false, 10.0));
  const EstimatorConfig cfg = config_for(sim);
  OnlineEstimator est(cfg, SensorSetup::from_log(sim.log, cfg));
  std::size_t epochs = 0, checked = 0;
  for (const auto& m : sim.log.time_sorted()) {
    if (const auto* s = std::get_if<ImuSample>(&m)) {
      const auto out = est.tick_imu(*s);
      if (!out || est.epochs().size() == epochs) continue;
      epochs = est.epochs().size();
      const Rot3& Ro = out->odom.T_OI.rotation();
      const Rot3& Rw = out->world.R;
      CHECK(std::abs(Ro.roll() - Rw.roll()) < 1e-9);
      CHECK(std::abs(Ro.pitch() - Rw.pitch()) < 1e-9);
      CHECK((Ro.inverse() * out->odom.v_O - Rw.inverse() * out->world.v).norm() < 1e-9);
      ++checked;
    } else {
      est.ingest(m);
    }
  }
  CHECK(checked > 50);
}

TEST_CASE("the active window stays bounded") {
  const SimResult sim = generate(scenario(false, 16.0));
  const EstimatorConfig cfg = config_for(sim);
  const OnlineRun run = run_online(sim.log, cfg);
  const long expected = static_cast<long>(std::lround(cfg.graph.state_rate * cfg.lag)) + 1;
  std::size_t checked = 0;
  for (const auto& e : run.epochs) {
    CHECK_FALSE(e.skipped);
    if (e.t < cfg.lag + 2.0) continue;
    CHECK(std::abs(e.window_states - expected) <= 1);
    ++checked;
  }
  CHECK(checked > 50);
  CHECK(run.states.size() == static_cast<std::size_t>(std::floor(16.0 * cfg.graph.state_rate)));
}

TEST_CASE("pose stream outages: reinstatement with or without rollover") {
  auto run_with_gap = [](double gap_start, double gap_end) {
    ScenarioConfig c = scenario(false, 20.0);
    c.gnss.reset();
    c.outages.push_back({"abs_pose:L", gap_start, gap_end});
    const SimResult sim = generate(c);
    EstimatorConfig cfg = config_for(sim);
    cfg.graph.keyframe_dt = 5.0;
    OnlineEstimator est(cfg, SensorSetup::from_log(sim.log, cfg));
    for (const auto& m : sim.log.time_sorted()) {
      if (const auto* s = std::get_if<ImuSample>(&m))
        est.tick_imu(*s);
      else
        est.ingest(m);
    }
    return est.graph().ref_frames().at("M_lo");
  };

  // gap of 4 s > lag but < keyframe_dt, inside the first keyframe's span
  const auto short_gap = run_with_gap(0.8, 4.8);
  // rollovers at 5, 10, 15 s, as without any outage
  CHECK(short_gap.size() == 4);

  // gap of 6 s >= keyframe_dt: the return rolls over immediately
  const auto long_gap = run_with_gap(6.2, 12.2);
  REQUIRE(long_gap.size() >= 3);
  bool rolled_at_return = false;
  for (const auto& kf : long_gap)
    if (kf.created_at > 12.2 && kf.created_at < 12.4) rolled_at_return = true;
  CHECK(rolled_at_return);
  // the superseded keyframe was eliminated for good
  CHECK(long_gap[1].marginalized);
}

TEST_CASE("batch smoothing of a noise-free log reproduces ground truth") {
  const SimResult sim = generate(scenario(true, 15.0));
  EstimatorConfig cfg = config_for(sim);
  const BatchResult r = batch_optimize(sim.log, cfg);
  CHECK(r.report.final_cost < 1e-10);
  CHECK(r.num_states == static_cast<std::size_t>(std::floor(15.0 * cfg.graph.state_rate)));
  CHECK(r.graph.values().size() == 3 * r.num_states + r.num_dynamic);
  double worst = 0.0;
  for (const auto& s : r.trajectory) worst = std::max(worst, (sim.gt.state_at(s.t).p - s.pose.translation()).norm());
  CHECK(worst < 1e-6);
  CHECK(r.marginals.size() == (r.num_states + cfg.marginal_stride - 1) / cfg.marginal_stride);
  for (const auto& [t, c] : r.marginals) CHECK(c.diagonal().minCoeff() > 0.0);

  // identity initialization still converges to the same answer
  const BatchResult id = batch_optimize(sim.log, cfg, {BatchInit::Identity, nullptr, false});
  CHECK(id.report.iterations > r.report.iterations);
}

TEST_CASE("states are queried in any known frame from one solution") {
  const SimResult sim = generate(scenario(true, 8.0));
  const EstimatorConfig cfg = config_for(sim);
  OnlineEstimator est(cfg, SensorSetup::from_log(sim.log, cfg));
  for (const auto& m : sim.log.time_sorted()) {
    if (const auto* s = std::get_if<ImuSample>(&m))
      est.tick_imu(*s);
    else
      est.ingest(m);
  }
  est.optimize_epoch(true);
  const auto& g = est.graph();
  const long j = g.last_state() - 3;
  const double t = g.state_time(j);
  const Pose3 w = est.query_state_in_frame(kWorldFrame, t);
  CHECK(se3_log_vector(w.inverse() * g.nav_state(j).pose()).norm() < 1e-12);
  const Pose3 m = est.query_state_in_frame("M_lo", t);
  const Pose3 truth = sim.gt.alignment("M_lo", t).inverse() * sim.gt.state_at(t).pose();
  CHECK(se3_log_vector(truth.inverse() * m).norm() < 1e-6);
  // between states: propagated through the buffered IMU
  const double tm = t + 0.0125;
  CHECK((est.query_state_in_frame(kWorldFrame, tm).translation() - sim.gt.state_at(tm).p).norm() < 1e-6);
  CHECK_THROWS_AS(est.query_state_in_frame("unknown", t), EstimatorError);
  CHECK_THROWS_AS(est.query_state_in_frame(kWorldFrame, g.state_time(g.first_state()) - 1.0), EstimatorError);
}

TEST_CASE("estimator config round-trips through JSON") {
  EstimatorConfig c;
  c.lag = 2.5;
  c.graph.random_walk = false;
  c.graph.rw_sigma_per_frame["M_lo"] = make_vec6(1e-4, 1e-2);
  c.graph.kernels["G"] = RobustKernel::huber(2.0);
  c.graph.calibrate.insert("L");
  c.initial_yaw = 0.3;
  c.online_solver.max_iterations = 7;
  c.imu_noise = ImuNoiseDensities{2e-3, 3e-2, 1e-5, 1e-4};
  const EstimatorConfig r = estimator_config_from_json(estimator_config_to_json(c));
  CHECK(estimator_config_to_json(r) == estimator_config_to_json(c));
  CHECK(r.lag == 2.5);
  CHECK(r.graph.kernels.at("G").type == RobustKernel::Type::Huber);
  CHECK(r.online_solver.max_iterations == 7);

  CHECK_THROWS_AS(estimator_config_from_json(R"({"lagg": 3})"), EstimatorError);
  CHECK_THROWS_AS(estimator_config_from_json(R"({"lag": 0.01})"), EstimatorError);
  CHECK_THROWS_AS(estimator_config_from_json(R"({"rw_sigma": [1, 2]})"), EstimatorError);
  CHECK_THROWS_AS(estimator_config_from_json("{"), EstimatorError);
  CHECK(estimator_config_from_json("{}").lag == EstimatorConfig{}.lag);
}

TEST_CASE("drift traces round-trip through CSV") {
  std::vector<DriftRow> rows{{"M_lo", 1.5, Pose3(Rot3::from_rpy(0.1, 0.2, 0.3), Vec3(1, 2, 3))},
                             {"M_lo", 2.0, Pose3::identity()}};
  const auto path = std::filesystem::temp_directory_path() / "hfusion_drift_test.csv";
  write_drift_csv(path, rows);
  const auto back = read_drift_csv(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].frame == "M_lo");
  CHECK(back[0].t == 1.5);
  CHECK(se3_log_vector(back[0].T_WR.inverse() * rows[0].T_WR).norm() < 1e-9);
  std::filesystem::remove(path);
}
