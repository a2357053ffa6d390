#include <limits>

#include "doctest.h"
#include "hfusion/holistic.hpp"
#include "hfusion/sim.hpp"
#include "hfusion/solver.hpp"

using namespace hfusion;

namespace {

ScenarioConfig scenario(bool noise_free, double duration = 25.0) {
  ScenarioConfig c;
  c.duration = duration;
  c.seed = 3;
  c.noise_free = noise_free;
  c.trajectory.kind = TrajectoryKind::Circle;
  c.trajectory.size = 8.0;
  c.trajectory.speed = 1.5;
  c.imu.initial_bias_sigma << 1e-3, 1e-3, 1e-3, 2e-2, 2e-2, 2e-2;
  c.gnss = GnssSimConfig{};
  c.pose = PoseSimConfig{};
  c.pose->drift.rw_sigma = make_vec6(2e-4, 5e-3);
  c.pose->drift.initial = Pose3(Rot3::from_rpy(0.0, 0.0, 0.3), Vec3(2.0, 1.0, 0.5));
  c.landmarks = LandmarkSimConfig{};
  c.velocity = VelocitySimConfig{};
  return c;
}

GraphConfig graph_config(const SimResult& sim) {
  GraphConfig g;
  g.noise = NoiseSpec::from_log(sim.log);
  return g;
}

std::vector<Measurement> non_imu(const MeasurementLog& log) {
  std::vector<Measurement> out;
  for (const auto& m : log.time_sorted())
    if (meas_kind(m) != MeasKind::Imu) out.push_back(m);
  return out;
}

// IMU first, then every other measurement with t in [from, to] in time order.
void feed_imu(HolisticGraph& g, const SimResult& sim) {
  for (const auto& s : sim.log.imu()) g.add_imu(s);
}

void feed(HolisticGraph& g, const SimResult& sim, double from = -1.0,
          double to = std::numeric_limits<double>::infinity()) {
  for (const auto& m : non_imu(sim.log)) {
    const double t = meas_time(m);
    if (t < from || t > to) continue;
    const AddResult r = g.add_measurement(m);
    REQUIRE_MESSAGE(r.status == AddStatus::Added, r.reason);
  }
}

HolisticGraph full_graph(const SimResult& sim, GraphConfig cfg) {
  HolisticGraph g(std::move(cfg), sim.log.extrinsics);
  g.initialize(sim.gt.states.front());
  feed_imu(g, sim);
  feed(g, sim);
  return g;
}

double max_whitened(const HolisticGraph& g) {
  double m = 0.0;
  for (const auto& f : g.factors()) m = std::max(m, f->whitened_residual(g.values()).lpNorm<Eigen::Infinity>());
  return m;
}

const Measurement& find_meas(const std::vector<Measurement>& ms, MeasKind kind, double t) {
  for (const auto& m : ms)
    if (meas_kind(m) == kind && std::abs(meas_time(m) - t) < 1e-9) return m;
  throw std::runtime_error("no such measurement");
}

}  // namespace

TEST_CASE("states are created on the rate grid as IMU data arrives") {
  const SimResult sim = generate(scenario(true, 3.0));
  HolisticGraph g(graph_config(sim), sim.log.extrinsics);
  const auto imu = sim.log.imu();
  // samples buffered before initialization are kept
  for (std::size_t k = 0; k <= 40; ++k) CHECK(g.add_imu(imu[k]).empty());
  CHECK(g.num_states() == 0);
  CHECK(g.add_measurement(sim.log.time_sorted()[1]).status == AddStatus::Pending);
  g.initialize(sim.gt.states.front());
  CHECK(g.num_states() == 5);  // t = 0, 0.025, ..., 0.1 covered by samples up to 0.1
  long created = 0;
  for (std::size_t k = 41; k < imu.size(); ++k) {
    const auto news = g.add_imu(imu[k]);
    for (long j : news) CHECK(std::abs(g.state_time(j) - imu[k].t) < 1e-9);
    created += static_cast<long>(news.size());
  }
  CHECK(g.num_states() == 120);  // 3 s at 40 Hz
  CHECK(created == 115);
  CHECK(g.values().size() == 3u * 120u);
  CHECK(g.state_index(1.0) == 40);
  CHECK(g.state_index(1.012) == 40);
  CHECK(g.state_index(1.013) == 41);
  CHECK_THROWS_AS(g.add_imu(imu.back()), GraphError);
  CHECK_THROWS_AS(g.add_measurement(imu[3]), GraphError);
  CHECK_THROWS_AS(g.initialize(sim.gt.states.front()), GraphError);

  AbsolutePositionMeas future{5.0, kWorldFrame, "G", Vec3::Zero(), Mat3::Identity()};
  CHECK(g.add_measurement(future).status == AddStatus::Pending);
  AbsolutePositionMeas unknown{1.0, kWorldFrame, "Q", Vec3::Zero(), Mat3::Identity()};
  CHECK(g.add_measurement(unknown).status == AddStatus::Rejected);

  // factor count: 3 priors plus an IMU and a bias factor per edge
  CHECK(g.factors().size() == 3u + 2u * 119u);
}

TEST_CASE("noise-free graph starts at the truth with zero residuals") {
  const SimResult sim = generate(scenario(true));
  HolisticGraph g = full_graph(sim, graph_config(sim));
  CHECK(g.num_states() == 1000);
  CHECK(max_whitened(g) < 1e-6);
  for (long j = 0; j < g.num_states(); ++j) {
    const NavState x = g.nav_state(j);
    const NavState& gt = sim.gt.state_at(x.t);
    CHECK((x.p - gt.p).norm() < 1e-7);
    CHECK((x.v - gt.v).norm() < 1e-7);
    CHECK(rotation_distance(x.R, gt.R) < 1e-9);
  }
  for (const auto& [id, l] : g.landmarks()) CHECK((g.values().vec3(l.key()) - sim.gt.landmarks.at(id)).norm() < 1e-7);
  CHECK(g.rollover_count("M_lo") == 2);
  for (double t : {0.0, 5.0, 12.0, 24.9}) {
    const Pose3 a = *g.alignment_at("M_lo", t);
    CHECK((a.translation() - sim.gt.alignment("M_lo", t).translation()).norm() < 1e-7);
    CHECK(rotation_distance(a.rotation(), sim.gt.alignment("M_lo", t).rotation()) < 1e-9);
  }
  CHECK(g.alignment_at(kWorldFrame, 3.0)->translation().norm() == 0.0);
  CHECK_FALSE(g.alignment_at("nowhere", 3.0).has_value());

  const OptimizeResult r = optimize(g.factors(), g.values(), {});
  CHECK(r.report.final_cost < 1e-10);
  CHECK(r.report.iterations <= 2);
}

TEST_CASE("keyframes roll over at the configured interval") {
  const SimResult sim = generate(scenario(true));
  GraphConfig cfg = graph_config(sim);
  HolisticGraph g = full_graph(sim, cfg);
  const auto& chain = g.ref_frames().at("M_lo");
  REQUIRE(chain.size() == 3u);
  const auto ms = non_imu(sim.log);
  for (std::size_t k = 0; k < chain.size(); ++k) {
    CHECK(chain[k].k == static_cast<long>(k));
    CHECK(chain[k].created_at == doctest::Approx(10.0 * k));
    // every keyframe, the first included, is anchored at its first measured position
    const auto& z = std::get<AbsolutePoseMeas>(find_meas(ms, MeasKind::AbsPose, 10.0 * k));
    CHECK((chain[k].t_RK - z.pose.translation()).norm() == 0.0);
  }
  int betweens = 0;
  for (const auto& f : g.factors()) {
    const auto* b = dynamic_cast<const BetweenFactor*>(f.get());
    if (!b) continue;
    ++betweens;
    const long k = b->keys()[1].index;
    CHECK(b->keys()[0] == align_key("M_lo", k - 1));
    CHECK((b->measured().translation() - (chain[k].t_RK - chain[k - 1].t_RK)).norm() < 1e-15);
    CHECK(rotation_distance(b->measured().rotation(), Rot3::identity()) == 0.0);
    // variance grows linearly with the time between keyframes
    const double dt = chain[k].created_at - chain[k - 1].created_at;
    Vec6 expect = cfg.rw_sigma * std::sqrt(dt);
    for (int i = 0; i < 6; ++i) CHECK(b->sqrt_information()(i, i) == doctest::Approx(1.0 / expect(i)));
  }
  CHECK(betweens == 2);
  CHECK(g.num_dynamic_variables() == 3u + g.landmarks().size());

  SUBCASE("origin anchoring keeps every keyframe at the frame origin") {
    cfg.origin_anchoring = true;
    HolisticGraph o = full_graph(sim, cfg);
    for (const auto& kf : o.ref_frames().at("M_lo")) CHECK(kf.t_RK.norm() == 0.0);
    CHECK(o.rollover_count("M_lo") == 2);
    CHECK(max_whitened(o) < 1e-6);
  }
  SUBCASE("without the random walk a frame has a single variable") {
    cfg.random_walk = false;
    HolisticGraph s = full_graph(sim, cfg);
    CHECK(s.ref_frames().at("M_lo").size() == 1u);
    CHECK(s.rollover_count("M_lo") == 0);
    CHECK(max_whitened(s) < 1e-6);
  }
  SUBCASE("a position-only measurement starts a frame with identity rotation") {
    HolisticGraph p(cfg, sim.log.extrinsics);
    p.initialize(sim.gt.states.front());
    feed_imu(p, sim);
    const NavState& x = sim.gt.state_at(1.0);
    const Vec3 p_WG = (x.pose() * sim.log.extrinsics.at("G")).translation();
    const AddResult r = p.add_measurement(AbsolutePositionMeas{1.0, "M_gps", "G", Vec3(1, 2, 3), Mat3::Identity()});
    REQUIRE(r.status == AddStatus::Added);
    REQUIRE(r.new_keys.size() == 1u);
    const Pose3 T = p.values().pose(align_key("M_gps", 0));
    CHECK(rotation_distance(T.rotation(), Rot3::identity()) == 0.0);
    CHECK((T.translation() - p_WG).norm() < 1e-12);  // keyframe sits at the first fix
    CHECK((p.alignment_at("M_gps", 1.0)->translation() - (p_WG - Vec3(1, 2, 3))).norm() < 1e-12);
    CHECK(r.factors.size() == 2u);  // measurement and keyframe prior
    CHECK(r.factors[0]->type() == "abs_pos");
  }
}

TEST_CASE("zero random walk holds the keyframes rigidly together") {
  const SimResult sim = generate(scenario(false));
  GraphConfig cfg = graph_config(sim);
  cfg.rw_sigma.setZero();
  HolisticGraph g = full_graph(sim, cfg);
  const OptimizeResult r = optimize(g.factors(), g.values(), {});
  CHECK(r.report.converged);
  const auto& chain = g.ref_frames().at("M_lo");
  for (std::size_t k = 1; k < chain.size(); ++k) {
    const Pose3 rel = r.values.pose(chain[k - 1].key()).inverse() * r.values.pose(chain[k].key());
    CHECK((rel.translation() - (chain[k].t_RK - chain[k - 1].t_RK)).norm() < 1e-5);
    CHECK(rotation_distance(rel.rotation(), Rot3::identity()) < 1e-6);
  }
}

TEST_CASE("delayed measurements attach to the keyframe in force at their time") {
  const SimResult sim = generate(scenario(true));
  const auto ms = non_imu(sim.log);
  const Measurement& late = find_meas(ms, MeasKind::AbsPose, 5.0);
  HolisticGraph g(graph_config(sim), sim.log.extrinsics);
  g.initialize(sim.gt.states.front());
  feed_imu(g, sim);
  for (const auto& m : ms)
    if (&m != &late) REQUIRE(g.add_measurement(m).status == AddStatus::Added);
  const AddResult r = g.add_measurement(late);
  REQUIRE(r.status == AddStatus::Added);
  CHECK(r.new_keys.empty());
  const auto& keys = r.factors[0]->keys();
  CHECK(std::find(keys.begin(), keys.end(), align_key("M_lo", 0)) != keys.end());
  CHECK(g.rollover_count("M_lo") == 2);
  CHECK(r.factors[0]->whitened_residual(g.values()).norm() < 1e-6);
}

TEST_CASE("deactivated variables come back through a belief prior") {
  const SimResult sim = generate(scenario(true));
  const auto ms = non_imu(sim.log);
  HolisticGraph g(graph_config(sim), sim.log.extrinsics);
  g.initialize(sim.gt.states.front());
  feed_imu(g, sim);
  feed(g, sim, -1.0, 15.0);
  const Key k1 = align_key("M_lo", 1), k0 = align_key("M_lo", 0);
  REQUIRE(g.values().contains(k1));
  const auto cov = marginal_covariances(g.factors(), g.values(), {k0, k1});
  const Pose3 mean = g.values().pose(k1);

  g.deactivate(k1, cov.at(k1));
  CHECK_FALSE(g.values().contains(k1));
  CHECK_FALSE(g.ref_frames().at("M_lo")[1].active);
  CHECK(g.ref_frames().at("M_lo")[1].belief.has_value());
  // the belief still answers alignment queries
  CHECK(g.alignment_at("M_lo", 12.0).has_value());

  g.deactivate(k0, cov.at(k0));
  CHECK(g.ref_frames().at("M_lo")[0].marginalized);

  const AddResult r = g.add_measurement(find_meas(ms, MeasKind::AbsPose, 15.1));
  REQUIRE(r.status == AddStatus::Added);
  CHECK(r.new_keys == std::vector<Key>{k1});
  REQUIRE(r.factors.size() == 2u);
  const auto* prior = dynamic_cast<const PriorFactor*>(r.factors[1].get());
  REQUIRE(prior);
  CHECK(prior->keys()[0] == k1);
  CHECK((std::get<Pose3>(prior->prior()).translation() - mean.translation()).norm() == 0.0);
  const Eigen::MatrixXd info = prior->sqrt_information().transpose() * prior->sqrt_information();
  CHECK((info.inverse() - cov.at(k1)).norm() < 1e-9 * cov.at(k1).norm());
  CHECK(g.ref_frames().at("M_lo")[1].active);

  // the superseded keyframe is gone for good
  const AddResult stale = g.add_measurement(find_meas(ms, MeasKind::AbsPose, 5.0));
  CHECK(stale.status == AddStatus::Stale);

  SUBCASE("landmarks") {
    const long id = g.landmarks().begin()->first;
    const Key lk = landmark_key(id);
    const auto lc = marginal_covariances(g.factors(), g.values(), {lk});
    g.deactivate(lk, lc.at(lk));
    CHECK_FALSE(g.values().contains(lk));
    CHECK_FALSE(g.landmarks().at(id).active);
    bool reobserved = false;
    for (const auto& m : ms) {
      const auto* z = std::get_if<LandmarkMeas>(&m);
      if (!z || z->landmark_id != id || z->t <= 15.0) continue;
      const AddResult lr = g.add_measurement(m);
      CHECK(lr.new_keys == std::vector<Key>{lk});
      CHECK(lr.factors.size() == 2u);
      reobserved = true;
      break;
    }
    if (reobserved) CHECK(g.values().contains(lk));
    CHECK_THROWS_AS(g.deactivate(nav_pose_key(3), Eigen::MatrixXd::Identity(6, 6)), GraphError);
  }
}

TEST_CASE("marginalizing old states keeps the optimum") {
  const SimResult sim = generate(scenario(false, 12.0));
  HolisticGraph g = full_graph(sim, graph_config(sim));
  const OptimizeResult full = optimize(g.factors(), g.values(), {});
  REQUIRE(full.report.converged);
  g.set_values(full.values);
  const auto gone = g.marginalize_states_before(5.0);
  CHECK(gone.size() == 200u);
  CHECK(g.first_state() == 200);
  CHECK(g.num_states() == 280);
  CHECK_FALSE(g.values().contains(nav_pose_key(199)));
  CHECK(g.values().contains(nav_pose_key(200)));
  const OptimizeResult again = optimize(g.factors(), g.values(), {});
  double moved = 0.0;
  for (long j = 200; j <= g.last_state(); ++j)
    moved = std::max(moved, (again.values.pose(nav_pose_key(j)).translation() -
                             full.values.pose(nav_pose_key(j)).translation())
                                .norm());
  CHECK(moved < 1e-6);
  // the eliminated part's constant cost is dropped, the reduced problem is already optimal
  CHECK(again.report.iterations <= 1);

  AbsolutePositionMeas old{2.0, kWorldFrame, "G", Vec3::Zero(), Mat3::Identity()};
  CHECK(g.add_measurement(old).status == AddStatus::Stale);

  g.trim_imu();
  CHECK(g.imu_buffer().front().t <= g.state_time(200) - 0.1 + 1e-9);
  CHECK(g.imu_buffer().front().t > g.state_time(200) - 0.11);
  // the marginalized states can still be extended past the end
  CHECK(g.marginalize_states_before(1e9).size() == static_cast<std::size_t>(g.last_state() - 200));
  CHECK(g.num_states() == 1);
}

TEST_CASE("calibration variables") {
  const SimResult sim = generate(scenario(true, 4.0));
  GraphConfig cfg = graph_config(sim);
  cfg.calibrate = {"G", "L"};
  HolisticGraph g = full_graph(sim, cfg);
  REQUIRE(g.calibrations().size() == 2u);
  CHECK_FALSE(g.calibrations().at("G").pose_kind);
  CHECK(g.calibrations().at("L").pose_kind);
  CHECK(g.values().contains(calib_pos_key("G")));
  CHECK(g.values().contains(calib_pose_key("L")));
  CHECK(max_whitened(g) < 1e-6);
  // a pose measurement from a position-calibrated sensor is inconsistent
  AbsolutePoseMeas bad{1.0, kWorldFrame, "G", Pose3::identity(), Mat6::Identity()};
  CHECK_THROWS_AS(g.add_measurement(bad), GraphError);
}
