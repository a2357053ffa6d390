#include <vector>

#include "doctest.h"
#include "hfusion/imu.hpp"
#include "test_utils.hpp"

using namespace hfusion;
using namespace hfusion::testing;

namespace {

const Vec3 kGravity(0, 0, -9.81);

std::vector<ImuSample> random_samples(int n, double rate, double t0 = 0.0) {
  std::vector<ImuSample> out;
  Vec3 a = random_vec3(3.0), w = random_vec3(1.0);
  for (int k = 0; k < n; ++k) {
    a += random_vec3(0.2);
    w += random_vec3(0.05);
    out.push_back({t0 + k / rate, a, w});
  }
  return out;
}

PreintegratedImu preintegrate(const std::vector<ImuSample>& s, std::size_t begin, std::size_t end,
                              const ImuBias& bias = {}) {
  PreintegratedImu pim(NoiseSpec{}, bias);
  for (std::size_t k = begin; k < end; ++k) pim.integrate(s[k], s[k + 1].t - s[k].t);
  return pim;
}

NavState random_state() {
  NavState x;
  x.R = random_rot();
  x.p = random_vec3(10);
  x.v = random_vec3(3);
  x.bias = ImuBias{random_vec3(0.01), random_vec3(0.1)};
  return x;
}

}  // namespace

TEST_CASE("zero input leaves deltas at identity") {
  PreintegratedImu pim(NoiseSpec{}, ImuBias{});
  for (int k = 0; k < 100; ++k) pim.integrate(ImuSample{}, 0.0025 + 1e-4 * k);
  CHECK(rotation_distance(pim.delta_R(), Rot3::identity()) == 0.0);
  CHECK(pim.delta_v().norm() == 0.0);
  CHECK(pim.delta_p().norm() == 0.0);
}

TEST_CASE("integration step guard") {
  PreintegratedImu pim(NoiseSpec{}, ImuBias{});
  CHECK_THROWS_AS(pim.integrate(ImuSample{}, 0.0), ImuError);
  CHECK_THROWS_AS(pim.integrate(ImuSample{}, -0.01), ImuError);
  CHECK_THROWS_AS(pim.integrate(ImuSample{}, 0.1), ImuError);
}

TEST_CASE("constant signals") {
  SUBCASE("constant acceleration against a dense Euler oracle") {
    PreintegratedImu pim(NoiseSpec{}, ImuBias{});
    for (int k = 0; k < 400; ++k) pim.integrate(ImuSample{k / 400.0, Vec3(1, 0, 0), Vec3::Zero()}, 1.0 / 400);
    Vec3 v = Vec3::Zero(), p = Vec3::Zero();
    const double h = 1.0 / 4000;
    for (int k = 0; k < 4000; ++k) {
      p += v * h + 0.5 * Vec3(1, 0, 0) * h * h;
      v += Vec3(1, 0, 0) * h;
    }
    CHECK((pim.delta_v() - v).norm() < 1e-6);
    CHECK((pim.delta_p() - p).norm() < 1e-6);
    CHECK((pim.delta_v() - Vec3(1, 0, 0)).norm() < 1e-6);
    CHECK((pim.delta_p() - Vec3(0.5, 0, 0)).norm() < 1e-6);
    CHECK(pim.delta_t() == doctest::Approx(1.0));
  }
  SUBCASE("constant rate about z") {
    PreintegratedImu pim(NoiseSpec{}, ImuBias{});
    for (int k = 0; k < 400; ++k) pim.integrate(ImuSample{k / 400.0, Vec3::Zero(), Vec3(0, 0, 1)}, 1.0 / 400);
    CHECK(rotation_distance(pim.delta_R(), Rot3::rz(1.0)) < 1e-6);
  }
}

TEST_CASE("bias correction") {
  const auto samples = random_samples(201, 400.0);
  const ImuBias b0{random_vec3(0.01), random_vec3(0.05)};
  const PreintegratedImu pim = preintegrate(samples, 0, 200, b0);

  const CorrectedDelta same = bias_corrected_delta(pim, b0);
  CHECK(rotation_distance(same.dR, pim.delta_R()) < 1e-15);
  CHECK(same.dv == pim.delta_v());
  CHECK(same.dp == pim.delta_p());

  // First-order correction error shrinks quadratically with the perturbation.
  double prev_err = 0.0;
  for (double scale : {1e-2, 5e-3}) {
    ImuBias b1 = b0;
    b1.gyro += Vec3(1, -2, 0.5).normalized() * scale;
    b1.accel += Vec3(-1, 0.5, 2).normalized() * scale * 10;
    const CorrectedDelta c = bias_corrected_delta(pim, b1);
    const PreintegratedImu re = preintegrate(samples, 0, 200, b1);
    const double err = rotation_distance(c.dR, re.delta_R()) + (c.dv - re.delta_v()).norm() +
                       (c.dp - re.delta_p()).norm();
    const double first_order = rotation_distance(pim.delta_R(), re.delta_R()) +
                               (pim.delta_v() - re.delta_v()).norm() + (pim.delta_p() - re.delta_p()).norm();
    CHECK(err < 0.05 * first_order);
    if (prev_err > 0) CHECK(err < 0.35 * prev_err);
    prev_err = err;
  }

  // With zero measurements the accel-bias correction is exact: dv = -db T, dp = -db T^2 / 2.
  PreintegratedImu zero(NoiseSpec{}, ImuBias{});
  for (int k = 0; k < 400; ++k) zero.integrate(ImuSample{}, 1.0 / 400);
  const Vec3 dba(0.1, -0.2, 0.05);
  const CorrectedDelta c = bias_corrected_delta(zero, ImuBias{Vec3::Zero(), dba});
  CHECK((c.dv + dba).norm() < 1e-12);
  CHECK((c.dp + 0.5 * dba).norm() < 1e-12);
  const CorrectedDelta c2 = bias_corrected_delta(zero, ImuBias{Vec3::Zero(), 2 * dba});
  CHECK((c2.dv - 2 * c.dv).norm() < 1e-12);
}

TEST_CASE("imu residual is zero on exactly propagated states") {
  for (int trial = 0; trial < 20; ++trial) {
    const auto samples = random_samples(41, 400.0);
    NavState xi = random_state();
    xi.t = samples.front().t;
    const NavState xj = propagate(xi, samples, kGravity);
    const PreintegratedImu pim = preintegrate(samples, 0, 40, xi.bias);
    const ImuResidual res = imu_residual(pim, xi, xj, kGravity);
    CHECK(res.r.norm() < 1e-8);

    // position perturbation of state j shifts r_p by R_i^T delta
    NavState xj2 = xj;
    const Vec3 delta(0.01, -0.02, 0.03);
    xj2.p += delta;
    const ImuResidual res2 = imu_residual(pim, xi, xj2, kGravity);
    CHECK((res2.r.tail<3>() - res.r.tail<3>() - xi.R.matrix().transpose() * delta).norm() < 1e-9);

    NavState bad = xj;
    bad.t += 0.01;
    CHECK_THROWS_AS(imu_residual(pim, xi, bad, kGravity), ImuError);
  }
}

TEST_CASE("preintegration does not depend on the world state") {
  const auto samples = random_samples(81, 400.0);
  const PreintegratedImu pim = preintegrate(samples, 0, 80);
  for (int trial = 0; trial < 10; ++trial) {
    NavState xi = random_state();
    xi.bias = ImuBias{};
    xi.t = 0.0;
    const NavState xj = propagate(xi, samples, kGravity);
    CHECK(imu_residual(pim, xi, xj, kGravity).r.norm() < 1e-8);
  }
}

TEST_CASE("imu residual Jacobians match finite differences") {
  for (int trial = 0; trial < 50; ++trial) {
    const auto samples = random_samples(21, 400.0);
    const ImuBias lin{random_vec3(0.01), random_vec3(0.05)};
    const PreintegratedImu pim = preintegrate(samples, 0, 20, lin);
    const NavState xi = random_state();
    NavState xj = propagate(xi, samples, kGravity);
    xj.R = xj.R * so3_exp(random_vec3(0.05));
    xj.p += random_vec3(0.1);
    xj.v += random_vec3(0.1);

    const ImuResidual res = imu_residual(pim, xi.pose(), xi.v, xj.pose(), xj.v, xi.bias, kGravity);
    // d = [xi_i(6), v_i(3), xi_j(6), v_j(3), bias(6)]
    auto f = [&](const Eigen::VectorXd& d) -> Eigen::VectorXd {
      const Pose3 pi = retract(xi.pose(), Vec6(d.segment<6>(0)));
      const Vec3 vi = xi.v + d.segment<3>(6);
      const Pose3 pj = retract(xj.pose(), Vec6(d.segment<6>(9)));
      const Vec3 vj = xj.v + d.segment<3>(15);
      const ImuBias b = ImuBias::from_vector(xi.bias.vector() + d.segment<6>(18));
      return imu_residual(pim, pi, vi, pj, vj, b, kGravity).r;
    };
    const Eigen::MatrixXd num = numerical_jacobian(f, 24);
    CHECK(jacobian_error(res.J_pose_i, num.middleCols(0, 6)) < 1e-5);
    CHECK(jacobian_error(res.J_vel_i, num.middleCols(6, 3)) < 1e-5);
    CHECK(jacobian_error(res.J_pose_j, num.middleCols(9, 6)) < 1e-5);
    CHECK(jacobian_error(res.J_vel_j, num.middleCols(15, 3)) < 1e-5);
    CHECK(jacobian_error(res.J_bias_i, num.middleCols(18, 6)) < 1e-5);
  }
}

TEST_CASE("split preintegrations compose to the union") {
  for (int trial = 0; trial < 10; ++trial) {
    const auto samples = random_samples(101, 400.0);
    const std::size_t split = 1 + static_cast<std::size_t>(uniform(0, 98));
    const PreintegratedImu a = preintegrate(samples, 0, split);
    const PreintegratedImu b = preintegrate(samples, split, 100);
    const PreintegratedImu all = preintegrate(samples, 0, 100);
    const Rot3 dR = a.delta_R() * b.delta_R();
    const Vec3 dv = a.delta_v() + a.delta_R() * b.delta_v();
    const Vec3 dp = a.delta_p() + a.delta_v() * b.delta_t() + a.delta_R() * b.delta_p();
    CHECK(rotation_distance(dR, all.delta_R()) < 1e-9);
    CHECK((dv - all.delta_v()).norm() < 1e-9);
    CHECK((dp - all.delta_p()).norm() < 1e-9);
    CHECK(a.delta_t() + b.delta_t() == doctest::Approx(all.delta_t()).epsilon(1e-12));
  }
}

TEST_CASE("covariance stays SPD over long integrations") {
  const auto samples = random_samples(10001, 400.0);
  const PreintegratedImu pim = preintegrate(samples, 0, 10000);
  CHECK_FALSE(validate_spd(pim.cov()).has_value());
  CHECK(pim.num_samples() == 10000);
}

TEST_CASE("propagate") {
  NavState x;
  x.p = Vec3(1, 2, 3);
  const NavState same = propagate(x, {}, kGravity);
  CHECK(same.p == x.p);

  // Static equilibrium: specific force cancels gravity.
  std::vector<ImuSample> still;
  for (int k = 0; k < 400; ++k) still.push_back({k / 400.0, -kGravity, Vec3::Zero()});
  NavState s = x;
  for (std::size_t k = 0; k + 1 < still.size(); ++k) {
    const NavState next = propagate_step(s, still[k], 1.0 / 400, kGravity);
    CHECK((next.p - s.p).norm() < 1e-9);
    s = next;
  }
  CHECK(propagate(x, still, kGravity).t == doctest::Approx(still.back().t));

  std::vector<ImuSample> gap = {{0.0, -kGravity, Vec3::Zero()}, {0.2, -kGravity, Vec3::Zero()}};
  CHECK_THROWS_AS(propagate(x, gap, kGravity), ImuError);
}
