#include "garlileo/factors.hpp"
#include "garlileo/simulator.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace garlileo;

namespace {

constexpr double kDt = 0.05;

EstimatorState still_state(double t0 = 0.0, std::size_t n = 10) {
  EstimatorState x;
  x.so3 = SplineSo3::identity(t0, kDt, n);
  x.vel = SplineR3::constant(t0, kDt, n, Vec3::Zero());
  x.grav = SplineR3::constant(t0, kDt, n, gravity_global());
  return x;
}

/// Rotation about z at 1 rad/s.
SplineSo3 yaw_ramp(std::size_t n = 10) {
  std::vector<Quat> q;
  for (std::size_t i = 0; i < n; ++i) q.emplace_back(Eigen::AngleAxisd(kDt * static_cast<double>(i), Vec3::UnitZ()));
  return SplineSo3(0.0, kDt, q);
}

ImuSample imu(double t, Vec3 gyro, Vec3 accel, Quat q = Quat::Identity()) { return {t, gyro, accel, q}; }

Kinematics truth_kinematics(const TruthState& x) {
  Kinematics k;
  k.R = x.R;
  k.omega = x.omega;
  k.v = x.v_body;
  k.vdot = x.vdot_body;
  k.g = x.R.transpose() * gravity_global();
  k.gdot = -x.omega.cross(k.g);
  return k;
}

/// The same physical state seen from a frame I' with x_I = R_align x_I'.
Kinematics to_aligned(const Kinematics& k, const Mat3& Ra) {
  Kinematics a;
  a.R = k.R * Ra;
  a.omega = Ra.transpose() * k.omega;
  a.v = Ra.transpose() * k.v;
  a.vdot = Ra.transpose() * k.vdot;
  a.g = Ra.transpose() * k.g;
  a.gdot = Ra.transpose() * k.gdot;
  return a;
}

}  // namespace

// --- r_gyro -----------------------------------------------------------------

TEST(GyroResidual, IdentitySplineZeroRate) {
  EXPECT_LE(r_gyro(still_state(), imu(0.2, Vec3::Zero(), Vec3::Zero()))->norm(), 1e-15);
}

TEST(GyroResidual, YawRamp) {
  EstimatorState x = still_state();
  x.so3 = yaw_ramp();
  EXPECT_LE(r_gyro(x, imu(0.17, Vec3(0, 0, 1), Vec3::Zero()))->norm(), 1e-12);
  EXPECT_LE((*r_gyro(x, imu(0.17, Vec3(0, 0, 0.9), Vec3::Zero())) - Vec3(0, 0, 0.1)).norm(), 1e-12);
}

TEST(GyroResidual, OutOfSupportSkippedAndCounted) {
  SkipCounter c;
  EXPECT_FALSE(r_gyro(still_state(), imu(5.0, Vec3::Zero(), Vec3::Zero()), &c).has_value());
  EXPECT_FALSE(r_accel(still_state(), imu(-1.0, Vec3::Zero(), Vec3::Zero()), &c).has_value());
  EXPECT_EQ(c.skipped, 2u);
}

// --- r_accel ----------------------------------------------------------------

TEST(AccelResidual, StationaryIsMinusGravity) {
  EXPECT_LE(r_accel(still_state(), imu(0.2, Vec3::Zero(), Vec3(0, 0, -9.81)))->norm(), 1e-15);
}

TEST(AccelResidual, CentripetalTerm) {
  Kinematics k;
  k.v = Vec3(1, 0, 0);
  k.omega = Vec3(0, 0, 1);
  const Vec3 r = accel_residual(k, Mat3::Identity(), Vec3::Zero(), gravity_global(),
                                imu(0, Vec3::Zero(), Vec3(0, 1, -9.81)));
  EXPECT_LE(r.norm(), 1e-15);
}

TEST(AccelResidual, BiasEntersAdditively) {
  EstimatorState x = still_state();
  x.b_a = Vec3(0.1, -0.2, 0.3);
  EXPECT_LE((*r_accel(x, imu(0.2, Vec3::Zero(), Vec3(0, 0, -9.81))) - x.b_a).norm(), 1e-15);
}

// --- r_leg --------------------------------------------------------------------

TEST(LegResidual, Examples) {
  Extrinsics ext;
  Kinematics k;
  k.v = Vec3(0.3, -0.1, 0.05);
  LegVelocityMeasurement m;
  m.v = k.v;
  m.valid = true;
  EXPECT_LE(leg_residual(k, Mat3::Identity(), Vec2::Zero(), ext, m).norm(), 1e-15);

  m.v.x() -= 0.05;
  EXPECT_LE(leg_residual(k, Mat3::Identity(), Vec2(0.05, 0.0), ext, m).norm(), 1e-15);
}

TEST(LegResidual, LeverArmMatchesCrossProduct) {
  Kinematics k;
  k.omega = Vec3(0, 0, 1);
  LegVelocityMeasurement m;
  m.valid = true;
  Extrinsics ext;
  // A lever arm parallel to the rotation axis contributes nothing.
  ext.t_ib = Vec3(0, 0, -0.1);
  EXPECT_LE(leg_residual(k, Mat3::Identity(), Vec2::Zero(), ext, m).norm(), 1e-15);
  ext.t_ib = Vec3(0.1, 0, 0);
  EXPECT_LE((leg_residual(k, Mat3::Identity(), Vec2::Zero(), ext, m) - Vec3(0, 0.1, 0)).norm(), 1e-15);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 20; ++i) {
    k.omega = garlileo::testing::random_vec(rng);
    ext.t_ib = garlileo::testing::random_vec(rng);
    const Vec3 w = k.omega, t = ext.t_ib;
    const Vec3 cross(w.y() * t.z() - w.z() * t.y(), w.z() * t.x() - w.x() * t.z(), w.x() * t.y() - w.y() * t.x());
    EXPECT_LE((leg_residual(k, Mat3::Identity(), Vec2::Zero(), ext, m) - cross).norm(), 1e-14);
  }
}

TEST(LegResidual, BiasObservabilitySplit) {
  std::mt19937_64 rng(2);
  Extrinsics ext;
  ext.R_ib = garlileo::testing::random_quat(rng).toRotationMatrix();
  ext.t_ib = garlileo::testing::random_vec(rng);
  Kinematics k;
  k.v = garlileo::testing::random_vec(rng);
  k.omega = garlileo::testing::random_vec(rng);
  LegVelocityMeasurement m;
  m.v = garlileo::testing::random_vec(rng);
  m.valid = true;
  const Vec2 b(0.02, -0.01);
  const Vec3 r0 = leg_residual(k, Mat3::Identity(), b, ext, m);
  for (double c : {0.1, -0.37, 2.0}) {
    LegVelocityMeasurement m2 = m;
    m2.v.x() -= c;
    EXPECT_EQ(leg_residual(k, Mat3::Identity(), b + Vec2(c, 0), ext, m2).z(), r0.z());
    EXPECT_LE((leg_residual(k, Mat3::Identity(), b + Vec2(c, 0), ext, m2) - r0).norm(), 1e-14);
  }
}

TEST(LegResidual, InvalidMeasurementRejected) {
  LegVelocityMeasurement m;
  m.valid = false;
  EXPECT_THROW(leg_residual(Kinematics{}, Mat3::Identity(), Vec2::Zero(), Extrinsics{}, m), std::invalid_argument);
}

// --- r_radar ------------------------------------------------------------------

TEST(RadarResidual, AtRestIsMinusDoppler) {
  RadarScan scan;
  scan.stamp = 0.2;
  scan.points = {{Vec3(1, 0, 0), 0.3, {}}, {Vec3(0, 2, 1), -0.7, {}}};
  const auto e = r_radar(still_state(), scan, Extrinsics{});
  ASSERT_TRUE(e);
  EXPECT_EQ((*e)(0), -0.3);
  EXPECT_EQ((*e)(1), 0.7);
}

TEST(RadarResidual, DynamicPointAndCauchyInfluence) {
  Kinematics k;
  k.v = Vec3(1, 0, 0);
  RadarScan scan;
  scan.points = {{Vec3(2, 0, 0), -1.0, {}}, {Vec3(2, 0, 0), -1.0 + 1.0, {}}};
  const auto e = radar_residuals(k, Mat3::Identity(), Extrinsics{}, scan);
  EXPECT_LE(std::abs(e(0)), 1e-15);
  EXPECT_NEAR(std::abs(e(1)), 1.0, 1e-15);
  const double c = FactorWeights{}.cauchy_scale;
  EXPECT_NEAR(1.0 / (1.0 + e(1) * e(1) / (c * c)), c * c / (c * c + 1.0), 1e-15);
}

TEST(RadarResidual, EmptyScanSkipped) {
  RadarScan scan;
  scan.stamp = 0.2;
  EXPECT_FALSE(r_radar(still_state(), scan, Extrinsics{}).has_value());
}

// --- r_s2 ---------------------------------------------------------------------

TEST(S2Residual, Examples) {
  EXPECT_LE(r_s2(still_state(), 0.2)->norm(), 1e-15);

  EstimatorState x = still_state();
  for (std::size_t i = 0; i < x.grav.size(); ++i) x.grav[i] = gravity_global() + Vec3(0, 0, 0.1 * kDt * i);
  EXPECT_LE((*r_s2(x, 0.23) - Vec3(0, 0, 0.1)).norm(), 1e-12);
}

TEST(S2Residual, TransportEquationAlongTruth) {
  const GroundTruth gt(scenario_spec("stair_loop"));
  for (double t = 0.0; t < 120.0; t += 0.37) {
    const TruthState x = gt.state(t);
    // gdot from finite differences of R^T g, independent of the closed form.
    const double h = 1e-5;
    const Vec3 gp = gt.state(t + h).R.transpose() * gravity_global();
    const Vec3 gm = gt.state(t - h).R.transpose() * gravity_global();
    Kinematics k = truth_kinematics(x);
    k.gdot = (gp - gm) / (2 * h);
    EXPECT_LE(s2_residual(k).norm(), 1e-6);
  }
}

// --- r_gravity ------------------------------------------------------------------

TEST(GravityResidual, StationaryFixesSign) {
  std::vector<ImuSample> s;
  for (int k = 0; k <= 10; ++k) s.push_back(imu(0.01 * k, Vec3::Zero(), Vec3(0, 0, -9.81)));
  const auto p = preintegrate_gravity(s, 0, 10);
  EXPECT_NEAR(p.dt(), 0.1, 1e-15);
  const Vec3 g_i(0.1, 0.2, 9.0);
  const Vec3 r = gravity_residual(p, g_i, Vec3::Zero(), Vec3::Zero(), Vec3::Zero(), Mat3::Identity());
  EXPECT_LE((r - (g_i - Vec3(0, 0, 9.81))).norm(), 1e-12);
  EXPECT_LE(gravity_residual(p, gravity_global(), Vec3::Zero(), Vec3::Zero(), Vec3::Zero(), Mat3::Identity()).norm(),
            1e-12);
}

TEST(GravityResidual, BiasOffsetCancels) {
  std::mt19937_64 rng(4);
  std::vector<ImuSample> s;
  Quat q = Quat::Identity();
  for (int k = 0; k <= 10; ++k) {
    s.push_back(imu(0.01 * k, Vec3::Zero(), garlileo::testing::random_vec(rng), q));
    q = (q * Quat(so3_exp(0.05 * garlileo::testing::random_vec(rng)))).normalized();
  }
  const Vec3 delta(0.3, -0.1, 0.2);
  auto biased = s;
  for (auto& m : biased) m.accel += delta;
  const Vec3 g(0.1, 0.2, 9.7), vi(0.5, 0, 0), vj(0.6, 0.1, 0);
  const Vec3 r0 = gravity_residual(preintegrate_gravity(s, 0, 10), g, vi, vj, Vec3::Zero(), Mat3::Identity());
  const Vec3 r1 = gravity_residual(preintegrate_gravity(biased, 0, 10), g, vi, vj, delta, Mat3::Identity());
  EXPECT_LE((r1 - r0).norm(), 1e-12);
}

TEST(GravityResidual, PairSelection) {
  std::vector<ImuSample> s;
  for (int k = 0; k <= 100; ++k) s.push_back(imu(0.01 * k, Vec3::Zero(), Vec3::Zero()));
  const auto pairs = gravity_pairs(s, 0.1, 0.05, 0.2, 0.8);
  ASSERT_FALSE(pairs.empty());
  for (auto [i, j] : pairs) {
    EXPECT_EQ(j - i, 10u);
    EXPECT_GE(s[i].stamp, 0.2 - 1e-12);
    EXPECT_LE(s[j].stamp, 0.8 + 1e-12);
  }
  EXPECT_EQ(pairs.size(), 51u);
  EXPECT_TRUE(gravity_pairs(s, 0.1, 0.5, 0.0, 1.0).empty());  // gap below min_gap
  EXPECT_THROW(preintegrate_gravity(s, 3, 3), std::invalid_argument);
}

// --- r_bias_prior / r_end_tail / r_post ---------------------------------------

TEST(BiasPrior, Examples) {
  EstimatorState a = still_state(), b = still_state();
  EXPECT_EQ(r_bias_prior(a, b).norm(), 0.0);
  a.b_a = Vec3(0.01, 0, 0);
  Eigen::Matrix<double, 5, 1> expect;
  expect << 0.01, 0, 0, 0, 0;
  EXPECT_EQ(r_bias_prior(a, b), expect);
  a.b_v = Vec2(0.0, -0.02);
  expect(4) = -0.02;
  EXPECT_EQ(r_bias_prior(a, b), expect);
}

TEST(EndTail, ConstantIncrementTailsVanish) {
  EstimatorState x = still_state();
  x.so3 = yaw_ramp();
  for (std::size_t i = 0; i < x.vel.size(); ++i) x.vel[i] = Vec3(0.1 * i, -0.2 * i, 1.0);
  EXPECT_LE(r_end_tail(x).norm(), 1e-12);

  x.vel = SplineR3::constant(0.0, kDt, 10, Vec3(1, 2, 3));
  EXPECT_LE(r_end_tail(x).head<3>().norm(), 1e-15);

  const Vec3 d(0.01, -0.02, 0.03);
  x.vel[9] += d;
  EXPECT_LE((r_end_tail(x).head<3>() - d).norm(), 1e-15);

  EstimatorState tiny = still_state(0.0, 3);
  tiny.vel = SplineR3::constant(0.0, kDt, 3, Vec3::Zero());
  EXPECT_LE(r_end_tail(tiny).norm(), 1e-15);
}

TEST(EndTail, RotationPartMatchesLog) {
  std::mt19937_64 rng(6);
  EstimatorState x = still_state();
  std::vector<Quat> q;
  for (int i = 0; i < 10; ++i) q.push_back(garlileo::testing::random_quat(rng));
  x.so3 = SplineSo3(0.0, kDt, q);
  const Mat3 R0 = q[7].toRotationMatrix(), R1 = q[8].toRotationMatrix(), R2 = q[9].toRotationMatrix();
  const Vec3 expect = so3_log(R1.transpose() * R0 * R1.transpose() * R2);
  EXPECT_LE((r_end_tail(x).tail<3>() - expect).norm(), 1e-12);
}

TEST(PostResidual, Examples) {
  EXPECT_EQ(r_post(Mat3::Identity(), gravity_global(), gravity_global()).norm(), 0.0);
  std::mt19937_64 rng(7);
  for (int i = 0; i < 10; ++i) {
    const Mat3 R = garlileo::testing::random_quat(rng).toRotationMatrix();
    EXPECT_LE(r_post(R, R.transpose() * gravity_global(), gravity_global()).norm(), 1e-13);
  }
  const Mat3 roll = so3_exp(Vec3(M_PI / 180.0, 0, 0));
  const double mag = r_post(roll, gravity_global(), gravity_global()).norm();
  EXPECT_NEAR(mag, 0.171, 5e-4);
  EXPECT_NEAR(mag, 2 * 9.81 * std::sin(M_PI / 360.0), 1e-12);
  EXPECT_THROW(r_post(Mat3::Identity(), Vec3::Zero(), gravity_global()), std::invalid_argument);
}

TEST(PostResidual, YawNullspace) {
  std::mt19937_64 rng(8);
  for (int i = 0; i < 10; ++i) {
    const Mat3 R = garlileo::testing::random_quat(rng).toRotationMatrix();
    const Vec3 g = 9.81 * garlileo::testing::random_vec(rng).normalized();
    const Vec3 r0 = r_post(R, g, gravity_global());
    const Mat3 yaw = so3_exp(Vec3(0, 0, 1.234 * (i + 1)));
    EXPECT_LE((r_post(yaw * R, g, gravity_global()) - yaw * r0).norm(), 1e-12);
    EXPECT_NEAR(r_post(yaw * R, g, gravity_global()).norm(), r0.norm(), 1e-12);
  }
}

TEST(Factors, WeightsValidate) {
  FactorWeights w;
  EXPECT_NO_THROW(w.validate());
  w.w_leg = -1;
  EXPECT_THROW(w.validate(), std::invalid_argument);
  w = FactorWeights{};
  w.cauchy_scale = 0;
  EXPECT_THROW(w.validate(), std::invalid_argument);
}

// --- frame handling -----------------------------------------------------------

TEST(Factors, ResidualsInvariantToAlignmentFrame) {
  const GroundTruth gt(scenario_spec("stair_loop"));
  const auto& ext = gt.spec().ext;
  std::mt19937_64 rng(9);
  for (double t : {10.0, 40.0, 77.7}) {
    const TruthState x = gt.state(t);
    const Kinematics k = truth_kinematics(x);
    const Mat3 Ra = garlileo::testing::random_quat(rng).toRotationMatrix();
    const Kinematics a = to_aligned(k, Ra);
    const ImuSample s = imu(t, garlileo::testing::random_vec(rng), garlileo::testing::random_vec(rng));
    const Vec3 ba(0.1, 0.2, 0.3);
    EXPECT_LE((gyro_residual(a, Ra, s) - gyro_residual(k, Mat3::Identity(), s)).norm(), 1e-12);
    EXPECT_LE((accel_residual(a, Ra, ba, gravity_global(), s) - accel_residual(k, Mat3::Identity(), ba, gravity_global(), s))
                  .norm(),
              1e-12);
    LegVelocityMeasurement m;
    m.valid = true;
    m.v = garlileo::testing::random_vec(rng);
    EXPECT_LE((leg_residual(a, Ra, Vec2(0.1, 0), ext, m) - leg_residual(k, Mat3::Identity(), Vec2(0.1, 0), ext, m))
                  .norm(),
              1e-12);
    RadarScan scan;
    scan.points = {{Vec3(3, 1, 0.5), 0.2, {}}, {Vec3(4, -2, 0), -0.4, {}}};
    EXPECT_LE((radar_residuals(a, Ra, ext, scan) - radar_residuals(k, Mat3::Identity(), ext, scan)).norm(), 1e-12);
    EXPECT_LE(s2_residual(a).norm(), 1e-12);
  }
}

// --- zero-residual consistency on a clean simulated stream --------------------

namespace {

const Dataset& stair_clean() {
  static const Dataset d = make_scenario("stair_loop", NoiseConfig::zero());
  return d;
}

}  // namespace

TEST(Closure, ImuResidualsVanishAlongTruth) {
  const auto& d = stair_clean();
  const GroundTruth gt(scenario_spec("stair_loop"));
  double wg = 0, wa = 0, ws = 0;
  for (const auto& s : d.imu) {
    const Kinematics k = truth_kinematics(gt.state(s.stamp));
    wg = std::max(wg, gyro_residual(k, Mat3::Identity(), s).norm());
    wa = std::max(wa, accel_residual(k, Mat3::Identity(), Vec3::Zero(), gravity_global(), s).norm());
    ws = std::max(ws, s2_residual(k).norm());
    // The AHRS orientation is the true one.
    EXPECT_LE(rotation_angle(s.orient.toRotationMatrix().transpose() * k.R), 1e-12);
  }
  EXPECT_LE(wg, 1e-6);
  EXPECT_LE(wa, 1e-6);
  EXPECT_LE(ws, 1e-6);
}

TEST(Closure, LegResidualVanishesAlongTruth) {
  const auto& d = stair_clean();
  const GroundTruth gt(scenario_spec("stair_loop"));
  const auto& ext = d.meta.ext;
  double worst = 0;
  for (const auto& s : d.leg) {
    const TruthState x = gt.state(s.stamp);
    const auto m = leg_velocity_from_rates(d.meta.leg_model, s, ext.R_ib.transpose() * x.omega);
    ASSERT_TRUE(m.valid);
    worst = std::max(worst, leg_residual(truth_kinematics(x), Mat3::Identity(), Vec2::Zero(), ext, m).norm());
  }
  EXPECT_LE(worst, 1e-6);
}

TEST(Closure, RadarResidualVanishesAlongTruth) {
  const auto& d = stair_clean();
  const GroundTruth gt(scenario_spec("stair_loop"));
  double worst = 0;
  std::size_t n = 0;
  for (const auto& scan : d.radar) {
    if (scan.points.empty()) continue;
    const auto e = radar_residuals(truth_kinematics(gt.state(scan.stamp)), Mat3::Identity(), d.meta.ext, scan);
    worst = std::max(worst, e.cwiseAbs().maxCoeff());
    n += scan.points.size();
  }
  EXPECT_LE(worst, 1e-9);
  EXPECT_GT(n, 10000u);
}

TEST(Closure, GravityResidualWithinQuadratureError) {
  const auto& d = stair_clean();
  const GroundTruth gt(scenario_spec("stair_loop"));
  const double dt_imu = 1.0 / d.meta.imu_rate;
  double worst = 0;
  const auto pairs = gravity_pairs(d.imu, 0.1, 0.05, 0.0, d.meta.duration);
  ASSERT_GT(pairs.size(), 10000u);
  for (auto [i, j] : pairs) {
    const auto p = preintegrate_gravity(d.imu, i, j);
    const TruthState xi = gt.state(p.t_i), xj = gt.state(p.t_j);
    const Vec3 r = gravity_residual(p, xi.R.transpose() * gravity_global(), xi.v_body, xj.v_body, Vec3::Zero(),
                                    Mat3::Identity());
    worst = std::max(worst, r.norm());
  }
  EXPECT_LE(worst, 1e-3 * dt_imu);
}
