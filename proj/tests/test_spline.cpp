#include "garlileo/spline.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <random>

using namespace garlileo;
using garlileo::testing::random_quat;
using garlileo::testing::random_rotation_walk;
using garlileo::testing::random_vec;
using garlileo::testing::brute_force_eval;
using garlileo::testing::cox_de_boor;
using garlileo::testing::rot_z;

namespace {

// Basis polynomials on one segment recovered by interpolating the recursion
// at three interior points, then summed cumulatively.
Mat3 blend_matrix_oracle() {
  const double t0 = 0.0, dt = 1.0;
  const int seg = 2;
  Mat3 vander;
  Mat3 values;  // row: basis index, col: sample
  const double us[3] = {0.1, 0.5, 0.9};
  for (int s = 0; s < 3; ++s) {
    vander.row(s) << 1.0, us[s], us[s] * us[s];
    for (int b = 0; b < 3; ++b) values(b, s) = cox_de_boor(seg + b, 2, seg + us[s], t0, dt);
  }
  Mat3 coeffs;  // row b: polynomial coefficients of basis b
  for (int b = 0; b < 3; ++b) {
    coeffs.row(b) = vander.colPivHouseholderQr().solve(values.row(b).transpose()).transpose();
  }
  Mat3 cumulative;
  cumulative.row(0) = coeffs.row(0) + coeffs.row(1) + coeffs.row(2);
  cumulative.row(1) = coeffs.row(1) + coeffs.row(2);
  cumulative.row(2) = coeffs.row(2);
  return cumulative;
}

double z_angle(const Mat3& r) { return std::atan2(r(1, 0), r(0, 0)); }

}  // namespace

TEST(BlendMatrix, MatchesBasisRecursion) {
  const Mat3 oracle = blend_matrix_oracle();
  const Mat3 m = cumulative_blend_matrix(3);
  EXPECT_LT((m - oracle).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_DOUBLE_EQ(m(1, 0), 0.5);
  EXPECT_DOUBLE_EQ(m(1, 1), 1.0);
  EXPECT_DOUBLE_EQ(m(1, 2), -0.5);
  EXPECT_DOUBLE_EQ(m(2, 2), 0.5);
}

TEST(BlendMatrix, EndpointValues) {
  const Mat3 m = cumulative_blend_matrix(3);
  const Vec3 at0 = m * Vec3(1.0, 0.0, 0.0);
  const Vec3 at1 = m * Vec3(1.0, 1.0, 1.0);
  EXPECT_TRUE(at0.isApprox(Vec3(1.0, 0.5, 0.0)));
  EXPECT_TRUE(at1.isApprox(Vec3(1.0, 1.0, 0.5)));
  EXPECT_TRUE(cumulative_basis(0.3).isApprox(m * Vec3(1.0, 0.3, 0.09)));
}

TEST(BlendMatrix, RejectsOtherOrders) {
  EXPECT_THROW(cumulative_blend_matrix(4), std::invalid_argument);
  EXPECT_THROW(cumulative_blend_matrix(2), std::invalid_argument);
}

TEST(SplineR3, ConstantSpline) {
  const Vec3 c(1.5, -2.0, 0.25);
  const auto s = SplineR3::constant(3.0, 0.2, 6, c);
  for (double t = 3.0; t <= s.grid().t_max(); t += 0.013) {
    EXPECT_LT((s.value(t) - c).norm(), 1e-15);
    EXPECT_LT(s.derivative(t).norm(), 1e-15);
  }
}

TEST(SplineR3, LinearRamp) {
  std::vector<Vec3> ctrl{Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(2, 0, 0), Vec3(3, 0, 0)};
  const SplineR3 s(0.0, 1.0, ctrl);
  // Segment midpoints.
  EXPECT_NEAR(s.value(0.5).x(), 1.0, 1e-12);
  EXPECT_NEAR(s.value(1.5).x(), 2.0, 1e-12);
  EXPECT_NEAR(s.value(1.5).x() - s.value(0.5).x(), 1.0, 1e-12);
  EXPECT_NEAR(s.value(1.25).x(), brute_force_eval(ctrl, 1.25, 0.0, 1.0).x(), 1e-12);
  EXPECT_NEAR(s.derivative(1.3).x(), 1.0, 1e-12);
}

TEST(SplineR3, SingleSegmentMidpoint) {
  const SplineR3 s(0.0, 1.0, {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(2, 0, 0)});
  EXPECT_NEAR(s.value(0.5).x(), 1.0, 1e-15);
}

TEST(SplineR3, OutOfRangeThrows) {
  const auto s = SplineR3::constant(1.0, 0.1, 5, Vec3::Ones());
  EXPECT_THROW(s.value(0.999), std::out_of_range);
  EXPECT_THROW(s.value(1.30001), std::out_of_range);
  EXPECT_NO_THROW(s.value(1.3));
  EXPECT_THROW(s.derivative(std::nan("")), std::out_of_range);
}

TEST(SplineR3, MatchesCoxDeBoorOnRandomQueries) {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const double t0 = 10.0 * (ud(rng) - 0.5);
    const double dt = 0.01 + ud(rng);
    std::vector<Vec3> ctrl(3 + trial % 8);
    for (auto& c : ctrl) c = random_vec(rng, 5.0);
    const SplineR3 s(t0, dt, ctrl);
    const double t = t0 + ud(rng) * (s.grid().t_max() - t0) * 0.999999;
    EXPECT_LT((s.value(t) - brute_force_eval(ctrl, t, t0, dt)).norm(), 1e-9);
  }
}

TEST(SplineR3, DerivativeMatchesFiniteDifference) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Vec3> ctrl(6);
    for (auto& c : ctrl) c = random_vec(rng, 3.0);
    const SplineR3 s(0.0, 0.1, ctrl);
    const double h = 1e-6;
    const double t = h + ud(rng) * (s.grid().t_max() - 2 * h);
    const Vec3 fd = (s.value(t + h) - s.value(t - h)) / (2 * h);
    EXPECT_LE((s.derivative(t) - fd).norm(), 1e-4 * fd.norm() + 1e-6);
  }
}

TEST(SplineR3, C1ContinuityAcrossKnots) {
  std::mt19937_64 rng(3);
  std::vector<Vec3> ctrl(8);
  for (auto& c : ctrl) c = random_vec(rng, 2.0);
  const double dt = 0.05;
  for (std::size_t seg = 0; seg + 3 < ctrl.size(); ++seg) {
    const Vec3 end_val = r3_segment_value(ctrl[seg], ctrl[seg + 1], ctrl[seg + 2], 1.0);
    const Vec3 start_val = r3_segment_value(ctrl[seg + 1], ctrl[seg + 2], ctrl[seg + 3], 0.0);
    const Vec3 end_der = r3_segment_derivative(ctrl[seg], ctrl[seg + 1], ctrl[seg + 2], 1.0, dt);
    const Vec3 start_der =
        r3_segment_derivative(ctrl[seg + 1], ctrl[seg + 2], ctrl[seg + 3], 0.0, dt);
    EXPECT_LE((end_val - start_val).norm(), 1e-9);
    EXPECT_LE((end_der - start_der).norm(), 1e-9);
  }
}

TEST(SplineR3, Locality) {
  std::mt19937_64 rng(11);
  std::vector<Vec3> ctrl(10);
  for (auto& c : ctrl) c = random_vec(rng);
  const SplineR3 base(0.0, 1.0, ctrl);
  const std::size_t m = 4;
  auto perturbed_ctrl = ctrl;
  perturbed_ctrl[m] += Vec3(1.0, -2.0, 0.5);
  const SplineR3 pert(0.0, 1.0, perturbed_ctrl);
  for (double t = 0.0; t <= base.grid().t_max(); t += 0.05) {
    const auto seg = base.grid().locate(t).segment;
    const bool supported = seg <= m && m <= seg + 2;
    const double diff = (base.value(t) - pert.value(t)).norm();
    if (!supported) EXPECT_EQ(diff, 0.0) << "t=" << t;
  }
  EXPECT_GT((base.value(3.5) - pert.value(3.5)).norm(), 0.1);
}

TEST(SplineR3, ExtendConstantAndRamp) {
  auto c = SplineR3::constant(0.0, 0.1, 4, Vec3(1, 2, 3));
  const std::size_t added = c.extend_to(0.55);
  EXPECT_EQ(added, 4u);
  EXPECT_GE(c.grid().t_max(), 0.55);
  for (const auto& p : c.ctrl()) EXPECT_EQ(p, Vec3(1, 2, 3));

  SplineR3 ramp(0.0, 1.0, {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(2, 0, 0), Vec3(3, 0, 0)});
  ramp.extend_to(4.0);
  ASSERT_EQ(ramp.size(), 6u);
  EXPECT_EQ(ramp[4], Vec3(4, 0, 0));
  EXPECT_EQ(ramp[5], Vec3(5, 0, 0));
  EXPECT_NEAR(ramp.value(3.5).x(), 4.0, 1e-12);
  EXPECT_EQ(ramp.extend_to(2.0), 0u);
}

TEST(SplineSo3, IdentitySpline) {
  const auto s = SplineSo3::identity(0.0, 0.1, 5);
  for (double t = 0.0; t <= s.grid().t_max(); t += 0.01) {
    EXPECT_LT((s.value(t) - Mat3::Identity()).norm(), 1e-15);
    EXPECT_LT(s.angular_velocity(t).norm(), 1e-15);
  }
}

TEST(SplineSo3, ZRampMatchesScalarBasis) {
  const double theta = 0.1;
  std::vector<Mat3> ctrl{rot_z(0), rot_z(theta), rot_z(2 * theta), rot_z(3 * theta)};
  const SplineSo3 s(0.0, 1.0, ctrl);
  const std::vector<Vec3> angles{Vec3(0, 0, 0), Vec3(theta, 0, 0), Vec3(2 * theta, 0, 0),
                                 Vec3(3 * theta, 0, 0)};
  for (double t = 0.0; t < 2.0; t += 0.0625) {
    const double expected = brute_force_eval(angles, t, 0.0, 1.0).x();
    const Mat3 r = s.value(t);
    EXPECT_NEAR(z_angle(r), expected, 1e-12);
    EXPECT_LE(orthonormality_error(r), 1e-9);
  }
}

TEST(SplineSo3, ZRampAngularVelocity) {
  const double theta = 0.1, dt = 0.1;
  std::vector<Mat3> ctrl;
  for (int i = 0; i < 6; ++i) ctrl.push_back(rot_z(i * theta));
  const SplineSo3 s(0.0, dt, ctrl);
  for (double t = 0.0; t <= s.grid().t_max(); t += 0.01) {
    const Vec3 w = s.angular_velocity(t);
    EXPECT_NEAR(w.z(), 1.0, 1e-12);
    EXPECT_NEAR(w.head<2>().norm(), 0.0, 1e-12);
  }
}

TEST(SplineSo3, AngularVelocityMatchesFiniteDifference) {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  for (int trial = 0; trial < 300; ++trial) {
    const SplineSo3 s(0.0, 0.1, random_rotation_walk(rng, 6, 0.3));
    const double h = 1e-5;
    const double t = h + ud(rng) * (s.grid().t_max() - 2 * h);
    // Central form of Log(R(t)^T R(t+h)) / h.
    const Vec3 fd = so3_log(s.value(t - h).transpose() * s.value(t + h)) / (2 * h);
    const Vec3 w = s.angular_velocity(t);
    EXPECT_LE((w - fd).norm(), 1e-3 * fd.norm() + 1e-6) << "t=" << t;
  }
}

TEST(SplineSo3, ClosureAndContinuity) {
  std::mt19937_64 rng(5);
  const auto ctrl = random_rotation_walk(rng, 12, 2.0);
  const double dt = 0.05;
  const SplineSo3 s(0.0, dt, ctrl);
  for (double t = 0.0; t <= s.grid().t_max(); t += 0.0007) {
    EXPECT_LE(orthonormality_error(s.value(t)), 1e-9);
  }
  for (std::size_t seg = 0; seg + 3 < ctrl.size(); ++seg) {
    const auto end = so3_segment_eval(ctrl[seg], ctrl[seg + 1], ctrl[seg + 2], 1.0, dt);
    const auto start = so3_segment_eval(ctrl[seg + 1], ctrl[seg + 2], ctrl[seg + 3], 0.0, dt);
    EXPECT_LE((end.q.toRotationMatrix() - start.q.toRotationMatrix()).norm(), 1e-9);
    EXPECT_LE((end.omega - start.omega).norm(), 1e-9);
  }
}

TEST(SplineSo3, ExtendContinuesIncrement) {
  const double theta = 0.1;
  std::vector<Mat3> ctrl{rot_z(0), rot_z(theta), rot_z(2 * theta)};
  SplineSo3 s(0.0, 0.1, ctrl);
  s.extend_to(0.35);
  ASSERT_EQ(s.size(), 6u);
  for (std::size_t i = 1; i < s.size(); ++i) {
    const Vec3 inc = quat_log(s[i - 1].conjugate() * s[i]);
    EXPECT_LT((inc - Vec3(0, 0, theta)).norm(), 1e-12);
  }
  auto id = SplineSo3::identity(0.0, 0.1, 3);
  id.extend_to(1.0);
  for (const auto& q : id.ctrl()) EXPECT_LT(quat_log(q).norm(), 1e-15);
}

TEST(SplineSo3, RejectsNonRotations) {
  std::vector<Mat3> bad{Mat3::Identity(), 1.01 * Mat3::Identity(), Mat3::Identity()};
  EXPECT_THROW(SplineSo3(0.0, 0.1, bad), std::invalid_argument);
  std::vector<Mat3> reflect{Mat3::Identity(), Mat3::Identity(), -Mat3::Identity()};
  EXPECT_THROW(SplineSo3(0.0, 0.1, reflect), std::invalid_argument);
}

TEST(Lie, ExpLogRoundTrip) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 500; ++i) {
    const Vec3 phi = random_vec(rng, 1.0) * (i % 5 == 0 ? 1e-8 : 1.7);
    EXPECT_LT((so3_log(so3_exp(phi)) - phi).norm(), 1e-12);
    EXPECT_LT((quat_log(quat_exp(phi)) - phi).norm(), 1e-12);
    EXPECT_LT((so3_exp(phi) - quat_exp(phi).toRotationMatrix()).norm(), 1e-12);
  }
  const Vec3 near_pi = (M_PI - 1e-9) * Vec3(1, 2, 3).normalized();
  EXPECT_NEAR(so3_log(so3_exp(near_pi)).norm(), M_PI - 1e-9, 1e-7);
}

TEST(Lie, MinRotationBetween) {
  const Vec3 a(0, 0, 1), b = Vec3(1, 1, 0.2).normalized();
  const Mat3 r = min_rotation_between(a, b);
  EXPECT_LT((r * a - b).norm(), 1e-12);
  EXPECT_LT(std::abs(so3_log(r).dot(a)), 1e-12);
  const Mat3 flip = min_rotation_between(a, -a);
  EXPECT_LT((flip * a + a).norm(), 1e-12);
}
