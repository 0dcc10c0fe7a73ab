#pragma once

// Residuals of the estimator. The estimator state lives in a gravity-aligned
// body frame I' related to the IMU frame by x_I = R_align x_I'. Residuals
// are formed in sensor frames so that alignment does not change them.

#include "garlileo/leg.hpp"
#include "garlileo/radar.hpp"
#include "garlileo/spline.hpp"
#include "garlileo/types.hpp"

#include <Eigen/Dense>

#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

namespace garlileo {

struct FactorWeights {
  double w_omega = 100.0;
  double w_a = 10.0;
  double w_leg = 20.0;
  double w_radar = 20.0;
  double w_grav = 5.0;
  double w_s2 = 10.0;
  double w_bias = 100.0;     // b_v per-frame change
  double w_bias_a = 1.0e4;  // b_a per-frame change
  double w_prior = 1.0;
  double w_end = 1.0;
  double cauchy_scale = 0.1;  // m/s

  void validate() const {
    for (double w : {w_omega, w_a, w_leg, w_radar, w_grav, w_s2, w_bias, w_bias_a, w_prior, w_end})
      if (!(w >= 0.0)) throw std::invalid_argument("FactorWeights: weights must be nonnegative");
    if (!(cauchy_scale > 0.0)) throw std::invalid_argument("FactorWeights: cauchy_scale must be positive");
  }
};

/// Kinematic quantities at one instant, in the estimator body frame.
struct Kinematics {
  Mat3 R = Mat3::Identity();  // body to global
  Vec3 omega = Vec3::Zero();
  Vec3 v = Vec3::Zero();
  Vec3 vdot = Vec3::Zero();
  Vec3 g = Vec3::Zero();  // local gravity
  Vec3 gdot = Vec3::Zero();
};

struct EstimatorState {
  SplineSo3 so3;
  SplineR3 vel;
  SplineR3 grav;
  Vec2 b_v = Vec2::Zero();
  Vec3 b_a = Vec3::Zero();
  Vec3 g_global = gravity_global();
  Mat3 R_align = Mat3::Identity();

  bool covers(double t) const {
    return so3.grid().contains(t) && vel.grid().contains(t) && grav.grid().contains(t);
  }

  Kinematics at(double t) const {
    Kinematics k;
    const auto rot = so3.evaluate(t);
    k.R = rot.q.toRotationMatrix();
    k.omega = rot.omega;
    k.v = vel.value(t);
    k.vdot = vel.derivative(t);
    k.g = grav.value(t);
    k.gdot = grav.derivative(t);
    return k;
  }
};

// --- measurement residuals on kinematics ----------------------------------

inline Vec3 gyro_residual(const Kinematics& k, const Mat3& R_align, const ImuSample& s) {
  return R_align * k.omega - s.gyro;
}

inline Vec3 accel_residual(const Kinematics& k, const Mat3& R_align, const Vec3& b_a, const Vec3& g_global,
                           const ImuSample& s) {
  return R_align * (k.omega.cross(k.v) + k.vdot - k.R.transpose() * g_global) + b_a - s.accel;
}

inline Vec3 leg_residual(const Kinematics& k, const Mat3& R_align, const Vec2& b_v, const Extrinsics& ext,
                         const LegVelocityMeasurement& m) {
  if (!m.valid) throw std::invalid_argument("leg_residual: invalid measurement");
  const Vec3 v_base = ext.R_ib.transpose() * (R_align * k.v + (R_align * k.omega).cross(ext.t_ib));
  return v_base - m.v - Vec3(b_v.x(), b_v.y(), 0.0);
}

/// Per-point Doppler residuals; robust weighting is applied by the solver.
inline Eigen::VectorXd radar_residuals(const Kinematics& k, const Mat3& R_align, const Extrinsics& ext,
                                       const RadarScan& scan) {
  const Vec3 v_radar = ext.R_ir.transpose() * (R_align * k.v + (R_align * k.omega).cross(ext.t_ir));
  Eigen::VectorXd e(static_cast<Eigen::Index>(scan.points.size()));
  for (std::size_t j = 0; j < scan.points.size(); ++j)
    e(static_cast<Eigen::Index>(j)) = doppler_predict(scan.points[j].p, v_radar) - scan.points[j].doppler;
  return e;
}

inline Vec3 s2_residual(const Kinematics& k) { return k.gdot + k.omega.cross(k.g); }

inline Vec3 post_residual(const Mat3& R_k, const Vec3& g_k, const Vec3& g_global) {
  if (!(g_k.norm() > 0.0)) throw std::invalid_argument("post_residual: zero gravity vector");
  return R_k * g_k - g_global;
}

inline Eigen::Matrix<double, 5, 1> bias_prior_residual(const Vec3& b_a_now, const Vec2& b_v_now,
                                                       const Vec3& b_a_prev, const Vec2& b_v_prev) {
  Eigen::Matrix<double, 5, 1> r;
  r << b_a_now - b_a_prev, b_v_now - b_v_prev;
  return r;
}

/// Second difference of the last three velocity control points and the
/// change of the last rotation increment.
inline Eigen::Matrix<double, 6, 1> end_tail_residual(const Vec3& v0, const Vec3& v1, const Vec3& v2,
                                                     const Quat& q0, const Quat& q1, const Quat& q2) {
  Eigen::Matrix<double, 6, 1> r;
  r.head<3>() = v2 - 2.0 * v1 + v0;
  r.tail<3>() = quat_log(q1.conjugate() * q0 * q1.conjugate() * q2);
  return r;
}

// --- gravity factor ---------------------------------------------------------

/// Rotated specific-force integral between two IMU samples, expressed in the
/// IMU frame at the first one. beta(b_a) = beta0 - Gamma * b_a.
struct GravityPreintegration {
  double t_i = 0.0, t_j = 0.0;
  Mat3 Rij = Mat3::Identity();  // orient_i^T orient_j
  Vec3 beta0 = Vec3::Zero();
  Mat3 Gamma = Mat3::Zero();

  double dt() const { return t_j - t_i; }
  Vec3 beta(const Vec3& b_a) const { return beta0 - Gamma * b_a; }
};

/// Trapezoidal quadrature over samples i..j.
inline GravityPreintegration preintegrate_gravity(const std::vector<ImuSample>& imu, std::size_t i,
                                                  std::size_t j) {
  if (!(j > i) || j >= imu.size()) throw std::invalid_argument("preintegrate_gravity: bad index pair");
  GravityPreintegration p;
  p.t_i = imu[i].stamp;
  p.t_j = imu[j].stamp;
  const Mat3 Ri_t = imu[i].orient.toRotationMatrix().transpose();
  Mat3 prev_rot = Mat3::Identity();
  Vec3 prev_f = imu[i].accel;
  for (std::size_t k = i + 1; k <= j; ++k) {
    const double h = imu[k].stamp - imu[k - 1].stamp;
    const Mat3 rot = Ri_t * imu[k].orient.toRotationMatrix();
    const Vec3 f = rot * imu[k].accel;
    p.beta0 += 0.5 * h * (prev_f + f);
    p.Gamma += 0.5 * h * (prev_rot + rot);
    prev_rot = rot;
    prev_f = f;
  }
  p.Rij = prev_rot;
  return p;
}

/// g_i, v_i, v_j are estimator-frame values at the pair's stamps.
inline Vec3 gravity_residual(const GravityPreintegration& p, const Vec3& g_i, const Vec3& v_i, const Vec3& v_j,
                             const Vec3& b_a, const Mat3& R_align) {
  return R_align * g_i - (p.Rij * (R_align * v_j) - R_align * v_i - p.beta(b_a)) / p.dt();
}

/// Index pairs (i, j) with t_j - t_i closest to `gap` from above, both inside
/// [t_lo, t_hi]. Pairs shorter than min_gap are dropped.
inline std::vector<std::pair<std::size_t, std::size_t>> gravity_pairs(const std::vector<ImuSample>& imu,
                                                                      double gap, double min_gap, double t_lo,
                                                                      double t_hi) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::size_t j = 0;
  for (std::size_t i = 0; i < imu.size(); ++i) {
    if (imu[i].stamp < t_lo) continue;
    if (imu[i].stamp > t_hi) break;
    if (j <= i) j = i + 1;
    while (j < imu.size() && imu[j].stamp - imu[i].stamp < gap - 1e-9) ++j;
    if (j >= imu.size() || imu[j].stamp > t_hi) break;
    if (imu[j].stamp - imu[i].stamp >= min_gap) out.emplace_back(i, j);
  }
  return out;
}

// --- state-level residuals ------------------------------------------------

/// Counts measurements skipped because their stamp lies outside spline support.
struct SkipCounter {
  std::size_t skipped = 0;
};

inline std::optional<Vec3> r_gyro(const EstimatorState& x, const ImuSample& s, SkipCounter* c = nullptr) {
  if (!x.so3.grid().contains(s.stamp)) {
    if (c) ++c->skipped;
    return std::nullopt;
  }
  Kinematics k;
  k.omega = x.so3.angular_velocity(s.stamp);
  return gyro_residual(k, x.R_align, s);
}

inline std::optional<Vec3> r_accel(const EstimatorState& x, const ImuSample& s, SkipCounter* c = nullptr) {
  if (!x.covers(s.stamp)) {
    if (c) ++c->skipped;
    return std::nullopt;
  }
  return accel_residual(x.at(s.stamp), x.R_align, x.b_a, x.g_global, s);
}

inline std::optional<Vec3> r_leg(const EstimatorState& x, const LegVelocityMeasurement& m, const Extrinsics& ext,
                                 SkipCounter* c = nullptr) {
  if (!x.covers(m.stamp)) {
    if (c) ++c->skipped;
    return std::nullopt;
  }
  return leg_residual(x.at(m.stamp), x.R_align, x.b_v, ext, m);
}

inline std::optional<Eigen::VectorXd> r_radar(const EstimatorState& x, const RadarScan& scan,
                                              const Extrinsics& ext, SkipCounter* c = nullptr) {
  if (scan.points.empty()) return std::nullopt;
  if (!x.covers(scan.stamp)) {
    if (c) ++c->skipped;
    return std::nullopt;
  }
  return radar_residuals(x.at(scan.stamp), x.R_align, ext, scan);
}

inline std::optional<Vec3> r_s2(const EstimatorState& x, double t, SkipCounter* c = nullptr) {
  if (!x.covers(t)) {
    if (c) ++c->skipped;
    return std::nullopt;
  }
  return s2_residual(x.at(t));
}

inline std::optional<Vec3> r_gravity(const EstimatorState& x, const GravityPreintegration& p,
                                     SkipCounter* c = nullptr) {
  if (!x.covers(p.t_i) || !x.covers(p.t_j)) {
    if (c) ++c->skipped;
    return std::nullopt;
  }
  return gravity_residual(p, x.grav.value(p.t_i), x.vel.value(p.t_i), x.vel.value(p.t_j), x.b_a, x.R_align);
}

inline Eigen::Matrix<double, 5, 1> r_bias_prior(const EstimatorState& now, const EstimatorState& prev) {
  return bias_prior_residual(now.b_a, now.b_v, prev.b_a, prev.b_v);
}

inline Eigen::Matrix<double, 6, 1> r_end_tail(const EstimatorState& x) {
  const std::size_t nv = x.vel.size(), nr = x.so3.size();
  if (nv < 3 || nr < 3) throw std::invalid_argument("r_end_tail: need three control points");
  return end_tail_residual(x.vel[nv - 3], x.vel[nv - 2], x.vel[nv - 1], x.so3[nr - 3], x.so3[nr - 2],
                           x.so3[nr - 1]);
}

inline Vec3 r_post(const Mat3& R_k, const Vec3& g_k, const Vec3& g_global) {
  return post_residual(R_k, g_k, g_global);
}

}  // namespace garlileo
