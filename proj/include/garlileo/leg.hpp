#pragma once

// Three-joint quadruped leg: hip roll, hip pitch, knee pitch. Legs are
// ordered front-left, front-right, hind-left, hind-right.

#include "garlileo/lie.hpp"

#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>

namespace garlileo {

inline constexpr int kNumLegs = 4;

struct LegModel {
  std::array<Vec3, kNumLegs> hip_translation{
      Vec3(0.29, 0.055, 0.0), Vec3(0.29, -0.055, 0.0), Vec3(-0.29, 0.055, 0.0), Vec3(-0.29, -0.055, 0.0)};
  std::array<Mat3, kNumLegs> hip_rotation{Mat3::Identity(), Mat3::Identity(), Mat3::Identity(),
                                          Mat3::Identity()};
  double l1 = 0.11;  // lateral hip offset
  double l2 = 0.32;  // upper leg
  double l3 = 0.35;  // lower leg
  // Unit joint axes in their local frames. Pitch axes point along -y so that
  // positive pitch swings the foot forward.
  std::array<Vec3, 3> axis{Vec3::UnitX(), -Vec3::UnitY(), -Vec3::UnitY()};

  static bool is_left(int leg) { return leg == 0 || leg == 2; }
  double side_sign(int leg) const { return is_left(leg) ? 1.0 : -1.0; }

  void validate() const {
    if (!(l2 > 0.0) || !(l3 > 0.0) || !(l1 >= 0.0))
      throw std::invalid_argument("LegModel: link lengths must be positive");
    for (const auto& a : axis)
      if (std::abs(a.norm() - 1.0) > 1e-9) throw std::invalid_argument("LegModel: joint axes must be unit");
    for (const auto& r : hip_rotation)
      if (orthonormality_error(r) > 1e-9) throw std::invalid_argument("LegModel: hip rotation not orthonormal");
  }
};

struct LegSample {
  double stamp = 0.0;
  std::array<Vec3, kNumLegs> alpha{Vec3::Zero(), Vec3::Zero(), Vec3::Zero(), Vec3::Zero()};
  std::array<bool, kNumLegs> contact{false, false, false, false};
  // Encoder-reported joint rates, when the source provides them.
  std::optional<std::array<Vec3, kNumLegs>> alpha_dot;
};

struct LegVelocityMeasurement {
  double stamp = 0.0;
  Vec3 v = Vec3::Zero();  // base velocity in base frame
  int n_contact = 0;
  bool valid = false;
  std::string reason;
};

inline void check_leg_index(int leg) {
  if (leg < 0 || leg >= kNumLegs) throw std::out_of_range("leg index out of range");
}

inline Vec3 forward_kinematics(const LegModel& m, int leg, const Vec3& alpha) {
  check_leg_index(leg);
  const Vec3 lower(0.0, 0.0, -m.l3);
  const Vec3 q2 = Vec3(0.0, 0.0, -m.l2) + so3_exp(alpha(2) * m.axis[2]) * lower;
  const Vec3 q1 = Vec3(0.0, m.side_sign(leg) * m.l1, 0.0) + so3_exp(alpha(1) * m.axis[1]) * q2;
  return m.hip_translation[leg] + m.hip_rotation[leg] * so3_exp(alpha(0) * m.axis[0]) * q1;
}

/// d f / d alpha, columns ordered roll, pitch, knee.
inline Mat3 foot_jacobian(const LegModel& m, int leg, const Vec3& alpha) {
  check_leg_index(leg);
  const Vec3 lower(0.0, 0.0, -m.l3);
  const Mat3 r3 = so3_exp(alpha(2) * m.axis[2]);
  const Mat3 r2 = so3_exp(alpha(1) * m.axis[1]);
  const Mat3 r1 = so3_exp(alpha(0) * m.axis[0]);
  const Vec3 q2 = Vec3(0.0, 0.0, -m.l2) + r3 * lower;
  const Vec3 q1 = Vec3(0.0, m.side_sign(leg) * m.l1, 0.0) + r2 * q2;
  const Mat3& rh = m.hip_rotation[leg];
  Mat3 j;
  j.col(0) = rh * r1 * m.axis[0].cross(q1);
  j.col(1) = rh * r1 * r2 * m.axis[1].cross(q2);
  j.col(2) = rh * r1 * r2 * r3 * m.axis[2].cross(lower);
  return j;
}

/// Base velocity from differenced foot positions of legs in stance at both
/// samples. Stamped at the midpoint of the pair.
inline LegVelocityMeasurement leg_velocity(const LegModel& m, const LegSample& prev, const LegSample& next,
                                           double max_gap) {
  const double dt = next.stamp - prev.stamp;
  if (!(dt > 0.0)) throw std::invalid_argument("leg_velocity: non-increasing stamps");
  LegVelocityMeasurement out;
  out.stamp = 0.5 * (prev.stamp + next.stamp);
  if (dt > max_gap) {
    out.reason = "stale pair";
    return out;
  }
  Vec3 sum = Vec3::Zero();
  for (int leg = 0; leg < kNumLegs; ++leg) {
    if (!prev.contact[leg] || !next.contact[leg]) continue;
    sum -= (forward_kinematics(m, leg, next.alpha[leg]) - forward_kinematics(m, leg, prev.alpha[leg])) / dt;
    ++out.n_contact;
  }
  if (out.n_contact == 0) {
    out.reason = "no leg in contact";
    return out;
  }
  out.v = sum / out.n_contact;
  out.valid = true;
  return out;
}

/// Base velocity from joint rates: a static foot gives v = -J(alpha) alpha_dot - omega x f.
/// omega is the base angular rate in the base frame.
inline LegVelocityMeasurement leg_velocity_from_rates(const LegModel& m, const LegSample& s,
                                                      const Vec3& omega_base) {
  LegVelocityMeasurement out;
  out.stamp = s.stamp;
  if (!s.alpha_dot) {
    out.reason = "no joint rates";
    return out;
  }
  Vec3 sum = Vec3::Zero();
  for (int leg = 0; leg < kNumLegs; ++leg) {
    if (!s.contact[leg]) continue;
    const Vec3 f = forward_kinematics(m, leg, s.alpha[leg]);
    sum -= foot_jacobian(m, leg, s.alpha[leg]) * (*s.alpha_dot)[leg] + omega_base.cross(f);
    ++out.n_contact;
  }
  if (out.n_contact == 0) {
    out.reason = "no leg in contact";
    return out;
  }
  out.v = sum / out.n_contact;
  out.valid = true;
  return out;
}

/// Closed-form inverse of forward_kinematics for the default axis convention
/// (x, -y, -y) with identity hip rotation. Returns nullopt when unreachable.
/// Selects the branch with knee angle <= 0.
inline std::optional<Vec3> inverse_kinematics(const LegModel& m, int leg, const Vec3& foot) {
  check_leg_index(leg);
  const Vec3 d = m.hip_rotation[leg].transpose() * (foot - m.hip_translation[leg]);
  const double s = m.side_sign(leg) * m.l1;
  // Roll: in the y-z plane, (d.y, d.z) = Rx(a1) (s, -h) with h > 0.
  const double ryz2 = d.y() * d.y() + d.z() * d.z();
  if (ryz2 < s * s) return std::nullopt;
  const double h = std::sqrt(ryz2 - s * s);
  const double a1 = std::atan2(d.z(), d.y()) - std::atan2(-h, s);
  // Sagittal plane: foot at (x, -h) reached by pitch about -y.
  const double x = d.x();
  const double r2 = x * x + h * h;
  const double c3 = (r2 - m.l2 * m.l2 - m.l3 * m.l3) / (2.0 * m.l2 * m.l3);
  if (c3 > 1.0 || c3 < -1.0) return std::nullopt;
  const double a3 = -std::acos(c3);
  // Rotation about -y by angle b maps (0,0,-l) to (l sin b, 0, -l cos b).
  const double k1 = m.l2 + m.l3 * std::cos(a3);
  const double k2 = m.l3 * std::sin(a3);
  const double a2 = std::atan2(x, h) - std::atan2(k2, k1);
  auto wrap = [](double a) { return std::atan2(std::sin(a), std::cos(a)); };
  return Vec3(wrap(a1), wrap(a2), a3);
}

}  // namespace garlileo
