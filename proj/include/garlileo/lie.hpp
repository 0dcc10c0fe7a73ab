#pragma once

// SO(3) helpers: hat/vee, exponential and logarithm maps on matrices and
// unit quaternions.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>

namespace garlileo {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Quat = Eigen::Quaterniond;

// Below this angle the closed-form maps switch to their Taylor expansions.
inline constexpr double kSmallAngle = 1e-6;

inline Mat3 hat(const Vec3& w) {
  Mat3 m;
  m << 0.0, -w.z(), w.y(),
       w.z(), 0.0, -w.x(),
       -w.y(), w.x(), 0.0;
  return m;
}

inline Vec3 vee(const Mat3& m) {
  return Vec3(0.5 * (m(2, 1) - m(1, 2)), 0.5 * (m(0, 2) - m(2, 0)),
              0.5 * (m(1, 0) - m(0, 1)));
}

/// Rodrigues formula.
inline Mat3 so3_exp(const Vec3& phi) {
  const double theta = phi.norm();
  const Mat3 k = hat(phi);
  if (theta < kSmallAngle) {
    return Mat3::Identity() + k + 0.5 * k * k;
  }
  const double a = std::sin(theta) / theta;
  const double b = (1.0 - std::cos(theta)) / (theta * theta);
  return Mat3::Identity() + a * k + b * k * k;
}

inline Quat quat_exp(const Vec3& phi) {
  const double theta = phi.norm();
  if (theta < kSmallAngle) {
    const double t2 = theta * theta;
    Quat q(1.0 - t2 / 8.0, 0.0, 0.0, 0.0);
    q.vec() = (0.5 - t2 / 48.0) * phi;
    return q.normalized();
  }
  const double half = 0.5 * theta;
  Quat q(std::cos(half), 0.0, 0.0, 0.0);
  q.vec() = (std::sin(half) / theta) * phi;
  return q;
}

/// Rotation vector of a unit quaternion, angle in [0, pi].
inline Vec3 quat_log(const Quat& q_in) {
  Quat q = q_in;
  if (q.w() < 0.0) q.coeffs() = -q.coeffs();
  const double n = q.vec().norm();
  if (n < 0.5 * kSmallAngle) {
    // theta ~ 2n; phi = (2 / w) * (1 - n^2 / (3 w^2)) * vec
    const double w = q.w();
    return (2.0 / w) * (1.0 - (n * n) / (3.0 * w * w)) * q.vec();
  }
  const double theta = 2.0 * std::atan2(n, q.w());
  return (theta / n) * q.vec();
}

inline Vec3 so3_log(const Mat3& r) {
  return quat_log(Quat(r));
}

/// Geodesic angle of a rotation, radians.
inline double rotation_angle(const Mat3& r) {
  return so3_log(r).norm();
}

/// Minimal rotation R with R * from_dir parallel to to_dir.
inline Mat3 min_rotation_between(const Vec3& from, const Vec3& to) {
  const Vec3 a = from.normalized();
  const Vec3 b = to.normalized();
  const Vec3 axis = a.cross(b);
  const double s = axis.norm();
  const double c = std::clamp(a.dot(b), -1.0, 1.0);
  if (s < 1e-12) {
    if (c > 0.0) return Mat3::Identity();
    // Antiparallel: half turn about any axis orthogonal to a.
    Vec3 ortho = a.cross(Vec3::UnitX());
    if (ortho.norm() < 1e-6) ortho = a.cross(Vec3::UnitY());
    return so3_exp(M_PI * ortho.normalized());
  }
  return so3_exp(std::atan2(s, c) * axis / s);
}

inline double orthonormality_error(const Mat3& r) {
  return (r.transpose() * r - Mat3::Identity()).norm();
}

}  // namespace garlileo
