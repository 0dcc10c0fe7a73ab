#pragma once

#include "garlileo/lie.hpp"
#include "garlileo/radar.hpp"

#include <cmath>
#include <random>
#include <set>
#include <vector>

namespace garlileo::testing {

inline Vec3 random_vec(std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> d(-scale, scale);
  return Vec3(d(rng), d(rng), d(rng));
}

inline Quat random_quat(std::mt19937_64& rng, double max_angle = M_PI) {
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  std::uniform_real_distribution<double> a(0.0, max_angle);
  Vec3 axis(d(rng), d(rng), d(rng));
  if (axis.norm() < 1e-3) axis = Vec3::UnitZ();
  return quat_exp(a(rng) * axis.normalized());
}

/// Random control rotations whose consecutive increments stay below max_step.
inline std::vector<Quat> random_rotation_walk(std::mt19937_64& rng, std::size_t n,
                                              double max_step) {
  std::vector<Quat> out{random_quat(rng)};
  for (std::size_t i = 1; i < n; ++i) {
    out.push_back((out.back() * random_quat(rng, max_step)).normalized());
  }
  return out;
}

inline Mat3 rot_x(double a) { return so3_exp(a * Vec3::UnitX()); }
inline Mat3 rot_y(double a) { return so3_exp(a * Vec3::UnitY()); }
inline Mat3 rot_z(double a) { return so3_exp(a * Vec3::UnitZ()); }

// Cox-de Boor recursion over the uniform knot vector tau_j = t0 + (j - 2) * dt.
inline double cox_de_boor(int j, int p, double t, double t0, double dt) {
  auto tau = [&](int k) { return t0 + (k - 2) * dt; };
  if (p == 0) return (tau(j) <= t && t < tau(j + 1)) ? 1.0 : 0.0;
  const double left = (t - tau(j)) / (tau(j + p) - tau(j)) * cox_de_boor(j, p - 1, t, t0, dt);
  const double right = (tau(j + p + 1) - t) / (tau(j + p + 1) - tau(j + 1)) *
                       cox_de_boor(j + 1, p - 1, t, t0, dt);
  return left + right;
}

inline Vec3 brute_force_eval(const std::vector<Vec3>& ctrl, double t, double t0, double dt) {
  Vec3 out = Vec3::Zero();
  for (std::size_t j = 0; j < ctrl.size(); ++j) {
    out += cox_de_boor(static_cast<int>(j), 2, t, t0, dt) * ctrl[j];
  }
  return out;
}

/// Scan of n random points seen at ego-velocity v, with Gaussian doppler noise
/// and the first round(outlier_frac * n) points offset by 1 to 3 m/s.
inline RadarScan synthetic_scan(std::mt19937_64& rng, const Vec3& v, std::size_t n, double sigma,
                                 double outlier_frac, std::set<std::size_t>* outliers) {
  RadarScan scan;
  scan.stamp = 1.0;
  std::normal_distribution<double> noise(0.0, sigma);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_real_distribution<double> off(1.0, 3.0);
  std::uniform_real_distribution<double> range(0.5, 11.0);
  const auto n_out = static_cast<std::size_t>(std::round(outlier_frac * static_cast<double>(n)));
  for (std::size_t i = 0; i < n; ++i) {
    Vec3 d;
    do d = Vec3(u(rng), u(rng), u(rng));
    while (d.norm() < 0.1 || d.norm() > 1.0);
    RadarPoint pt;
    pt.p = range(rng) * d.normalized();
    // Oracle: radial velocity written out directly, not through doppler_predict.
    pt.doppler = -(pt.p.x() * v.x() + pt.p.y() * v.y() + pt.p.z() * v.z()) / pt.p.norm();
    pt.doppler += noise(rng);
    if (i < n_out) {
      pt.doppler += (u(rng) < 0.0 ? -1.0 : 1.0) * off(rng);
      if (outliers) outliers->insert(i);
    }
    scan.points.push_back(pt);
  }
  return scan;
}

}  // namespace garlileo::testing
