#pragma once

// Uniform cumulative B-splines of order 3 on R^3 and SO(3).
//
// Segment i covers [t0 + i*dt, t0 + (i+1)*dt) and is supported by control
// points i, i+1, i+2. A query at an interior knot belongs to the later
// segment; the end of the last segment is accepted and evaluated with u = 1.

#include "garlileo/lie.hpp"

#include <cmath>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace garlileo {

inline constexpr int kSplineOrder = 3;

/// Coefficients of the cumulative basis polynomials: entry (j, p) is the
/// coefficient of u^p in lambda_j(u).
inline Mat3 cumulative_blend_matrix(int order) {
  if (order != kSplineOrder) {
    throw std::invalid_argument("cumulative_blend_matrix: only order 3 is supported, got " +
                                std::to_string(order));
  }
  Mat3 m;
  m << 1.0, 0.0, 0.0,
       0.5, 1.0, -0.5,
       0.0, 0.0, 0.5;
  return m;
}

/// (lambda_0, lambda_1, lambda_2) at normalized time u.
inline Vec3 cumulative_basis(double u) {
  return Vec3(1.0, 0.5 + u - 0.5 * u * u, 0.5 * u * u);
}

/// d lambda / du.
inline Vec3 cumulative_basis_du(double u) { return Vec3(0.0, 1.0 - u, u); }

struct KnotGrid {
  double t0 = 0.0;
  double dt = 0.05;
  std::size_t n = 0;

  struct Location {
    std::size_t segment = 0;
    double u = 0.0;
  };

  std::size_t segments() const { return n >= 3 ? n - 2 : 0; }
  double t_min() const { return t0; }
  double t_max() const { return t0 + static_cast<double>(segments()) * dt; }
  double knot(std::size_t i) const { return t0 + static_cast<double>(i) * dt; }

  bool contains(double t) const {
    return n >= 3 && std::isfinite(t) && t >= t_min() && t <= t_max();
  }

  Location locate(double t) const {
    if (!(dt > 0.0) || n < 3) {
      throw std::logic_error("KnotGrid: need dt > 0 and at least 3 control points");
    }
    if (!contains(t)) {
      std::ostringstream os;
      os.precision(17);
      os << "spline query t=" << t << " outside [" << t_min() << ", " << t_max() << "]";
      throw std::out_of_range(os.str());
    }
    const double x = (t - t0) / dt;
    auto seg = static_cast<std::size_t>(std::floor(x));
    if (seg >= segments()) seg = segments() - 1;
    double u = x - static_cast<double>(seg);
    if (u > 1.0) u = 1.0;
    if (u < 0.0) u = 0.0;
    return {seg, u};
  }
};

// ---------------------------------------------------------------------------
// Segment-level evaluation. These operate on the three supporting control
// points directly and are what the factor functors call.

template <typename A, typename B, typename C>
Vec3 r3_segment_value(const A& c0, const B& c1, const C& c2, double u) {
  const Vec3 lam = cumulative_basis(u);
  return c0 + lam[1] * (c1 - c0) + lam[2] * (c2 - c1);
}

template <typename A, typename B, typename C>
Vec3 r3_segment_derivative(const A& c0, const B& c1, const C& c2, double u, double dt) {
  const Vec3 dlam = cumulative_basis_du(u);
  return (dlam[1] * (c1 - c0) + dlam[2] * (c2 - c1)) / dt;
}

struct So3SegmentEval {
  Quat q;
  Vec3 omega;  // body-frame angular velocity
};

template <typename A, typename B, typename C>
So3SegmentEval so3_segment_eval(const A& q0, const B& q1, const C& q2, double u, double dt) {
  const Vec3 lam = cumulative_basis(u);
  const Vec3 dlam = cumulative_basis_du(u) / dt;
  const Vec3 phi1 = quat_log(Quat(q0).conjugate() * Quat(q1));
  const Vec3 phi2 = quat_log(Quat(q1).conjugate() * Quat(q2));
  const Quat a1 = quat_exp(lam[1] * phi1);
  const Quat a2 = quat_exp(lam[2] * phi2);
  So3SegmentEval out;
  out.q = (Quat(q0) * a1 * a2).normalized();
  out.omega = a2.conjugate() * (dlam[1] * phi1) + dlam[2] * phi2;
  return out;
}

// ---------------------------------------------------------------------------

class SplineR3 {
 public:
  SplineR3() = default;
  SplineR3(double t0, double dt, std::vector<Vec3> ctrl) : ctrl_(std::move(ctrl)) {
    grid_ = KnotGrid{t0, dt, ctrl_.size()};
    check();
  }
  /// n control points all equal to `value`.
  static SplineR3 constant(double t0, double dt, std::size_t n, const Vec3& value) {
    return SplineR3(t0, dt, std::vector<Vec3>(n, value));
  }

  const KnotGrid& grid() const { return grid_; }
  std::size_t size() const { return ctrl_.size(); }
  const std::vector<Vec3>& ctrl() const { return ctrl_; }
  Vec3& operator[](std::size_t i) { return ctrl_[i]; }
  const Vec3& operator[](std::size_t i) const { return ctrl_[i]; }

  Vec3 value(double t) const {
    const auto loc = grid_.locate(t);
    const std::size_t i = loc.segment;
    return r3_segment_value(ctrl_[i], ctrl_[i + 1], ctrl_[i + 2], loc.u);
  }

  Vec3 derivative(double t) const {
    const auto loc = grid_.locate(t);
    const std::size_t i = loc.segment;
    return r3_segment_derivative(ctrl_[i], ctrl_[i + 1], ctrl_[i + 2], loc.u, grid_.dt);
  }

  /// Appends linearly extrapolated control points until t_end is supported.
  /// Returns the number of points appended.
  std::size_t extend_to(double t_end) {
    std::size_t added = 0;
    while (grid_.t_max() < t_end) {
      const std::size_t n = ctrl_.size();
      ctrl_.push_back(2.0 * ctrl_[n - 1] - ctrl_[n - 2]);
      grid_.n = ctrl_.size();
      ++added;
    }
    return added;
  }

 private:
  void check() const {
    if (!(grid_.dt > 0.0)) throw std::invalid_argument("SplineR3: dt must be positive");
    if (ctrl_.size() < static_cast<std::size_t>(kSplineOrder)) {
      throw std::invalid_argument("SplineR3: need at least 3 control points");
    }
    for (const auto& c : ctrl_) {
      if (!c.allFinite()) throw std::invalid_argument("SplineR3: non-finite control point");
    }
  }

  KnotGrid grid_;
  std::vector<Vec3> ctrl_;
};

class SplineSo3 {
 public:
  SplineSo3() = default;
  SplineSo3(double t0, double dt, std::vector<Quat> ctrl) : ctrl_(std::move(ctrl)) {
    grid_ = KnotGrid{t0, dt, ctrl_.size()};
    if (!(dt > 0.0)) throw std::invalid_argument("SplineSo3: dt must be positive");
    if (ctrl_.size() < static_cast<std::size_t>(kSplineOrder)) {
      throw std::invalid_argument("SplineSo3: need at least 3 control points");
    }
    for (auto& q : ctrl_) {
      if (!q.coeffs().allFinite() || std::abs(q.norm() - 1.0) > 1e-6) {
        throw std::invalid_argument("SplineSo3: control rotation is not a unit quaternion");
      }
      q.normalize();
    }
  }
  SplineSo3(double t0, double dt, const std::vector<Mat3>& ctrl)
      : SplineSo3(t0, dt, to_quats(ctrl)) {}

  static SplineSo3 identity(double t0, double dt, std::size_t n) {
    return SplineSo3(t0, dt, std::vector<Quat>(n, Quat::Identity()));
  }

  const KnotGrid& grid() const { return grid_; }
  std::size_t size() const { return ctrl_.size(); }
  const std::vector<Quat>& ctrl() const { return ctrl_; }
  Quat& operator[](std::size_t i) { return ctrl_[i]; }
  const Quat& operator[](std::size_t i) const { return ctrl_[i]; }
  Mat3 rotation_at_knot(std::size_t i) const { return ctrl_[i].toRotationMatrix(); }

  So3SegmentEval evaluate(double t) const {
    const auto loc = grid_.locate(t);
    const std::size_t i = loc.segment;
    return so3_segment_eval(ctrl_[i], ctrl_[i + 1], ctrl_[i + 2], loc.u, grid_.dt);
  }

  Quat quaternion(double t) const { return evaluate(t).q; }
  Mat3 value(double t) const { return evaluate(t).q.toRotationMatrix(); }
  Vec3 angular_velocity(double t) const { return evaluate(t).omega; }

  /// Appends control points continuing the last rotation increment.
  std::size_t extend_to(double t_end) {
    std::size_t added = 0;
    while (grid_.t_max() < t_end) {
      const std::size_t n = ctrl_.size();
      const Quat inc = ctrl_[n - 2].conjugate() * ctrl_[n - 1];
      ctrl_.push_back((ctrl_[n - 1] * inc).normalized());
      grid_.n = ctrl_.size();
      ++added;
    }
    return added;
  }

 private:
  static std::vector<Quat> to_quats(const std::vector<Mat3>& rs) {
    std::vector<Quat> out;
    out.reserve(rs.size());
    for (const auto& r : rs) {
      if (orthonormality_error(r) > 1e-9 || r.determinant() <= 0.0) {
        throw std::invalid_argument("SplineSo3: control matrix is not a proper rotation");
      }
      out.emplace_back(Quat(r).normalized());
    }
    return out;
  }

  KnotGrid grid_;
  std::vector<Quat> ctrl_;
};

}  // namespace garlileo
