#pragma once

// End-to-end estimator: staged initialization, one windowed solve per radar
// frame with Schur marginalization, gravity-based roll/pitch refinement of
// marginalized rotation knots, and dead-reckoned positions.

#include "garlileo/config.hpp"
#include "garlileo/dataset.hpp"
#include "garlileo/factors.hpp"
#include "garlileo/log.hpp"
#include "garlileo/metrics.hpp"
#include "garlileo/radar.hpp"
#include "garlileo/solver.hpp"
#include "garlileo/spline.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace garlileo {

class PipelineError : public std::runtime_error {
 public:
  PipelineError(std::string stage, const std::string& msg)
      : std::runtime_error("stage '" + stage + "': " + msg), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

// --- block ids and segment lookup -------------------------------------------

namespace pipeline_detail {

enum Group : std::uint64_t { kSo3 = 1, kVel = 2, kGrav = 3, kBa = 4, kBv = 5 };

inline BlockId id(Group g, std::size_t k) { return make_block_id(g, k); }

/// Segment index and normalized time for window bookkeeping. A stamp on an
/// interior knot belongs to the segment ending there, so its assignment does
/// not change as the grid grows and a frame stamp on a knot lands at u = 1 of
/// the newest segment. Stamps within 1e-9 of a knot snap to it.
struct SegLoc {
  long seg = 0;
  double u = 0.0;
};

inline SegLoc seg_loc(const KnotGrid& g, double t) {
  double x = (t - g.t0) / g.dt;
  const double r = std::round(x);
  if (std::abs(x - r) < 1e-9 * std::max(1.0, std::abs(x))) x = r;
  const double s = std::max(0.0, std::ceil(x) - 1.0);
  return {static_cast<long>(s), x - s};
}

/// False for stamps before the first knot, where seg_loc would extrapolate.
inline bool on_or_after_start(const KnotGrid& g, double t) { return seg_loc(g, t).u >= 0.0; }

/// Deduplicated block list of one residual.
struct Slots {
  std::vector<BlockId> ids;
  int operator()(BlockId b) {
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (ids[i] == b) return static_cast<int>(i);
    ids.push_back(b);
    return static_cast<int>(ids.size()) - 1;
  }
};

using CQuat = Eigen::Map<const Quat>;
using CVec3 = Eigen::Map<const Vec3>;

template <typename V>
void put(double* out, const V& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) out[i] = v(i);
}

struct SegSlots {
  int a = -1, b = -1, c = -1;
};

inline SegSlots seg_slots(Slots& s, Group g, long seg) {
  const auto k = static_cast<std::size_t>(seg);
  return {s(id(g, k)), s(id(g, k + 1)), s(id(g, k + 2))};
}

inline So3SegmentEval so3_at(const double* const* p, const SegSlots& s, double u, double dt) {
  return so3_segment_eval(CQuat(p[s.a]), CQuat(p[s.b]), CQuat(p[s.c]), u, dt);
}
inline Vec3 r3_at(const double* const* p, const SegSlots& s, double u) {
  return r3_segment_value(CVec3(p[s.a]), CVec3(p[s.b]), CVec3(p[s.c]), u);
}
inline Vec3 r3_dot(const double* const* p, const SegSlots& s, double u, double dt) {
  return r3_segment_derivative(CVec3(p[s.a]), CVec3(p[s.b]), CVec3(p[s.c]), u, dt);
}

inline ResidualBlock gyro_block(const KnotGrid& g, const ImuSample& m, const Mat3& R_align, double w) {
  const auto loc = seg_loc(g, m.stamp);
  Slots s;
  const auto q = seg_slots(s, kSo3, loc.seg);
  ResidualBlock rb{"gyro", s.ids, 3, nullptr, w, 0.0};
  rb.fn = [q, u = loc.u, dt = g.dt, R_align, m](const double* const* p, double* out) {
    Kinematics k;
    k.omega = so3_at(p, q, u, dt).omega;
    put(out, gyro_residual(k, R_align, m));
    return true;
  };
  return rb;
}

inline ResidualBlock accel_block(const KnotGrid& g, const ImuSample& m, const Mat3& R_align, const Vec3& g_global,
                                 double w) {
  const auto loc = seg_loc(g, m.stamp);
  Slots s;
  const auto q = seg_slots(s, kSo3, loc.seg);
  const auto v = seg_slots(s, kVel, loc.seg);
  const int ba = s(id(kBa, 0));
  ResidualBlock rb{"accel", s.ids, 3, nullptr, w, 0.0};
  rb.fn = [q, v, ba, u = loc.u, dt = g.dt, R_align, g_global, m](const double* const* p, double* out) {
    Kinematics k;
    const auto e = so3_at(p, q, u, dt);
    k.R = e.q.toRotationMatrix();
    k.omega = e.omega;
    k.v = r3_at(p, v, u);
    k.vdot = r3_dot(p, v, u, dt);
    put(out, accel_residual(k, R_align, CVec3(p[ba]), g_global, m));
    return true;
  };
  return rb;
}

/// Without a b_v block the velocity bias is held at zero.
inline ResidualBlock leg_block(const KnotGrid& g, const LegVelocityMeasurement& m, const Mat3& R_align,
                               const Extrinsics& ext, std::optional<BlockId> bv_block, double w) {
  const auto loc = seg_loc(g, m.stamp);
  Slots s;
  const auto q = seg_slots(s, kSo3, loc.seg);
  const auto v = seg_slots(s, kVel, loc.seg);
  const int bv = bv_block ? s(*bv_block) : -1;
  ResidualBlock rb{"leg", s.ids, 3, nullptr, w, 0.0};
  rb.fn = [q, v, bv, u = loc.u, dt = g.dt, R_align, ext, m](const double* const* p, double* out) {
    Kinematics k;
    k.omega = so3_at(p, q, u, dt).omega;
    k.v = r3_at(p, v, u);
    const Vec2 b = bv >= 0 ? Vec2(p[bv][0], p[bv][1]) : Vec2::Zero();
    put(out, leg_residual(k, R_align, b, ext, m));
    return true;
  };
  return rb;
}

inline ResidualBlock radar_block(const KnotGrid& g, const RadarScan& scan, const Mat3& R_align,
                                 const Extrinsics& ext, double w, double cauchy) {
  const auto loc = seg_loc(g, scan.stamp);
  Slots s;
  const auto q = seg_slots(s, kSo3, loc.seg);
  const auto v = seg_slots(s, kVel, loc.seg);
  ResidualBlock rb{"radar", s.ids, static_cast<int>(scan.points.size()), nullptr, w, cauchy};
  rb.fn = [q, v, u = loc.u, dt = g.dt, R_align, ext, scan](const double* const* p, double* out) {
    Kinematics k;
    k.omega = so3_at(p, q, u, dt).omega;
    k.v = r3_at(p, v, u);
    put(out, radar_residuals(k, R_align, ext, scan));
    return true;
  };
  return rb;
}

inline ResidualBlock s2_block(const KnotGrid& g, double t, double w) {
  const auto loc = seg_loc(g, t);
  Slots s;
  const auto q = seg_slots(s, kSo3, loc.seg);
  const auto gr = seg_slots(s, kGrav, loc.seg);
  ResidualBlock rb{"s2", s.ids, 3, nullptr, w, 0.0};
  rb.fn = [q, gr, u = loc.u, dt = g.dt](const double* const* p, double* out) {
    Kinematics k;
    k.omega = so3_at(p, q, u, dt).omega;
    k.g = r3_at(p, gr, u);
    k.gdot = r3_dot(p, gr, u, dt);
    put(out, s2_residual(k));
    return true;
  };
  return rb;
}

inline ResidualBlock gravity_block(const KnotGrid& g, const GravityPreintegration& pre, BlockId ba_block,
                                   const Mat3& R_align, double w) {
  const auto li = seg_loc(g, pre.t_i);
  const auto lj = seg_loc(g, pre.t_j);
  Slots s;
  const auto gi = seg_slots(s, kGrav, li.seg);
  const auto vi = seg_slots(s, kVel, li.seg);
  const auto vj = seg_slots(s, kVel, lj.seg);
  const int ba = s(ba_block);
  ResidualBlock rb{"gravity", s.ids, 3, nullptr, w, 0.0};
  rb.fn = [gi, vi, vj, ba, ui = li.u, uj = lj.u, R_align, pre](const double* const* p, double* out) {
    put(out, gravity_residual(pre, r3_at(p, gi, ui), r3_at(p, vi, ui), r3_at(p, vj, uj), CVec3(p[ba]), R_align));
    return true;
  };
  return rb;
}

template <int N>
ResidualBlock difference_block(const std::string& name, BlockId now, BlockId prev, double w) {
  ResidualBlock rb{name, {now, prev}, N, nullptr, w, 0.0};
  rb.fn = [](const double* const* p, double* out) {
    for (int i = 0; i < N; ++i) out[i] = p[0][i] - p[1][i];
    return true;
  };
  return rb;
}

inline ResidualBlock end_tail_block(std::size_t n, double w) {
  ResidualBlock rb{"end_tail",
                   {id(kVel, n - 3), id(kVel, n - 2), id(kVel, n - 1), id(kSo3, n - 3), id(kSo3, n - 2),
                    id(kSo3, n - 1)},
                   6,
                   nullptr,
                   w,
                   0.0};
  rb.fn = [](const double* const* p, double* out) {
    put(out, end_tail_residual(CVec3(p[0]), CVec3(p[1]), CVec3(p[2]), CQuat(p[3]), CQuat(p[4]), CQuat(p[5])));
    return true;
  };
  return rb;
}

/// Linear interpolation of the gyro stream; nullopt outside it.
inline std::optional<Vec3> interp_gyro(const std::vector<ImuSample>& imu, double t) {
  if (imu.empty() || t < imu.front().stamp || t > imu.back().stamp) return std::nullopt;
  auto it = std::lower_bound(imu.begin(), imu.end(), t, [](const ImuSample& s, double x) { return s.stamp < x; });
  if (it->stamp == t || it == imu.begin()) return it->gyro;
  const auto& a = *std::prev(it);
  const double f = (t - a.stamp) / (it->stamp - a.stamp);
  return (1.0 - f) * a.gyro + f * it->gyro;
}

inline std::vector<RadarPoint> finite_points(const std::vector<RadarPoint>& pts) {
  std::vector<RadarPoint> out;
  for (const auto& p : pts)
    if (p.p.allFinite() && std::isfinite(p.doppler) && p.p.norm() > 0.0) out.push_back(p);
  return out;
}

template <typename T>
std::size_t first_at_or_after(const std::vector<T>& v, double t) {
  return static_cast<std::size_t>(
      std::lower_bound(v.begin(), v.end(), t, [](const T& s, double x) { return s.stamp < x; }) - v.begin());
}

}  // namespace pipeline_detail

// --- initialization stages ---------------------------------------------------

/// Number of control points whose segments cover [t0, t_end].
inline std::size_t ctrl_count_for(double t0, double dt, double t_end) {
  const auto loc = pipeline_detail::seg_loc(KnotGrid{t0, dt, 0}, t_end);
  return static_cast<std::size_t>(loc.seg) + kSplineOrder;
}

/// Gyro-only rotation spline on [t0, t0 + (n-2) dt] with control point 0
/// fixed at identity.
inline SplineSo3 init_so3(const std::vector<ImuSample>& imu, double t0, double dt, std::size_t n, int iters = 50) {
  using namespace pipeline_detail;
  if (n < 3) throw PipelineError("init_so3", "need at least 3 control points");
  const KnotGrid grid{t0, dt, n};
  if (imu.empty() || imu.front().stamp > t0 + 1e-9 || imu.back().stamp < grid.t_max() - dt - 1e-9)
    throw PipelineError("init_so3", "insufficient IMU data for the initialization window");
  // Initial guess by integrating the gyro at each control point's time.
  std::vector<Quat> ctrl(n, Quat::Identity());
  for (std::size_t k = 1; k < n; ++k) {
    const double tk = std::clamp(t0 + (static_cast<double>(k) - 1.5) * dt, imu.front().stamp, imu.back().stamp);
    ctrl[k] = (ctrl[k - 1] * quat_exp(*interp_gyro(imu, tk) * dt)).normalized();
  }
  SplineSo3 so3(t0, dt, ctrl);
  Problem prob;
  for (std::size_t k = 0; k < n; ++k) prob.add_rotation(id(kSo3, k), &so3[k]);
  prob.set_fixed(id(kSo3, 0));
  for (const auto& m : imu) {
    const auto loc = seg_loc(grid, m.stamp);
    if (loc.seg < 0 || static_cast<std::size_t>(loc.seg) + 2 >= n) continue;
    prob.add_residual(gyro_block(grid, m, Mat3::Identity(), 1.0));
  }
  if (prob.residuals().empty()) throw PipelineError("init_so3", "no gyro samples inside the window");
  const auto sum = solve(prob, SolverOptions{iters});
  if (!sum.ok) throw PipelineError("init_so3", sum.message);
  return so3;
}

/// True iff |mean(v)| < tau1 and trace(Var(v)) < tau2 (sample variance).
inline bool is_stationary(const std::vector<Vec3>& v, double tau1, double tau2) {
  if (v.empty()) return false;
  Vec3 mean = Vec3::Zero();
  for (const auto& x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double tr = 0.0;
  for (const auto& x : v) tr += (x - mean).squaredNorm();
  if (v.size() > 1) tr /= static_cast<double>(v.size() - 1);
  return mean.norm() < tau1 && tr < tau2;
}

/// Radar ego-velocity converted to the IMU frame.
struct TimedVelocity {
  double stamp = 0.0;
  Vec3 v = Vec3::Zero();        // IMU frame at stamp
  Vec3 v_radar = Vec3::Zero();  // radar frame
};

inline std::vector<TimedVelocity> radar_imu_velocities(const std::vector<RadarScan>& scans, const SplineSo3& so3,
                                                       const Extrinsics& ext, const RansacConfig& ransac,
                                                       double t_lo, double t_hi) {
  std::vector<TimedVelocity> out;
  for (const auto& scan : scans) {
    if (scan.stamp < t_lo || scan.stamp > t_hi || !so3.grid().contains(scan.stamp)) continue;
    const auto est = estimate_ego_velocity(scan, ransac);
    if (!est.valid) continue;
    const Vec3 omega = so3.angular_velocity(scan.stamp);
    out.push_back({scan.stamp, ext.R_ir * est.v - omega.cross(ext.t_ir), est.v});
  }
  return out;
}

/// Integral of R(t) * accel over [ta, tb] by trapezoid on the IMU samples,
/// with the accelerometer linearly interpolated at the ends.
inline Vec3 rotated_accel_integral(const std::vector<ImuSample>& imu, const SplineSo3& so3, double ta, double tb) {
  auto accel_at = [&](double t) {
    auto it = std::lower_bound(imu.begin(), imu.end(), t, [](const ImuSample& s, double x) { return s.stamp < x; });
    if (it == imu.end()) return imu.back().accel;
    if (it->stamp == t || it == imu.begin()) return it->accel;
    const auto& a = *std::prev(it);
    const double f = (t - a.stamp) / (it->stamp - a.stamp);
    return Vec3((1.0 - f) * a.accel + f * it->accel);
  };
  std::vector<std::pair<double, Vec3>> pts{{ta, accel_at(ta)}};
  for (std::size_t i = pipeline_detail::first_at_or_after(imu, ta); i < imu.size() && imu[i].stamp < tb; ++i)
    if (imu[i].stamp > ta) pts.emplace_back(imu[i].stamp, imu[i].accel);
  pts.emplace_back(tb, accel_at(tb));
  Vec3 sum = Vec3::Zero();
  Vec3 prev = so3.value(pts[0].first) * pts[0].second;
  for (std::size_t k = 1; k < pts.size(); ++k) {
    const Vec3 cur = so3.value(pts[k].first) * pts[k].second;
    sum += 0.5 * (pts[k].first - pts[k - 1].first) * (prev + cur);
    prev = cur;
  }
  return sum;
}

/// Gravity rows (R_b v_b - R_a v_a - alpha) / dt from consecutive radar velocities.
inline std::vector<Vec3> dynamic_gravity_rows(const std::vector<ImuSample>& imu, const std::vector<TimedVelocity>& rv,
                                              const SplineSo3& so3) {
  std::vector<Vec3> rows;
  for (std::size_t k = 0; k + 1 < rv.size(); ++k) {
    const auto& a = rv[k];
    const auto& b = rv[k + 1];
    const double dt = b.stamp - a.stamp;
    if (!(dt > 0.0)) continue;
    const Vec3 alpha = rotated_accel_integral(imu, so3, a.stamp, b.stamp);
    rows.push_back((so3.value(b.stamp) * b.v - so3.value(a.stamp) * a.v - alpha) / dt);
  }
  return rows;
}

/// Mean of -R(t_k) accel_k over IMU samples in [t_lo, t_hi].
inline std::optional<Vec3> accel_gravity_mean(const std::vector<ImuSample>& imu, const SplineSo3& so3, double t_lo,
                                              double t_hi) {
  Vec3 sum = Vec3::Zero();
  std::size_t n = 0;
  for (const auto& m : imu) {
    if (m.stamp < t_lo || m.stamp > t_hi || !so3.grid().contains(m.stamp)) continue;
    sum -= so3.value(m.stamp) * m.accel;
    ++n;
  }
  if (n == 0) return std::nullopt;
  return Vec3(sum / static_cast<double>(n));
}

inline Vec3 renormalize_gravity(const Vec3& g, const std::string& stage) {
  if (!(g.norm() > 1e-9) || !g.allFinite()) throw PipelineError(stage, "degenerate gravity estimate");
  return kGravity * g.normalized();
}

/// Static initialization: minimizes sum_k |w1 (abar - g) + w2 (d_k - g)|^2,
/// whose minimizer is (w1 abar + w2 mean d) / (w1 + w2), then renormalizes.
inline Vec3 init_gravity_static(const std::vector<ImuSample>& imu, const std::vector<TimedVelocity>& rv,
                                const SplineSo3& so3, double w1, double w2, double t_lo, double t_hi) {
  const auto abar = accel_gravity_mean(imu, so3, t_lo, t_hi);
  if (!abar) throw PipelineError("init_gravity", "no accelerometer samples in the initialization window");
  const auto rows = dynamic_gravity_rows(imu, rv, so3);
  if (rows.empty() || w2 == 0.0) return renormalize_gravity(*abar, "init_gravity");
  Vec3 d = Vec3::Zero();
  for (const auto& r : rows) d += r;
  d /= static_cast<double>(rows.size());
  return renormalize_gravity((w1 * *abar + w2 * d) / (w1 + w2), "init_gravity");
}

/// Dynamic initialization: min sum |d_k - g|^2 subject to |g| = 9.81.
/// Falls back to the accelerometer mean when there is no usable excitation.
inline Vec3 init_gravity_dynamic(const std::vector<TimedVelocity>& rv, const SplineSo3& so3,
                                 const std::vector<ImuSample>& imu, double t_lo, double t_hi) {
  auto fallback = [&](const std::string& why) {
    log_warn("init_gravity_dynamic: " + why + "; using the accelerometer mean");
    const auto abar = accel_gravity_mean(imu, so3, t_lo, t_hi);
    if (!abar) throw PipelineError("init_gravity", "no accelerometer samples in the initialization window");
    return renormalize_gravity(*abar, "init_gravity");
  };
  if (rv.size() < 2) return fallback("fewer than 2 radar ego-velocities");
  const auto rows = dynamic_gravity_rows(imu, rv, so3);
  if (rows.empty()) return fallback("no radar velocity pairs");
  Vec3 d = Vec3::Zero();
  for (const auto& r : rows) d += r;
  d /= static_cast<double>(rows.size());
  if (!(d.norm() > 1e-3 * kGravity) || !d.allFinite()) return fallback("degenerate radar excitation");
  return kGravity * d.normalized();
}

/// Leg velocities: rate form when joint rates are present (base rate from
/// the interpolated gyro), otherwise consecutive differences corrected for
/// the base rotation.
inline std::vector<LegVelocityMeasurement> leg_measurements(const std::vector<LegSample>& legs,
                                                            const std::vector<ImuSample>& imu, const LegModel& model,
                                                            const Extrinsics& ext, double max_gap) {
  std::vector<LegVelocityMeasurement> out;
  for (std::size_t i = 0; i < legs.size(); ++i) {
    const auto& s = legs[i];
    if (s.alpha_dot) {
      const auto w = pipeline_detail::interp_gyro(imu, s.stamp);
      if (!w) continue;
      auto m = leg_velocity_from_rates(model, s, ext.R_ib.transpose() * *w);
      if (m.valid && m.v.allFinite()) out.push_back(m);
      continue;
    }
    if (i + 1 >= legs.size()) break;
    const auto& nx = legs[i + 1];
    auto m = leg_velocity(model, s, nx, max_gap);
    const auto w = pipeline_detail::interp_gyro(imu, m.stamp);
    if (!m.valid || !w) continue;
    Vec3 f = Vec3::Zero();
    for (int leg = 0; leg < kNumLegs; ++leg)
      if (s.contact[leg] && nx.contact[leg])
        f += 0.5 * (forward_kinematics(model, leg, s.alpha[leg]) + forward_kinematics(model, leg, nx.alpha[leg]));
    m.v -= (ext.R_ib.transpose() * *w).cross(f / m.n_contact);
    if (m.v.allFinite()) out.push_back(m);
  }
  return out;
}

struct VelocityInit {
  SplineR3 vel;
  Vec3 b_a = Vec3::Zero();
  Vec2 b_v = Vec2::Zero();
  SolveSummary summary;
};

/// Velocity spline and biases with the rotation spline held fixed. Frame is
/// the initial IMU frame, g_I0 the gravity found there.
inline VelocityInit init_velocity_spline(const std::vector<ImuSample>& imu, const std::vector<RadarScan>& radar,
                                         const std::vector<LegVelocityMeasurement>& legs, SplineSo3 so3,
                                         const Vec3& g_I0, const Extrinsics& ext, const PipelineConfig& cfg,
                                         const std::vector<TimedVelocity>& rv, double t_hi) {
  using namespace pipeline_detail;
  const KnotGrid grid = so3.grid();
  const std::size_t n = grid.n;
  auto inside = [&](double t) {
    if (t > t_hi || !(on_or_after_start(grid, t))) return false;
    const auto loc = seg_loc(grid, t);
    return static_cast<std::size_t>(loc.seg) + 2 < n;
  };
  // Guess: nearest radar velocity per control point.
  std::vector<Vec3> ctrl(n, Vec3::Zero());
  if (!rv.empty()) {
    for (std::size_t k = 0; k < n; ++k) {
      const double tk = grid.t0 + (static_cast<double>(k) - 0.5) * grid.dt;
      const auto best = std::min_element(rv.begin(), rv.end(), [&](const auto& a, const auto& b) {
        return std::abs(a.stamp - tk) < std::abs(b.stamp - tk);
      });
      ctrl[k] = best->v;
    }
  }
  VelocityInit out;
  out.vel = SplineR3(grid.t0, grid.dt, ctrl);
  Problem prob;
  for (std::size_t k = 0; k < n; ++k) {
    prob.add_rotation(id(kSo3, k), &so3[k]);
    prob.set_fixed(id(kSo3, k));
    prob.add_euclidean(id(kVel, k), out.vel[k].data(), 3);
  }
  prob.add_euclidean(id(kBa, 0), out.b_a.data(), 3);
  std::optional<BlockId> bv;
  if (!cfg.ablation.no_bias) {
    prob.add_euclidean(id(kBv, 0), out.b_v.data(), 2);
    bv = id(kBv, 0);
  }
  const auto& w = cfg.weights;
  for (const auto& m : imu)
    if (inside(m.stamp)) prob.add_residual(accel_block(grid, m, Mat3::Identity(), g_I0, w.w_a));
  for (const auto& m : legs)
    if (inside(m.stamp)) prob.add_residual(leg_block(grid, m, Mat3::Identity(), ext, bv, w.w_leg));
  for (const auto& s : radar)
    if (!s.points.empty() && inside(s.stamp))
      prob.add_residual(radar_block(grid, s, Mat3::Identity(), ext, w.w_radar, w.cauchy_scale));
  out.summary = solve(prob, SolverOptions{cfg.init_iters});
  if (!out.summary.ok) throw PipelineError("init_velocity", out.summary.message);
  return out;
}

/// Rotates the estimator frame so that gravity is +z: x_R <- Rb^T x_R Rb,
/// x_v <- Rb^T x_v, with Rb the minimal rotation taking z to g_I0.
inline void align_to_gravity(EstimatorState& x, const Vec3& g_I0) {
  const Mat3 Rb = min_rotation_between(Vec3::UnitZ(), g_I0);
  const Quat qb(Rb);
  for (std::size_t k = 0; k < x.so3.size(); ++k) x.so3[k] = (qb.conjugate() * x.so3[k] * qb).normalized();
  for (std::size_t k = 0; k < x.vel.size(); ++k) x.vel[k] = Rb.transpose() * x.vel[k];
  x.R_align = Rb;
  x.g_global = gravity_global();
}

/// Gravity control point k = R_k^T g_global.
inline SplineR3 init_gravity_spline(const SplineSo3& so3, const Vec3& g_global) {
  std::vector<Vec3> ctrl;
  ctrl.reserve(so3.size());
  for (std::size_t k = 0; k < so3.size(); ++k) ctrl.push_back(so3.rotation_at_knot(k).transpose() * g_global);
  return SplineR3(so3.grid().t0, so3.grid().dt, ctrl);
}

/// Refines rotation knots [k_begin, k_end) by the minimal rotation taking
/// R_k g_k onto g_global; the correction axis is orthogonal to g_global so
/// yaw is untouched. Returns the applied corrections (world-frame Log).
inline std::vector<Vec3> post_optimize(SplineSo3& so3, const SplineR3& grav, const Vec3& g_global, std::size_t k_begin,
                                       std::size_t k_end) {
  std::vector<Vec3> corr;
  k_end = std::min({k_end, so3.size(), grav.size()});
  for (std::size_t k = k_begin; k < k_end; ++k) {
    const Vec3 gk = grav[k];
    if (!(gk.norm() > 0.0)) {
      corr.push_back(Vec3::Zero());
      continue;
    }
    const Mat3 dR = min_rotation_between(so3.rotation_at_knot(k) * gk, g_global);
    so3[k] = (Quat(dR) * so3[k]).normalized();
    corr.push_back(so3_log(dR));
  }
  return corr;
}

/// Dead reckoning p(t_k) = p(t_{k-1}) + int R(t) v(t) dt by trapezoid with at
/// most `step` seconds per sub-interval; p(stamps[0]) = 0. Orientation is
/// reported for the IMU frame, R(t) R_align^T.
inline Trajectory integrate_position(const SplineSo3& so3, const SplineR3& vel, const std::vector<double>& stamps,
                                     double step = 0.005, const Mat3& R_align = Mat3::Identity()) {
  if (!(step > 0.0)) throw std::invalid_argument("integrate_position: step must be positive");
  Trajectory out;
  if (stamps.empty()) return out;
  for (std::size_t k = 0; k < stamps.size(); ++k) {
    const double t = stamps[k];
    if (!so3.grid().contains(t) || !vel.grid().contains(t)) {
      std::ostringstream os;
      os.precision(17);
      os << "coverage gap at t=" << t;
      throw PipelineError("integrate_position", os.str());
    }
    if (k > 0 && !(t > stamps[k - 1])) throw PipelineError("integrate_position", "stamps must increase strictly");
  }
  const Quat q_align(R_align);
  auto rate = [&](double t) -> Vec3 { return so3.value(t) * vel.value(t); };
  Vec3 p = Vec3::Zero();
  out.push_back({stamps[0], p, (so3.quaternion(stamps[0]) * q_align.conjugate()).normalized()});
  for (std::size_t k = 1; k < stamps.size(); ++k) {
    const double a = stamps[k - 1], b = stamps[k];
    const auto m = static_cast<int>(std::ceil((b - a) / step - 1e-9));
    const double h = (b - a) / m;
    Vec3 prev = rate(a);
    for (int i = 1; i <= m; ++i) {
      const double t = i == m ? b : a + i * h;
      const Vec3 cur = rate(t);
      p += 0.5 * h * (prev + cur);
      prev = cur;
    }
    out.push_back({b, p, (so3.quaternion(b) * q_align.conjugate()).normalized()});
  }
  return out;
}

// --- incremental estimator ---------------------------------------------------

struct FrameDiagnostics {
  double stamp = 0.0;
  bool processed = false;
  bool ok = false;
  bool rolled_back = false;
  bool converged = false;
  int iterations = 0;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  std::vector<double> cost_history;
  std::size_t residuals = 0;
  std::size_t appended = 0;
  std::size_t marginalized = 0;
  std::map<std::string, double> max_residual;  // largest |raw residual| per factor at the optimum
  std::string message;
};

struct BiasSample {
  double stamp = 0.0;
  Vec3 b_a = Vec3::Zero();
  Vec2 b_v = Vec2::Zero();
};

struct InitReport {
  bool stationary = false;
  std::string gravity_method;
  Vec3 g_I0 = Vec3::Zero();
  Mat3 R_align = Mat3::Identity();
  Vec3 b_a = Vec3::Zero();
  Vec2 b_v = Vec2::Zero();
  std::size_t radar_velocities = 0;
  double t_start = 0.0;
  double t_end = 0.0;
};

inline json to_json(const FrameDiagnostics& d) {
  json mr = json::object();
  for (const auto& [k, v] : d.max_residual) mr[k] = v;
  return {{"stamp", d.stamp},
          {"processed", d.processed},
          {"ok", d.ok},
          {"rolled_back", d.rolled_back},
          {"converged", d.converged},
          {"iterations", d.iterations},
          {"initial_cost", d.initial_cost},
          {"final_cost", d.final_cost},
          {"cost_history", d.cost_history},
          {"residuals", d.residuals},
          {"appended", d.appended},
          {"marginalized", d.marginalized},
          {"max_residual", mr},
          {"message", d.message}};
}

inline json to_json(const BiasSample& b) {
  return {{"stamp", b.stamp}, {"b_a", io::to_json(b.b_a)}, {"b_v", json::array({b.b_v.x(), b.b_v.y()})}};
}

inline json to_json(const GravitySample& g) { return {{"stamp", g.stamp}, {"g", io::to_json(g.g)}}; }

inline json to_json(const InitReport& r) {
  return {{"stationary", r.stationary},     {"gravity_method", r.gravity_method},
          {"g_I0", io::to_json(r.g_I0)},     {"R_align", io::to_json(r.R_align)},
          {"b_a", io::to_json(r.b_a)},       {"b_v", json::array({r.b_v.x(), r.b_v.y()})},
          {"radar_velocities", r.radar_velocities}, {"t_start", r.t_start},
          {"t_end", r.t_end}};
}

struct RunResult {
  Trajectory trajectory;
  std::vector<GravitySample> gravity;  // IMU frame, at trajectory stamps
  std::vector<FrameDiagnostics> frames;
  std::vector<BiasSample> bias;
  InitReport init;
  std::size_t rolled_back = 0;
};

class Estimator {
 public:
  Estimator(PipelineConfig cfg, const Dataset& data) : cfg_(std::move(cfg)) {
    cfg_.validate();
    ext_ = cfg_.ext ? *cfg_.ext : data.meta.ext;
    model_ = cfg_.leg_model ? *cfg_.leg_model : data.meta.leg_model;
    imu_ = data.imu;
    radar_ = data.radar;
    for (auto& s : radar_) s.points = pipeline_detail::finite_points(s.points);
    legs_ = leg_measurements(data.leg, imu_, model_, ext_, cfg_.leg_max_gap);
  }

  const PipelineConfig& config() const { return cfg_; }
  const EstimatorState& state() const { return x_; }
  EstimatorState& mutable_state() { return x_; }
  const InitReport& init_report() const { return init_; }
  const PriorFactor& prior() const { return prior_; }
  std::size_t first_active() const { return k_lo_; }
  double last_stamp() const { return last_stamp_; }
  bool initialized() const { return initialized_; }
  const std::vector<BiasSample>& bias_log() const { return bias_log_; }

  /// Runs the initialization stages in order; errors name the stage.
  void initialize() {
    if (imu_.empty()) throw PipelineError("init_so3", "empty IMU stream");
    const double dt = cfg_.dt_knot;
    const double t0 = imu_.front().stamp;
    const double t_end = t0 + cfg_.init_window;
    if (imu_.back().stamp < t_end - 1e-9)
      throw PipelineError("init_so3", "insufficient IMU data: need " + std::to_string(cfg_.init_window) + " s");
    const std::size_t n = ctrl_count_for(t0, dt, t_end);
    init_.t_start = t0;
    init_.t_end = t_end;

    x_.so3 = init_so3(imu_, t0, dt, n, cfg_.init_iters);

    const auto rv = radar_imu_velocities(radar_, x_.so3, ext_, cfg_.ransac, t0, t_end);
    init_.radar_velocities = rv.size();
    std::vector<Vec3> vs;
    for (const auto& r : rv) vs.push_back(r.v_radar);
    init_.stationary = is_stationary(vs, cfg_.tau1, cfg_.tau2);
    if (init_.stationary) {
      g_I0_ = init_gravity_static(imu_, rv, x_.so3, cfg_.w1, cfg_.w2, t0, t_end);
      init_.gravity_method = "static";
    } else {
      log_warn("initialization window is not stationary; using dynamic gravity initialization");
      g_I0_ = init_gravity_dynamic(rv, x_.so3, imu_, t0, t_end);
      init_.gravity_method = "dynamic";
    }
    init_.g_I0 = g_I0_;

    auto vi = init_velocity_spline(imu_, radar_, legs_, x_.so3, g_I0_, ext_, cfg_, rv, t_end);
    x_.vel = vi.vel;
    x_.b_a = vi.b_a;
    x_.b_v = cfg_.ablation.no_bias ? Vec2::Zero() : vi.b_v;

    align_to_gravity(x_, g_I0_);
    x_.grav = init_gravity_spline(x_.so3, x_.g_global);

    init_.R_align = x_.R_align;
    init_.b_a = x_.b_a;
    init_.b_v = x_.b_v;
    k_lo_ = 0;
    post_done_ = 0;
    frame_ = 0;
    last_stamp_ = t_end;
    first_output_ = t_end;
    prior_ = PriorFactor{};

    // Gravity pairs over the whole stream, preintegrated once.
    for (auto [i, j] : gravity_pairs(imu_, cfg_.gravity_pair_gap, cfg_.gravity_pair_min_gap, t0,
                                     imu_.back().stamp))
      pairs_.push_back(preintegrate_gravity(imu_, i, j));
    initialized_ = true;
  }

  /// One windowed solve ending at a radar stamp. Stamps at or before the
  /// last processed one are ignored.
  FrameDiagnostics process_frame(double stamp) {
    using namespace pipeline_detail;
    if (!initialized_) throw PipelineError("process_frame", "estimator is not initialized");
    FrameDiagnostics d;
    d.stamp = stamp;
    if (!(stamp > last_stamp_)) {
      d.message = "stamp not after the last processed frame";
      return d;
    }
    d.processed = true;
    const Snapshot snap{x_, prior_, k_lo_, post_done_};

    const std::size_t before = x_.so3.size();
    while (static_cast<std::size_t>(seg_loc(x_.so3.grid(), stamp).seg) + 2 >= x_.so3.size()) {
      const double t_next = x_.so3.grid().t_max() + 0.5 * cfg_.dt_knot;
      x_.so3.extend_to(t_next);
      x_.vel.extend_to(t_next);
      x_.grav.extend_to(t_next);
    }
    d.appended = x_.so3.size() - before;

    // Bias blocks of this frame start from the previous estimate.
    Vec3 ba_prev = x_.b_a, ba_cur = x_.b_a;
    Vec2 bv_prev = x_.b_v, bv_cur = x_.b_v;

    Problem prob;
    const bool use_grav = !cfg_.ablation.no_gravity;
    const bool use_bv = !cfg_.ablation.no_bias;
    build_window(prob, stamp, ba_prev, ba_cur, bv_prev, bv_cur);
    d.residuals = prob.residuals().size();

    const auto sum = solve(prob, SolverOptions{cfg_.frame_iters});
    d.ok = sum.ok;
    d.converged = sum.converged;
    d.iterations = sum.iterations;
    d.initial_cost = sum.initial_cost;
    d.final_cost = sum.final_cost;
    d.cost_history = sum.cost_history;
    if (!sum.ok) return roll_back(d, snap, sum.message);
    record_max_residuals(prob, d);

    // Marginalize as many of the oldest control points as were appended
    // (more on the first window, which starts with the whole init span).
    const std::size_t n = x_.so3.size();
    const std::size_t n_active = n - k_lo_;
    const std::size_t nw = static_cast<std::size_t>(cfg_.window_ctrl());
    std::size_t m = std::max(d.appended, n_active > nw ? n_active - nw : 0);
    m = std::min(m, n_active - kSplineOrder);
    std::vector<BlockId> drop;
    for (std::size_t k = k_lo_; k < k_lo_ + m; ++k) {
      drop.push_back(id(kSo3, k));
      drop.push_back(id(kVel, k));
      if (use_grav) drop.push_back(id(kGrav, k));
    }
    if (use_grav) drop.push_back(id(kBa, frame_));
    if (use_bv) drop.push_back(id(kBv, frame_));
    if (!drop.empty()) {
      try {
        prior_ = marginalize(prob, drop);
      } catch (const std::exception& e) {
        return roll_back(d, snap, e.what());
      }
    }
    d.marginalized = m;

    x_.b_a = ba_cur;
    x_.b_v = use_bv ? bv_cur : Vec2::Zero();
    if (use_grav) {
      post_optimize(x_.so3, x_.grav, x_.g_global, k_lo_, k_lo_ + m);
      post_done_ = k_lo_ + m;
    }
    k_lo_ += m;
    ++frame_;
    last_stamp_ = stamp;
    bias_log_.push_back({stamp, x_.b_a, x_.b_v});
    d.message = sum.converged ? "converged" : "iteration cap";
    return d;
  }

  /// Post-optimizes the remaining knots and integrates the trajectory at the
  /// IMU stamps in [end of initialization, last processed frame].
  RunResult finish() {
    RunResult r;
    r.init = init_;
    r.bias = bias_log_;
    if (!cfg_.ablation.no_gravity) {
      post_optimize(x_.so3, x_.grav, x_.g_global, post_done_, x_.so3.size());
      post_done_ = x_.so3.size();
    }
    if (frame_ == 0) return r;
    std::vector<double> stamps;
    for (const auto& m : imu_)
      if (m.stamp >= first_output_ && m.stamp <= last_stamp_) stamps.push_back(m.stamp);
    r.trajectory = integrate_position(x_.so3, x_.vel, stamps, cfg_.integration_step, x_.R_align);
    for (double t : stamps) r.gravity.push_back({t, local_gravity(t)});
    return r;
  }

  /// Estimated local gravity in the IMU frame.
  Vec3 local_gravity(double t) const {
    if (cfg_.ablation.no_gravity) return x_.R_align * (x_.so3.value(t).transpose() * x_.g_global);
    return x_.R_align * x_.grav.value(t);
  }

  /// Radar stamps after the initialization window, in order.
  std::vector<double> frame_stamps() const {
    std::vector<double> out;
    for (const auto& s : radar_)
      if (s.stamp > last_stamp_ && (out.empty() || s.stamp > out.back())) out.push_back(s.stamp);
    return out;
  }

 private:
  struct Snapshot {
    EstimatorState x;
    PriorFactor prior;
    std::size_t k_lo, post_done;
  };

  FrameDiagnostics& roll_back(FrameDiagnostics& d, const Snapshot& s, const std::string& why) {
    x_ = s.x;
    prior_ = s.prior;
    k_lo_ = s.k_lo;
    post_done_ = s.post_done;
    d.ok = false;
    d.rolled_back = true;
    d.message = "rolled back: " + why;
    log_warn("frame at t=" + std::to_string(d.stamp) + " " + d.message);
    return d;
  }

  void build_window(Problem& prob, double stamp, Vec3& ba_prev, Vec3& ba_cur, Vec2& bv_prev, Vec2& bv_cur) {
    using namespace pipeline_detail;
    const auto& w = cfg_.weights;
    const bool use_grav = !cfg_.ablation.no_gravity;
    const bool use_s2 = use_grav && !cfg_.ablation.no_s2;
    const bool use_bv = !cfg_.ablation.no_bias;
    const KnotGrid grid = x_.so3.grid();
    const std::size_t n = grid.n;

    for (std::size_t k = k_lo_; k < n; ++k) {
      prob.add_rotation(id(kSo3, k), &x_.so3[k]);
      prob.add_euclidean(id(kVel, k), x_.vel[k].data(), 3);
      if (use_grav) prob.add_euclidean(id(kGrav, k), x_.grav[k].data(), 3);
    }
    if (k_lo_ == 0) prob.set_fixed(id(kSo3, 0));

    const BlockId ba_p = id(kBa, frame_), ba_c = id(kBa, frame_ + 1);
    const BlockId bv_p = id(kBv, frame_), bv_c = id(kBv, frame_ + 1);
    if (use_grav) {
      prob.add_euclidean(ba_p, ba_prev.data(), 3);
      prob.add_euclidean(ba_c, ba_cur.data(), 3);
      prob.add_residual(difference_block<3>("bias_a", ba_c, ba_p, w.w_bias_a));
    }
    if (use_bv) {
      prob.add_euclidean(bv_p, bv_prev.data(), 2);
      prob.add_euclidean(bv_c, bv_cur.data(), 2);
      prob.add_residual(difference_block<2>("bias_v", bv_c, bv_p, w.w_bias));
    }
    if (frame_ == 0) {
      // Initial biases enter as constants.
      if (use_grav) prob.set_fixed(ba_p);
      if (use_bv) prob.set_fixed(bv_p);
    }

    const double t_lo = grid.knot(k_lo_);
    auto inside = [&](double t) {
      if (t > stamp || t < t_lo || !on_or_after_start(grid, t)) return false;
      const auto loc = seg_loc(grid, t);
      return loc.seg >= static_cast<long>(k_lo_) && static_cast<std::size_t>(loc.seg) + 2 < n;
    };
    const Mat3& Ra = x_.R_align;
    for (std::size_t i = first_at_or_after(imu_, t_lo); i < imu_.size() && imu_[i].stamp <= stamp; ++i) {
      if (!inside(imu_[i].stamp)) continue;
      prob.add_residual(gyro_block(grid, imu_[i], Ra, w.w_omega));
      if (use_s2) prob.add_residual(s2_block(grid, imu_[i].stamp, w.w_s2));
    }
    if (use_grav) {
      auto it = std::lower_bound(pairs_.begin(), pairs_.end(), t_lo,
                                 [](const GravityPreintegration& p, double x) { return p.t_i < x; });
      for (; it != pairs_.end() && it->t_i <= stamp; ++it)
        if (inside(it->t_i) && inside(it->t_j)) prob.add_residual(gravity_block(grid, *it, ba_c, Ra, w.w_grav));
    }
    const std::optional<BlockId> bv = use_bv ? std::optional(bv_c) : std::nullopt;
    for (std::size_t i = first_at_or_after(legs_, t_lo); i < legs_.size() && legs_[i].stamp <= stamp; ++i)
      if (inside(legs_[i].stamp)) prob.add_residual(leg_block(grid, legs_[i], Ra, ext_, bv, w.w_leg));
    for (std::size_t i = first_at_or_after(radar_, t_lo); i < radar_.size() && radar_[i].stamp <= stamp; ++i)
      if (!radar_[i].points.empty() && inside(radar_[i].stamp))
        prob.add_residual(radar_block(grid, radar_[i], Ra, ext_, w.w_radar, w.cauchy_scale));
    prob.add_residual(end_tail_block(n, w.w_end));
    if (!prior_.empty()) prob.add_residual(prior_.as_residual(w.w_prior));
  }

  static void record_max_residuals(const Problem& prob, FrameDiagnostics& d) {
    Eigen::VectorXd raw;
    for (const auto& rb : prob.residuals()) {
      if (!solver_detail::evaluate(prob, rb, raw)) continue;
      auto& v = d.max_residual[rb.name];
      v = std::max(v, raw.lpNorm<Eigen::Infinity>());
    }
  }

  PipelineConfig cfg_;
  Extrinsics ext_;
  LegModel model_;
  std::vector<ImuSample> imu_;
  std::vector<RadarScan> radar_;
  std::vector<LegVelocityMeasurement> legs_;
  std::vector<GravityPreintegration> pairs_;

  EstimatorState x_;
  Vec3 g_I0_ = Vec3::Zero();
  InitReport init_;
  PriorFactor prior_;
  std::size_t k_lo_ = 0;
  std::size_t post_done_ = 0;
  std::size_t frame_ = 0;
  double last_stamp_ = 0.0;
  double first_output_ = 0.0;
  bool initialized_ = false;
  std::vector<BiasSample> bias_log_;
};

/// Drops non-finite measurements; returns how many were removed.
inline std::size_t sanitize(Dataset& d) {
  std::size_t removed = 0;
  auto drop_if = [&](auto& v, auto bad) {
    const auto before = v.size();
    v.erase(std::remove_if(v.begin(), v.end(), bad), v.end());
    removed += before - v.size();
  };
  drop_if(d.imu, [](const ImuSample& s) {
    return !std::isfinite(s.stamp) || !s.gyro.allFinite() || !s.accel.allFinite() || !s.orient.coeffs().allFinite();
  });
  drop_if(d.leg, [](const LegSample& s) {
    bool bad = !std::isfinite(s.stamp);
    for (const auto& a : s.alpha) bad = bad || !a.allFinite();
    if (s.alpha_dot)
      for (const auto& a : *s.alpha_dot) bad = bad || !a.allFinite();
    return bad;
  });
  drop_if(d.radar, [](const RadarScan& s) { return !std::isfinite(s.stamp); });
  return removed;
}

/// Full run: initialization, one frame per radar stamp, post-optimization and integration.
inline RunResult run(const Dataset& data, const PipelineConfig& cfg) {
  Dataset clean = data;
  if (const auto n = sanitize(clean)) log_warn("dropped " + std::to_string(n) + " non-finite measurements");
  Estimator est(cfg, clean);
  est.initialize();
  std::vector<FrameDiagnostics> frames;
  for (double t : est.frame_stamps()) frames.push_back(est.process_frame(t));
  RunResult r = est.finish();
  r.frames = std::move(frames);
  for (const auto& f : r.frames) r.rolled_back += f.rolled_back ? 1 : 0;
  return r;
}

}  // namespace garlileo
