#pragma once

// Trajectory and gravity evaluation: rigid alignment, APE, RPE and the mean
// angular error of an estimated local-gravity log.

#include "garlileo/dataset.hpp"
#include "garlileo/lie.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

namespace garlileo {

struct GravitySample {
  double stamp = 0.0;
  Vec3 g = Vec3::Zero();  // IMU frame
};

struct RigidTransform {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return R * p + t; }
};

struct Association {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (est index, gt index)
};

struct AlignmentResult {
  RigidTransform transform;  // maps gt onto est
  Association association;
};

struct MetricReport {
  double ape_t = 0.0;   // m
  double ape_r = 0.0;   // deg
  double rpe_t = 0.0;   // m/m
  double rpe_r = 0.0;   // deg/m
  double ape_z = 0.0;   // m
  double ape_xy = 0.0;  // m
  double gravity_deg = 0.0;
  std::size_t pairs = 0;
  std::size_t rpe_segments = 0;
  std::size_t gravity_samples = 0;
  std::size_t gravity_skipped = 0;
};

inline json to_json(const MetricReport& r) {
  return {{"APE_t", r.ape_t},         {"APE_r", r.ape_r},
          {"RPE_t", r.rpe_t},         {"RPE_r", r.rpe_r},
          {"APE_z", r.ape_z},         {"APE_xy", r.ape_xy},
          {"gravity_deg", r.gravity_deg}, {"pairs", r.pairs},
          {"rpe_segments", r.rpe_segments}, {"gravity_samples", r.gravity_samples},
          {"gravity_skipped", r.gravity_skipped}};
}

/// Geodesic angle of a rotation, radians in [0, pi].
inline double quat_angle(const Quat& q) { return 2.0 * std::atan2(q.vec().norm(), std::abs(q.w())); }

/// Angle between two vectors, radians. Independent of their norms.
inline double vector_angle(const Vec3& a, const Vec3& b) { return std::atan2(a.cross(b).norm(), a.dot(b)); }

inline constexpr double kRadToDeg = 180.0 / M_PI;

/// Nearest-stamp association within max_dt seconds.
inline Association associate(const Trajectory& est, const Trajectory& gt, double max_dt = 0.01) {
  Association a;
  if (gt.empty()) return a;
  for (std::size_t i = 0; i < est.size(); ++i) {
    const double t = est[i].stamp;
    auto it = std::lower_bound(gt.begin(), gt.end(), t,
                               [](const TrajectoryPoint& p, double s) { return p.stamp < s; });
    std::size_t best = gt.size();
    double best_dt = max_dt;
    for (auto cand : {it, it == gt.begin() ? gt.end() : std::prev(it)}) {
      if (cand == gt.end()) continue;
      const double d = std::abs(cand->stamp - t);
      if (d <= best_dt) {
        best_dt = d;
        best = static_cast<std::size_t>(cand - gt.begin());
      }
    }
    if (best < gt.size()) a.pairs.emplace_back(i, best);
  }
  return a;
}

/// Closed-form rigid (no scale) least-squares alignment of gt onto est.
inline AlignmentResult align_rigid(const Trajectory& est, const Trajectory& gt, double max_dt = 0.01) {
  AlignmentResult out;
  out.association = associate(est, gt, max_dt);
  const auto& pairs = out.association.pairs;
  if (pairs.size() < 3)
    throw std::invalid_argument("align_rigid: need at least 3 associated pairs, got " + std::to_string(pairs.size()));
  Vec3 mu_e = Vec3::Zero(), mu_g = Vec3::Zero();
  for (auto [i, j] : pairs) {
    mu_e += est[i].position;
    mu_g += gt[j].position;
  }
  mu_e /= static_cast<double>(pairs.size());
  mu_g /= static_cast<double>(pairs.size());
  Mat3 C = Mat3::Zero();
  for (auto [i, j] : pairs) C += (est[i].position - mu_e) * (gt[j].position - mu_g).transpose();
  Eigen::JacobiSVD<Mat3> svd(C, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 S = Mat3::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) S(2, 2) = -1.0;
  out.transform.R = svd.matrixU() * S * svd.matrixV().transpose();
  out.transform.t = mu_e - out.transform.R * mu_g;
  return out;
}

inline Trajectory apply_transform(const Trajectory& traj, const RigidTransform& T) {
  Trajectory out = traj;
  const Quat qR(T.R);
  for (auto& p : out) {
    p.position = T.apply(p.position);
    p.orientation = (qR * p.orientation).normalized();
  }
  return out;
}

/// Absolute errors of est against an already aligned gt.
inline MetricReport compute_ape(const Trajectory& est, const Trajectory& gt_aligned, double max_dt = 0.01) {
  const auto assoc = associate(est, gt_aligned, max_dt);
  if (assoc.pairs.empty()) throw std::invalid_argument("compute_ape: no associated poses");
  MetricReport r;
  double st = 0.0, sr = 0.0, sz = 0.0, sxy = 0.0;
  for (auto [i, j] : assoc.pairs) {
    const Vec3 e = est[i].position - gt_aligned[j].position;
    const double ang = quat_angle(gt_aligned[j].orientation.conjugate() * est[i].orientation) * kRadToDeg;
    st += e.squaredNorm();
    sz += e.z() * e.z();
    sxy += e.x() * e.x() + e.y() * e.y();
    sr += ang * ang;
  }
  const double n = static_cast<double>(assoc.pairs.size());
  r.ape_t = std::sqrt(st / n);
  r.ape_r = std::sqrt(sr / n);
  r.ape_z = std::sqrt(sz / n);
  r.ape_xy = std::sqrt(sxy / n);
  r.pairs = assoc.pairs.size();
  return r;
}

/// Relative errors over consecutive, non-overlapping gt arc segments of
/// length delta, normalized per meter travelled.
inline void compute_rpe(const Trajectory& est, const Trajectory& gt_aligned, MetricReport& r, double delta = 1.0,
                        double max_dt = 0.01) {
  if (!(delta > 0.0)) throw std::invalid_argument("compute_rpe: delta must be positive");
  const auto assoc = associate(est, gt_aligned, max_dt);
  if (assoc.pairs.empty()) throw std::invalid_argument("compute_rpe: no associated poses");
  const auto& P = assoc.pairs;
  double st = 0.0, sr = 0.0;
  std::size_t count = 0, s = 0;
  double arc = 0.0;
  for (std::size_t k = 1; k < P.size(); ++k) {
    arc += (gt_aligned[P[k].second].position - gt_aligned[P[k - 1].second].position).norm();
    if (arc < delta) continue;
    const auto& e0 = est[P[s].first];
    const auto& e1 = est[P[k].first];
    const auto& g0 = gt_aligned[P[s].second];
    const auto& g1 = gt_aligned[P[k].second];
    const Quat dq_e = e0.orientation.conjugate() * e1.orientation;
    const Quat dq_g = g0.orientation.conjugate() * g1.orientation;
    const Vec3 dp_e = e0.orientation.conjugate() * (e1.position - e0.position);
    const Vec3 dp_g = g0.orientation.conjugate() * (g1.position - g0.position);
    // Error pose (dT_g)^-1 dT_e.
    const Vec3 et = dq_g.conjugate() * (dp_e - dp_g);
    const double er = quat_angle(dq_g.conjugate() * dq_e) * kRadToDeg;
    st += (et.norm() / arc) * (et.norm() / arc);
    sr += (er / arc) * (er / arc);
    ++count;
    s = k;
    arc = 0.0;
  }
  r.rpe_segments = count;
  r.rpe_t = count ? std::sqrt(st / static_cast<double>(count)) : 0.0;
  r.rpe_r = count ? std::sqrt(sr / static_cast<double>(count)) : 0.0;
}

struct GravityErrorResult {
  double mean_deg = 0.0;
  std::size_t used = 0;
  std::size_t skipped = 0;
  std::vector<std::pair<double, double>> series;  // (stamp, deg)
};

/// Mean angle between estimated local gravity and R_t^T g0, with R_t the
/// aligned gt orientation interpolated by slerp. Stamps outside gt coverage
/// or inside gaps wider than max_gap are skipped.
inline GravityErrorResult gravity_error(const std::vector<GravitySample>& est, const Trajectory& gt_aligned,
                                        double max_gap = 0.1) {
  GravityErrorResult out;
  const Vec3 g0 = gravity_global();
  double sum = 0.0;
  for (const auto& s : est) {
    auto it = std::lower_bound(gt_aligned.begin(), gt_aligned.end(), s.stamp,
                               [](const TrajectoryPoint& p, double t) { return p.stamp < t; });
    if (it == gt_aligned.end() || s.g.norm() == 0.0) {
      ++out.skipped;
      continue;
    }
    Quat q;
    if (it->stamp == s.stamp) {
      q = it->orientation;
    } else if (it == gt_aligned.begin() || it->stamp - std::prev(it)->stamp > max_gap) {
      ++out.skipped;
      continue;
    } else {
      const auto& a = *std::prev(it);
      const double f = (s.stamp - a.stamp) / (it->stamp - a.stamp);
      q = a.orientation.slerp(f, it->orientation);
    }
    const Vec3 g_star = q.conjugate() * g0;
    const double deg = vector_angle(s.g, g_star) * kRadToDeg;
    out.series.emplace_back(s.stamp, deg);
    sum += deg;
    ++out.used;
  }
  out.mean_deg = out.used ? sum / static_cast<double>(out.used) : 0.0;
  return out;
}

struct EvalOptions {
  bool align = true;
  double rpe_delta = 1.0;
  double max_dt = 0.01;
};

/// Full report: optional alignment, APE, RPE and (if given) gravity error.
inline MetricReport evaluate(const Trajectory& est, const Trajectory& gt, const std::vector<GravitySample>* gravity,
                             const EvalOptions& opt = {}, GravityErrorResult* gravity_detail = nullptr) {
  Trajectory gt_aligned = gt;
  if (opt.align) gt_aligned = apply_transform(gt, align_rigid(est, gt, opt.max_dt).transform);
  MetricReport r = compute_ape(est, gt_aligned, opt.max_dt);
  compute_rpe(est, gt_aligned, r, opt.rpe_delta, opt.max_dt);
  if (gravity) {
    auto ge = gravity_error(*gravity, gt_aligned);
    r.gravity_deg = ge.mean_deg;
    r.gravity_samples = ge.used;
    r.gravity_skipped = ge.skipped;
    if (gravity_detail) *gravity_detail = std::move(ge);
  }
  return r;
}

}  // namespace garlileo
