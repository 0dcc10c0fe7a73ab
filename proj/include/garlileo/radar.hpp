#pragma once

// Doppler ego-velocity: a static target at p seen by a sensor moving with
// velocity v reports the radial velocity -(p/|p|) . v. Three or more
// non-coplanar targets fix v; RANSAC over minimal triples rejects moving
// targets before a least-squares refit on the inliers.

#include "garlileo/lie.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace garlileo {

struct RadarPoint {
  Vec3 p = Vec3::Zero();  // position in radar frame (m)
  double doppler = 0.0;   // radial velocity (m/s)
  std::optional<double> intensity;
};

struct RadarScan {
  double stamp = 0.0;
  std::vector<RadarPoint> points;
};

struct RansacConfig {
  double threshold = 0.2;  // inlier gate on |predicted - measured| (m/s)
  std::size_t min_inliers = 5;
  std::size_t max_iters = 200;
  double confidence = 0.99;
  double max_cond = 1e4;  // singular-value ratio beyond which M is rank deficient
  std::uint64_t seed = 0;
};

struct EgoVelocityEstimate {
  double stamp = 0.0;
  Vec3 v = Vec3::Zero();
  std::vector<std::size_t> inlier_indices;
  double residual_rms = 0.0;
  bool valid = false;
  std::string reason;
};

inline double doppler_predict(const Vec3& p, const Vec3& v) {
  const double r = p.norm();
  if (!(r > 0.0)) throw std::invalid_argument("doppler_predict: zero-norm point");
  return -p.dot(v) / r;
}

namespace radar_detail {

// Singular-value ratio of a direction matrix; infinity when rank deficient.
template <typename Derived>
double condition_number(const Eigen::MatrixBase<Derived>& m) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  const auto& s = svd.singularValues();
  if (s.size() < 3 || s(2) <= 0.0) return std::numeric_limits<double>::infinity();
  return s(0) / s(2);
}

struct LsqResult {
  Vec3 v = Vec3::Zero();
  double cond = std::numeric_limits<double>::infinity();
};

inline LsqResult solve_lsq(const std::vector<Vec3>& dirs, const std::vector<double>& dopplers,
                           const std::vector<std::size_t>& idx) {
  Eigen::MatrixXd m(idx.size(), 3);
  Eigen::VectorXd y(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    m.row(static_cast<Eigen::Index>(r)) = -dirs[idx[r]].transpose();
    y(static_cast<Eigen::Index>(r)) = dopplers[idx[r]];
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  LsqResult out;
  const auto& s = svd.singularValues();
  out.cond = (s.size() == 3 && s(2) > 0.0) ? s(0) / s(2) : std::numeric_limits<double>::infinity();
  out.v = svd.solve(y);
  return out;
}

}  // namespace radar_detail

inline EgoVelocityEstimate estimate_ego_velocity(const RadarScan& scan, const RansacConfig& cfg) {
  EgoVelocityEstimate est;
  est.stamp = scan.stamp;

  std::vector<Vec3> dirs;
  std::vector<double> dopplers;
  std::vector<std::size_t> source;  // index into scan.points
  for (std::size_t i = 0; i < scan.points.size(); ++i) {
    const double r = scan.points[i].p.norm();
    if (!(r > 0.0) || !std::isfinite(scan.points[i].doppler)) continue;
    dirs.push_back(scan.points[i].p / r);
    dopplers.push_back(scan.points[i].doppler);
    source.push_back(i);
  }
  const std::size_t n = dirs.size();
  if (n < 3) {
    est.reason = "fewer than 3 usable points";
    return est;
  }
  {
    Eigen::MatrixXd all(n, 3);
    for (std::size_t i = 0; i < n; ++i) all.row(static_cast<Eigen::Index>(i)) = dirs[i].transpose();
    if (radar_detail::condition_number(all) > cfg.max_cond) {
      est.reason = "degenerate geometry: directions do not span 3-D";
      return est;
    }
  }

  auto count_inliers = [&](const Vec3& v, std::vector<std::size_t>* out) {
    std::size_t count = 0;
    double sq = 0.0;
    if (out) out->clear();
    for (std::size_t i = 0; i < n; ++i) {
      const double e = -dirs[i].dot(v) - dopplers[i];
      if (std::abs(e) <= cfg.threshold) {
        ++count;
        sq += e * e;
        if (out) out->push_back(i);
      }
    }
    return std::make_pair(count, sq);
  };

  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::size_t best_count = 0;
  double best_sq = std::numeric_limits<double>::infinity();
  Vec3 best_v = Vec3::Zero();
  std::size_t needed = cfg.max_iters;
  for (std::size_t it = 0; it < needed && it < cfg.max_iters; ++it) {
    std::size_t a = pick(rng), b = pick(rng), c = pick(rng);
    if (a == b || b == c || a == c) continue;
    Mat3 m;
    m.row(0) = -dirs[a].transpose();
    m.row(1) = -dirs[b].transpose();
    m.row(2) = -dirs[c].transpose();
    if (radar_detail::condition_number(m) > cfg.max_cond) continue;
    const Vec3 v = m.fullPivLu().solve(Vec3(dopplers[a], dopplers[b], dopplers[c]));
    const auto [count, sq] = count_inliers(v, nullptr);
    if (count > best_count || (count == best_count && sq < best_sq)) {
      best_count = count;
      best_sq = sq;
      best_v = v;
      const double w = static_cast<double>(count) / static_cast<double>(n);
      const double p_good = std::pow(w, 3);
      if (p_good >= 1.0 - 1e-12) {
        needed = it + 1;
      } else if (p_good > 0.0) {
        const double k = std::log(1.0 - cfg.confidence) / std::log(1.0 - p_good);
        needed = std::min<std::size_t>(cfg.max_iters, static_cast<std::size_t>(std::ceil(k)));
      }
    }
  }
  if (best_count < 3) {
    est.reason = "no consistent minimal hypothesis";
    return est;
  }

  // Refit on inliers; re-gate against the refit until the set is stable.
  std::vector<std::size_t> inliers;
  count_inliers(best_v, &inliers);
  Vec3 v = best_v;
  for (int round = 0; round < 5 && inliers.size() >= 3; ++round) {
    const auto fit = radar_detail::solve_lsq(dirs, dopplers, inliers);
    if (fit.cond > cfg.max_cond) {
      est.reason = "inlier directions rank deficient";
      return est;
    }
    v = fit.v;
    std::vector<std::size_t> next;
    count_inliers(v, &next);
    if (next == inliers) break;
    inliers = std::move(next);
  }
  std::vector<std::size_t> final_inliers;
  const auto [count, sq] = count_inliers(v, &final_inliers);

  est.v = v;
  est.residual_rms = count > 0 ? std::sqrt(sq / static_cast<double>(count)) : 0.0;
  for (auto i : final_inliers) est.inlier_indices.push_back(source[i]);
  if (count < std::max<std::size_t>(cfg.min_inliers, 3)) {
    est.reason = "too few inliers";
    return est;
  }
  est.valid = true;
  return est;
}

}  // namespace garlileo
