#pragma once

// Synthetic multi-sensor datasets. Ground truth is an analytic loop whose
// phase follows a C2 speed profile; derivatives come from second-order jets
// so the IMU stream is an exact inverse of the inertial residuals.

#include "garlileo/dataset.hpp"
#include "garlileo/leg.hpp"
#include "garlileo/radar.hpp"
#include "garlileo/types.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace garlileo {

// --- second-order jet -----------------------------------------------------

struct Jet {
  double v = 0.0, d = 0.0, dd = 0.0;
};

inline Jet operator+(Jet a, Jet b) { return {a.v + b.v, a.d + b.d, a.dd + b.dd}; }
inline Jet operator-(Jet a, Jet b) { return {a.v - b.v, a.d - b.d, a.dd - b.dd}; }
inline Jet operator-(Jet a) { return {-a.v, -a.d, -a.dd}; }
inline Jet operator*(Jet a, Jet b) { return {a.v * b.v, a.d * b.v + a.v * b.d, a.dd * b.v + 2.0 * a.d * b.d + a.v * b.dd}; }
inline Jet operator*(double s, Jet a) { return {s * a.v, s * a.d, s * a.dd}; }
inline Jet operator+(double s, Jet a) { return {s + a.v, a.d, a.dd}; }
inline Jet sin(Jet a) {
  const double s = std::sin(a.v), c = std::cos(a.v);
  return {s, c * a.d, -s * a.d * a.d + c * a.dd};
}
inline Jet cos(Jet a) {
  const double s = std::sin(a.v), c = std::cos(a.v);
  return {c, -s * a.d, -c * a.d * a.d - s * a.dd};
}

// --- configuration --------------------------------------------------------

struct SlipEvent {
  double start = 0.0;
  double duration = 0.0;
  Vec2 velocity = Vec2::Zero();  // foot drift in the body frame, m/s
};

struct NoiseConfig {
  double gyro_sigma = 0.002;       // rad/s
  double accel_sigma = 0.05;       // m/s^2
  double impact_magnitude = 5.0;   // m/s^2
  double impact_probability = 0.3; // per touchdown
  double doppler_sigma = 0.03;     // m/s
  double outlier_fraction = 0.1;
  double outlier_offset = 1.0;     // m/s, offsets drawn from [offset, 2 offset]
  double orient_sigma = 0.005;     // rad
  double accel_bias_rw = 1e-4;     // m/s^2/sqrt(s)
  double gyro_bias_rw = 1e-5;      // rad/s/sqrt(s)
  Vec3 accel_bias_init = Vec3(0.02, -0.015, 0.03);
  double joint_sigma = 0.0;        // rad
  std::vector<SlipEvent> slips;
  std::uint64_t seed = 0;

  static NoiseConfig zero() {
    NoiseConfig n;
    n.gyro_sigma = n.accel_sigma = n.impact_magnitude = n.impact_probability = 0.0;
    n.doppler_sigma = n.outlier_fraction = n.orient_sigma = 0.0;
    n.accel_bias_rw = n.gyro_bias_rw = n.joint_sigma = 0.0;
    n.accel_bias_init = Vec3::Zero();
    return n;
  }

  void validate() const {
    for (double s : {gyro_sigma, accel_sigma, impact_magnitude, doppler_sigma, outlier_offset, orient_sigma,
                     accel_bias_rw, gyro_bias_rw, joint_sigma})
      if (!(s >= 0.0)) throw std::invalid_argument("NoiseConfig: sigmas must be nonnegative");
    for (double f : {impact_probability, outlier_fraction})
      if (!(f >= 0.0 && f <= 1.0)) throw std::invalid_argument("NoiseConfig: fractions must lie in [0,1]");
  }
};

inline json to_json(const NoiseConfig& n) {
  json slips = json::array();
  for (const auto& s : n.slips)
    slips.push_back({{"start", s.start}, {"duration", s.duration}, {"velocity", {s.velocity.x(), s.velocity.y()}}});
  return {{"gyro_sigma", n.gyro_sigma}, {"accel_sigma", n.accel_sigma}, {"impact_magnitude", n.impact_magnitude},
          {"impact_probability", n.impact_probability}, {"doppler_sigma", n.doppler_sigma},
          {"outlier_fraction", n.outlier_fraction}, {"outlier_offset", n.outlier_offset},
          {"orient_sigma", n.orient_sigma}, {"accel_bias_rw", n.accel_bias_rw}, {"gyro_bias_rw", n.gyro_bias_rw},
          {"accel_bias_init", io::to_json(n.accel_bias_init)}, {"joint_sigma", n.joint_sigma},
          {"slips", slips}, {"seed", n.seed}};
}

inline NoiseConfig noise_from_json(const json& j, NoiseConfig n = {}) {
  auto num = [&](const char* key, double& dst) {
    if (j.contains(key)) dst = j.at(key).get<double>();
  };
  num("gyro_sigma", n.gyro_sigma);
  num("accel_sigma", n.accel_sigma);
  num("impact_magnitude", n.impact_magnitude);
  num("impact_probability", n.impact_probability);
  num("doppler_sigma", n.doppler_sigma);
  num("outlier_fraction", n.outlier_fraction);
  num("outlier_offset", n.outlier_offset);
  num("orient_sigma", n.orient_sigma);
  num("accel_bias_rw", n.accel_bias_rw);
  num("gyro_bias_rw", n.gyro_bias_rw);
  num("joint_sigma", n.joint_sigma);
  if (j.contains("accel_bias_init")) n.accel_bias_init = io::vec3(j["accel_bias_init"]);
  if (j.contains("slips")) {
    n.slips.clear();
    for (const auto& s : j["slips"])
      n.slips.push_back({s.at("start").get<double>(), s.at("duration").get<double>(),
                         Vec2(s.at("velocity")[0].get<double>(), s.at("velocity")[1].get<double>())});
  }
  if (j.contains("seed")) n.seed = j["seed"].get<std::uint64_t>();
  n.validate();
  return n;
}

struct GaitConfig {
  double duty = 0.6;
  double frequency = 2.0;  // Hz
  double swing_height = 0.08;
  double base_height = 0.5;
};

struct ScenarioSpec {
  std::string name;
  std::string description;
  double duration = 60.0;
  double t_start = 2.5;   // motion begins
  double t_ramp = 5.0;    // length of each speed ramp
  double t_settle = 2.0;  // stationary tail
  double loops = 1.0;
  double a = 7.0, b = 5.5;  // ellipse semi-axes (m)
  double z_amp = 0.0;       // z = z_amp (1 - cos phase)
  double pitch_amp = 0.0;   // pitch follows the slope: -pitch_amp sin(phase)
  double sway_roll = 0.03;  // roll = sway_roll sin(3 phase)
  double sway_pitch = 0.02; // added pitch = sway_pitch sin(2 phase)
  std::vector<SlipEvent> slips;
  double imu_rate = 100.0, radar_rate = 20.0, leg_rate = 150.0;
  double landmark_density = 0.06;  // per m^3
  double landmark_margin = 8.0;    // m around the path bounding box
  std::size_t max_radar_points = 64;
  GaitConfig gait;
  Extrinsics ext = default_extrinsics();
  LegModel leg_model;

  static Extrinsics default_extrinsics() {
    Extrinsics e;
    e.R_ir = so3_exp(Vec3(0.0, -0.05, 0.0));
    e.t_ir = Vec3(0.25, 0.0, 0.08);
    e.R_ib = Mat3::Identity();
    e.t_ib = Vec3(-0.05, 0.0, -0.02);
    return e;
  }
};

inline std::vector<std::string> scenario_names() { return {"flat_loop", "stair_loop", "slip_zone"}; }

inline ScenarioSpec scenario_spec(const std::string& name) {
  ScenarioSpec s;
  s.name = name;
  if (name == "flat_loop") {
    s.description = "level elliptic loop, 60 s, about 40 m";
    s.duration = 60.0;
    s.a = 7.0;
    s.b = 5.5;
  } else if (name == "stair_loop") {
    s.description = "elliptic loop with a 3 m climb and descent, 120 s, about 60 m";
    s.duration = 120.0;
    s.a = 11.0;
    s.b = 8.0;
    s.z_amp = 1.5;
    s.pitch_amp = std::atan(1.5 / 9.5);
  } else if (name == "slip_zone") {
    s.description = "level loop with one 5 s foot-slip event of 0.05 m/s along body x, 60 s";
    s.duration = 60.0;
    s.a = 5.0;
    s.b = 4.0;
    s.slips.push_back({25.0, 5.0, Vec2(0.05, 0.0)});
  } else {
    std::string list;
    for (const auto& n : scenario_names()) list += (list.empty() ? "" : ", ") + n;
    throw std::invalid_argument("unknown scenario '" + name + "'; available: " + list);
  }
  return s;
}

// --- ground truth ---------------------------------------------------------

struct TruthState {
  double t = 0.0;
  Vec3 p = Vec3::Zero();
  Vec3 v_world = Vec3::Zero();
  Vec3 a_world = Vec3::Zero();
  Mat3 R = Mat3::Identity();  // IMU to world
  Vec3 omega = Vec3::Zero();  // body rate
  Vec3 v_body = Vec3::Zero();
  Vec3 vdot_body = Vec3::Zero();
  double envelope = 0.0;  // normalized speed in [0,1]
};

class GroundTruth {
 public:
  explicit GroundTruth(ScenarioSpec spec) : s_(std::move(spec)) {
    t1_ = s_.duration - s_.t_settle - s_.t_ramp;
    if (!(t1_ >= s_.t_start + s_.t_ramp)) throw std::invalid_argument("GroundTruth: duration too short for ramps");
    const double phase_end = (t1_ - s_.t_start);  // two half ramps plus cruise
    omega_ = 2.0 * M_PI * s_.loops / phase_end;
  }

  const ScenarioSpec& spec() const { return s_; }

  /// Loop phase as a jet in time.
  Jet phase(double t) const {
    const double T = s_.t_ramp;
    auto S = [](double x) { return x * x * x * (10.0 + x * (-15.0 + 6.0 * x)); };
    auto dS = [](double x) { return 30.0 * x * x * (1.0 - x) * (1.0 - x); };
    auto I = [](double x) { return x * x * x * x * (2.5 + x * (-3.0 + x)); };
    Jet f;
    if (t <= s_.t_start) {
      f = {0.0, 0.0, 0.0};
    } else if (t < s_.t_start + T) {
      const double x = (t - s_.t_start) / T;
      f = {T * I(x), S(x), dS(x) / T};
    } else if (t < t1_) {
      f = {0.5 * T + (t - s_.t_start - T), 1.0, 0.0};
    } else if (t < t1_ + T) {
      const double y = (t - t1_) / T;
      f = {0.5 * T + (t1_ - s_.t_start - T) + T * (y - I(y)), 1.0 - S(y), -dS(y) / T};
    } else {
      f = {t1_ - s_.t_start, 0.0, 0.0};
    }
    return omega_ * f;
  }

  double envelope(double t) const { return phase(t).d / omega_; }

  TruthState state(double t) const {
    const Jet th = phase(t);
    const Jet px = s_.a * sin(th);
    const Jet py = s_.b * (1.0 + (-1.0) * cos(th));
    const Jet pz = s_.z_amp * (1.0 + (-1.0) * cos(th));
    const Jet yaw = th;
    const Jet pitch = (-s_.pitch_amp) * sin(th) + s_.sway_pitch * sin(2.0 * th);
    const Jet roll = s_.sway_roll * sin(3.0 * th);

    TruthState out;
    out.t = t;
    out.p = Vec3(px.v, py.v, pz.v);
    out.v_world = Vec3(px.d, py.d, pz.d);
    out.a_world = Vec3(px.dd, py.dd, pz.dd);
    const Mat3 Rz = so3_exp(yaw.v * Vec3::UnitZ());
    const Mat3 Ry = so3_exp(pitch.v * Vec3::UnitY());
    const Mat3 Rx = so3_exp(roll.v * Vec3::UnitX());
    out.R = Rz * Ry * Rx;
    out.omega = Rx.transpose() * Ry.transpose() * Vec3(0, 0, yaw.d) + Rx.transpose() * Vec3(0, pitch.d, 0) +
                Vec3(roll.d, 0, 0);
    out.v_body = out.R.transpose() * out.v_world;
    out.vdot_body = out.R.transpose() * out.a_world - out.omega.cross(out.v_body);
    out.envelope = th.d / omega_;
    return out;
  }

 private:
  ScenarioSpec s_;
  double t1_ = 0.0;
  double omega_ = 0.0;
};

// --- measurement models ---------------------------------------------------

/// Exact specific force of a body in the given state, bias excluded.
inline Vec3 specific_force(const TruthState& x) {
  return x.omega.cross(x.v_body) + x.vdot_body - x.R.transpose() * gravity_global();
}

inline std::vector<ImuSample> synth_imu(const GroundTruth& gt, const NoiseConfig& noise,
                                        const std::vector<double>& impact_times = {}) {
  const auto& s = gt.spec();
  std::mt19937_64 rng(noise.seed * 0x9E3779B97F4A7C15ULL + 1);
  std::normal_distribution<double> n01(0.0, 1.0);
  auto gauss = [&](double sigma) { return sigma > 0.0 ? Vec3(sigma * n01(rng), sigma * n01(rng), sigma * n01(rng)) : Vec3::Zero(); };
  const double dt = 1.0 / s.imu_rate;
  const auto n = static_cast<std::size_t>(std::floor(s.duration * s.imu_rate + 1e-9)) + 1;

  std::vector<Vec3> spikes(n, Vec3::Zero());
  if (noise.impact_magnitude > 0.0 && noise.impact_probability > 0.0) {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (double t : impact_times) {
      const double draw = u01(rng);
      Vec3 dir(0.3 * n01(rng), 0.3 * n01(rng), 1.0);
      if (draw >= noise.impact_probability) continue;
      const auto k = static_cast<std::size_t>(std::llround(t * s.imu_rate));
      if (k < n) spikes[k] += noise.impact_magnitude * dir.normalized();
    }
  }

  std::vector<ImuSample> out;
  out.reserve(n);
  Vec3 ba = noise.accel_bias_init, bg = Vec3::Zero();
  for (std::size_t k = 0; k < n; ++k) {
    const double t = static_cast<double>(k) * dt;
    const TruthState x = gt.state(t);
    ImuSample m;
    m.stamp = t;
    m.gyro = x.omega + bg + gauss(noise.gyro_sigma);
    m.accel = specific_force(x) + ba + gauss(noise.accel_sigma) + spikes[k];
    m.orient = Quat(x.R * so3_exp(gauss(noise.orient_sigma))).normalized();
    out.push_back(m);
    ba += gauss(noise.accel_bias_rw * std::sqrt(dt));
    bg += gauss(noise.gyro_bias_rw * std::sqrt(dt));
  }
  return out;
}

/// Static landmarks scattered with a Poisson count in a box around the path,
/// keeping a clear lane of 1 m around the path itself.
inline std::vector<Vec3> make_landmarks(const GroundTruth& gt, std::uint64_t seed) {
  const auto& s = gt.spec();
  std::vector<Vec3> path;
  for (double t = 0.0; t <= s.duration; t += 0.05) path.push_back(gt.state(t).p);
  Vec3 lo = path.front(), hi = path.front();
  for (const auto& p : path) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  lo -= Vec3(s.landmark_margin, s.landmark_margin, 1.0);
  hi += Vec3(s.landmark_margin, s.landmark_margin, 3.0);
  const Vec3 ext = hi - lo;
  std::mt19937_64 rng(seed * 0xD1B54A32D192ED03ULL + 2);
  std::poisson_distribution<long> count(s.landmark_density * ext.prod());
  const long n = count(rng);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::vector<Vec3> out;
  for (long i = 0; i < n; ++i) {
    const Vec3 l = lo + Vec3(u01(rng) * ext.x(), u01(rng) * ext.y(), u01(rng) * ext.z());
    double dmin = 1e9;
    for (std::size_t k = 0; k < path.size(); k += 4) dmin = std::min(dmin, (l - path[k]).head<2>().norm());
    if (dmin >= 1.0) out.push_back(l);
  }
  return out;
}

struct RadarFov {
  double min_range = 0.5, max_range = 11.0;
  double max_azimuth = 60.0 * M_PI / 180.0;
  double max_elevation = 20.0 * M_PI / 180.0;
};

/// Radar-frame velocity of the radar origin.
inline Vec3 radar_velocity(const TruthState& x, const Extrinsics& ext) {
  return ext.R_ir.transpose() * (x.v_body + x.omega.cross(ext.t_ir));
}

inline std::vector<RadarScan> synth_radar(const GroundTruth& gt, const std::vector<Vec3>& landmarks,
                                          const NoiseConfig& noise, const RadarFov& fov = {}) {
  const auto& s = gt.spec();
  std::mt19937_64 rng(noise.seed * 0x94D049BB133111EBULL + 3);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::vector<RadarScan> out;
  const double dt = 1.0 / s.radar_rate;
  for (std::size_t k = 0;; ++k) {
    const double t = static_cast<double>(k) * dt;
    if (t > s.duration + 1e-9) break;
    const TruthState x = gt.state(t);
    const Mat3 Rr = x.R * s.ext.R_ir;
    const Vec3 pr = x.p + x.R * s.ext.t_ir;
    const Vec3 vr = radar_velocity(x, s.ext);
    RadarScan scan;
    scan.stamp = t;
    for (const auto& l : landmarks) {
      const Vec3 q = Rr.transpose() * (l - pr);
      const double r = q.norm();
      if (r < fov.min_range || r > fov.max_range) continue;
      if (std::abs(std::atan2(q.y(), q.x())) > fov.max_azimuth) continue;
      if (std::abs(std::atan2(q.z(), q.head<2>().norm())) > fov.max_elevation) continue;
      RadarPoint pt;
      pt.p = q;
      pt.doppler = doppler_predict(q, vr);
      scan.points.push_back(pt);
    }
    if (scan.points.size() > s.max_radar_points) {
      std::shuffle(scan.points.begin(), scan.points.end(), rng);
      scan.points.resize(s.max_radar_points);
      std::sort(scan.points.begin(), scan.points.end(),
                [](const RadarPoint& a, const RadarPoint& b) { return a.p.norm() < b.p.norm(); });
    }
    for (auto& pt : scan.points) {
      if (noise.doppler_sigma > 0.0) pt.doppler += noise.doppler_sigma * n01(rng);
      if (noise.outlier_fraction > 0.0 && u01(rng) < noise.outlier_fraction) {
        const double mag = noise.outlier_offset * (1.0 + u01(rng));
        pt.doppler += (u01(rng) < 0.5 ? -mag : mag);
      }
    }
    out.push_back(std::move(scan));
  }
  return out;
}

/// Trot gait schedule with diagonal pairs (front-left, hind-right) and
/// (front-right, hind-left) half a cycle apart.
class GaitPlan {
 public:
  GaitPlan(const GroundTruth& gt, std::vector<SlipEvent> slips) : gt_(gt), slips_(std::move(slips)) {
    const auto& s = gt_.spec();
    t0_ = s.t_start;
    if (!slips_.empty()) {
      // Cumulative world-frame slip displacement on a 1 ms grid.
      const double h = 1e-3;
      const auto n = static_cast<std::size_t>(std::ceil(s.duration / h)) + 2;
      drift_.assign(n, Vec3::Zero());
      for (std::size_t k = 1; k < n; ++k) {
        const double ta = static_cast<double>(k - 1) * h, tb = static_cast<double>(k) * h;
        drift_[k] = drift_[k - 1] + 0.5 * h * (slip_world(ta) + slip_world(tb));
      }
    }
  }

  static constexpr double kOffset[kNumLegs] = {0.0, 0.5, 0.5, 0.0};

  double start() const { return t0_; }

  /// World-frame foot drift velocity at t (zero outside slip events).
  Vec3 slip_world(double t) const {
    Vec3 v = Vec3::Zero();
    for (const auto& e : slips_)
      if (t >= e.start && t < e.start + e.duration) {
        const Mat3 R = gt_.state(t).R;
        v += R * Vec3(e.velocity.x(), e.velocity.y(), 0.0);
      }
    return v;
  }

  Vec3 drift(double t) const {
    if (drift_.empty()) return Vec3::Zero();
    const double h = 1e-3;
    const double x = std::clamp(t / h, 0.0, static_cast<double>(drift_.size() - 1));
    const auto i = std::min(static_cast<std::size_t>(x), drift_.size() - 2);
    const double f = x - static_cast<double>(i);
    return (1.0 - f) * drift_[i] + f * drift_[i + 1];
  }

  /// Nominal foot position in the base frame while standing.
  Vec3 nominal_foot(int leg) const {
    const auto& s = gt_.spec();
    return s.leg_model.hip_translation[leg] + Vec3(0.0, s.leg_model.side_sign(leg) * s.leg_model.l1,
                                                   -s.gait.base_height);
  }

  Vec3 placement(int leg, double t_mid) const {
    const auto& s = gt_.spec();
    const TruthState x = gt_.state(t_mid);
    const Mat3 Rb = x.R * s.ext.R_ib;
    const Vec3 pb = x.p + x.R * s.ext.t_ib;
    return pb + Rb * nominal_foot(leg);
  }

  struct FootState {
    bool contact = true;
    Vec3 p = Vec3::Zero();     // world
    Vec3 pdot = Vec3::Zero();  // world, stance only
  };

  /// Start time of the stance interval with cycle index k.
  double stance_start(int leg, long k) const {
    const auto& g = gt_.spec().gait;
    return t0_ + (static_cast<double>(k) - kOffset[leg]) / g.frequency;
  }

  Vec3 stance_foot(int leg, long k, double t) const {
    const auto& g = gt_.spec().gait;
    const double c = stance_start(leg, k);
    const Vec3 base = c <= t0_ ? placement(leg, 0.0) : placement(leg, c + 0.5 * g.duty / g.frequency);
    return base + drift(t) - drift(std::max(c, 0.0));
  }

  FootState foot(int leg, double t) const {
    const auto& g = gt_.spec().gait;
    FootState out;
    if (t < t0_) {
      out.p = placement(leg, 0.0) + drift(t);
      out.pdot = slip_world(t);
      return out;
    }
    const double u = g.frequency * (t - t0_) + kOffset[leg];
    const long k = static_cast<long>(std::floor(u));
    const double phase = u - static_cast<double>(k);
    if (phase < g.duty) {
      out.p = stance_foot(leg, k, t);
      out.pdot = slip_world(t);
      return out;
    }
    out.contact = false;
    const double t_lift = stance_start(leg, k) + g.duty / g.frequency;
    const Vec3 from = stance_foot(leg, k, t_lift);
    const Vec3 to = stance_foot(leg, k + 1, stance_start(leg, k + 1));
    const double sw = (phase - g.duty) / (1.0 - g.duty);
    const double blend = sw * sw * (3.0 - 2.0 * sw);
    out.p = from + blend * (to - from) + Vec3(0.0, 0.0, g.swing_height * std::sin(M_PI * sw));
    return out;
  }

  /// Touchdown times after the gait starts, over [0, duration].
  std::vector<double> touchdowns() const {
    const auto& s = gt_.spec();
    std::vector<double> out;
    for (int leg = 0; leg < kNumLegs; ++leg)
      for (long k = 1;; ++k) {
        const double c = stance_start(leg, k);
        if (c > s.duration) break;
        if (c > t0_) out.push_back(c);
      }
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  const GroundTruth& gt_;
  std::vector<SlipEvent> slips_;
  double t0_ = 0.0;
  std::vector<Vec3> drift_;
};

inline std::vector<LegSample> synth_leg(const GroundTruth& gt, const GaitPlan& gait, const NoiseConfig& noise) {
  const auto& s = gt.spec();
  const auto& m = s.leg_model;
  std::mt19937_64 rng(noise.seed * 0xBF58476D1CE4E5B9ULL + 4);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<LegSample> out;
  const double dt = 1.0 / s.leg_rate;
  for (std::size_t k = 0;; ++k) {
    const double t = static_cast<double>(k) * dt;
    if (t > s.duration + 1e-9) break;
    const TruthState x = gt.state(t);
    const Mat3 Rb = x.R * s.ext.R_ib;
    const Vec3 pb = x.p + x.R * s.ext.t_ib;
    const Vec3 pb_dot = x.v_world + x.R * x.omega.cross(s.ext.t_ib);
    const Vec3 wb = s.ext.R_ib.transpose() * x.omega;
    LegSample ls;
    ls.stamp = t;
    std::array<Vec3, kNumLegs> rates;
    for (int leg = 0; leg < kNumLegs; ++leg) {
      const auto f = gait.foot(leg, t);
      const Vec3 fb = Rb.transpose() * (f.p - pb);
      const auto a = inverse_kinematics(m, leg, fb);
      if (!a) throw std::runtime_error("synth_leg: inverse kinematics unreachable at t=" + std::to_string(t));
      Vec3 fw_dot = f.pdot;
      if (!f.contact) {
        const double h = 1e-5;
        fw_dot = (gait.foot(leg, t + h).p - gait.foot(leg, t - h).p) / (2.0 * h);
      }
      const Vec3 fb_dot = Rb.transpose() * (fw_dot - pb_dot) - wb.cross(fb);
      rates[leg] = foot_jacobian(m, leg, *a).fullPivLu().solve(fb_dot);
      ls.alpha[leg] = *a;
      if (noise.joint_sigma > 0.0)
        ls.alpha[leg] += noise.joint_sigma * Vec3(n01(rng), n01(rng), n01(rng));
      ls.contact[leg] = f.contact;
    }
    ls.alpha_dot = rates;
    out.push_back(ls);
  }
  return out;
}

inline std::vector<GtSample> synth_gt(const GroundTruth& gt) {
  const auto& s = gt.spec();
  std::vector<GtSample> out;
  const double dt = 1.0 / s.imu_rate;
  const auto n = static_cast<std::size_t>(std::floor(s.duration * s.imu_rate + 1e-9)) + 1;
  for (std::size_t k = 0; k < n; ++k) {
    const TruthState x = gt.state(static_cast<double>(k) * dt);
    out.push_back({x.t, x.p, Quat(x.R).normalized(), x.v_body, x.omega});
  }
  return out;
}

/// Local gravity in the IMU frame for a ground-truth pose.
inline Vec3 gt_gravity(const Quat& q) { return q.toRotationMatrix().transpose() * gravity_global(); }

inline Dataset simulate(const ScenarioSpec& spec, const NoiseConfig& noise_in) {
  NoiseConfig noise = noise_in;
  noise.validate();
  for (const auto& e : spec.slips) noise.slips.push_back(e);
  const GroundTruth gt(spec);
  const GaitPlan gait(gt, noise.slips);
  Dataset d;
  d.meta.scenario = spec.name;
  d.meta.description = spec.description;
  d.meta.duration = spec.duration;
  d.meta.imu_rate = spec.imu_rate;
  d.meta.radar_rate = spec.radar_rate;
  d.meta.leg_rate = spec.leg_rate;
  d.meta.seed = noise.seed;
  d.meta.ext = spec.ext;
  d.meta.leg_model = spec.leg_model;
  d.meta.noise = to_json(noise);
  d.imu = synth_imu(gt, noise, gait.touchdowns());
  d.radar = synth_radar(gt, make_landmarks(gt, noise.seed), noise);
  d.leg = synth_leg(gt, gait, noise);
  d.gt = synth_gt(gt);
  return d;
}

inline Dataset make_scenario(const std::string& name, const NoiseConfig& noise) {
  return simulate(scenario_spec(name), noise);
}

}  // namespace garlileo
