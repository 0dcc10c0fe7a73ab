#pragma once

// Dataset on disk: one directory holding imu.jsonl, radar.jsonl, leg.jsonl,
// optional gt.jsonl, and meta.json. Each .jsonl line is one measurement.

#include "garlileo/leg.hpp"
#include "garlileo/radar.hpp"
#include "garlileo/types.hpp"

#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace garlileo {

using json = nlohmann::json;

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GtSample {
  double stamp = 0.0;
  Vec3 p = Vec3::Zero();
  Quat q = Quat::Identity();  // IMU to world
  Vec3 v_body = Vec3::Zero();
  Vec3 omega = Vec3::Zero();
};

struct DatasetMeta {
  std::string scenario;
  std::string description;
  double duration = 0.0;
  double imu_rate = 100.0;
  double radar_rate = 20.0;
  double leg_rate = 150.0;
  std::uint64_t seed = 0;
  Extrinsics ext;
  LegModel leg_model;
  json noise = json::object();
};

struct Dataset {
  DatasetMeta meta;
  std::vector<ImuSample> imu;
  std::vector<RadarScan> radar;
  std::vector<LegSample> leg;
  std::vector<GtSample> gt;
};

struct TrajectoryPoint {
  double stamp = 0.0;
  Vec3 position = Vec3::Zero();
  Quat orientation = Quat::Identity();
};
using Trajectory = std::vector<TrajectoryPoint>;

// --- json helpers ---------------------------------------------------------

namespace io {

inline json to_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }
inline json to_json(const Quat& q) { return json::array({q.x(), q.y(), q.z(), q.w()}); }
inline json to_json(const Mat3& m) {
  json a = json::array();
  for (int r = 0; r < 3; ++r) a.push_back(json::array({m(r, 0), m(r, 1), m(r, 2)}));
  return a;
}

inline Vec3 vec3(const json& j) {
  if (!j.is_array() || j.size() != 3) throw DatasetError("expected 3-vector");
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}
inline Quat quat(const json& j) {
  if (!j.is_array() || j.size() != 4) throw DatasetError("expected quaternion [x,y,z,w]");
  Quat q(j[3].get<double>(), j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
  if (std::abs(q.norm() - 1.0) > 1e-6) throw DatasetError("quaternion is not unit");
  return q;
}
inline Mat3 mat3(const json& j) {
  if (!j.is_array() || j.size() != 3) throw DatasetError("expected 3x3 matrix");
  Mat3 m;
  for (int r = 0; r < 3; ++r) m.row(r) = vec3(j[r]).transpose();
  return m;
}

inline json to_json(const ImuSample& s) {
  return {{"t", s.stamp}, {"gyro", to_json(s.gyro)}, {"accel", to_json(s.accel)}, {"orient", to_json(s.orient)}};
}
inline ImuSample imu_from_json(const json& j) {
  ImuSample s;
  s.stamp = j.at("t").get<double>();
  s.gyro = vec3(j.at("gyro"));
  s.accel = vec3(j.at("accel"));
  s.orient = j.contains("orient") ? quat(j.at("orient")) : Quat::Identity();
  return s;
}

inline json to_json(const RadarScan& s) {
  json pts = json::array();
  for (const auto& p : s.points) {
    json a = json::array({p.p.x(), p.p.y(), p.p.z(), p.doppler});
    if (p.intensity) a.push_back(*p.intensity);
    pts.push_back(std::move(a));
  }
  return {{"t", s.stamp}, {"points", std::move(pts)}};
}
inline RadarScan radar_from_json(const json& j) {
  RadarScan s;
  s.stamp = j.at("t").get<double>();
  for (const auto& a : j.at("points")) {
    if (!a.is_array() || a.size() < 4 || a.size() > 5) throw DatasetError("radar point must be [x,y,z,doppler(,intensity)]");
    RadarPoint p;
    p.p = Vec3(a[0].get<double>(), a[1].get<double>(), a[2].get<double>());
    if (!(p.p.norm() > 0.0)) throw DatasetError("radar point at zero range");
    p.doppler = a[3].get<double>();
    if (a.size() == 5) p.intensity = a[4].get<double>();
    s.points.push_back(p);
  }
  return s;
}

inline json to_json(const LegSample& s) {
  json alpha = json::array(), contact = json::array();
  for (int l = 0; l < kNumLegs; ++l) {
    alpha.push_back(to_json(s.alpha[l]));
    contact.push_back(static_cast<bool>(s.contact[l]));
  }
  json j = {{"t", s.stamp}, {"alpha", std::move(alpha)}, {"contact", std::move(contact)}};
  if (s.alpha_dot) {
    json rates = json::array();
    for (int l = 0; l < kNumLegs; ++l) rates.push_back(to_json((*s.alpha_dot)[l]));
    j["alpha_dot"] = std::move(rates);
  }
  return j;
}
inline LegSample leg_from_json(const json& j) {
  LegSample s;
  s.stamp = j.at("t").get<double>();
  const auto& a = j.at("alpha");
  const auto& c = j.at("contact");
  if (a.size() != kNumLegs || c.size() != kNumLegs) throw DatasetError("leg sample needs 4 legs");
  for (int l = 0; l < kNumLegs; ++l) {
    s.alpha[l] = vec3(a[l]);
    s.contact[l] = c[l].get<bool>();
  }
  if (j.contains("alpha_dot")) {
    std::array<Vec3, kNumLegs> rates;
    for (int l = 0; l < kNumLegs; ++l) rates[l] = vec3(j["alpha_dot"][l]);
    s.alpha_dot = rates;
  }
  return s;
}

inline json to_json(const GtSample& s) {
  return {{"t", s.stamp}, {"p", to_json(s.p)}, {"q", to_json(s.q)}, {"v", to_json(s.v_body)},
          {"omega", to_json(s.omega)}};
}
inline GtSample gt_from_json(const json& j) {
  GtSample s;
  s.stamp = j.at("t").get<double>();
  s.p = vec3(j.at("p"));
  s.q = quat(j.at("q"));
  if (j.contains("v")) s.v_body = vec3(j.at("v"));
  if (j.contains("omega")) s.omega = vec3(j.at("omega"));
  return s;
}

inline json to_json(const LegModel& m) {
  json hips = json::array(), rots = json::array();
  for (int l = 0; l < kNumLegs; ++l) {
    hips.push_back(to_json(m.hip_translation[l]));
    rots.push_back(to_json(m.hip_rotation[l]));
  }
  return {{"hip_translation", hips}, {"hip_rotation", rots}, {"l1", m.l1}, {"l2", m.l2}, {"l3", m.l3},
          {"axis", json::array({to_json(m.axis[0]), to_json(m.axis[1]), to_json(m.axis[2])})}};
}
inline LegModel leg_model_from_json(const json& j) {
  LegModel m;
  for (int l = 0; l < kNumLegs; ++l) {
    m.hip_translation[l] = vec3(j.at("hip_translation").at(l));
    if (j.contains("hip_rotation")) m.hip_rotation[l] = mat3(j["hip_rotation"][l]);
  }
  m.l1 = j.at("l1").get<double>();
  m.l2 = j.at("l2").get<double>();
  m.l3 = j.at("l3").get<double>();
  if (j.contains("axis"))
    for (int k = 0; k < 3; ++k) m.axis[k] = vec3(j["axis"][k]);
  m.validate();
  return m;
}

inline json to_json(const Extrinsics& e) {
  return {{"R_ir", to_json(e.R_ir)}, {"t_ir", to_json(e.t_ir)}, {"R_ib", to_json(e.R_ib)}, {"t_ib", to_json(e.t_ib)}};
}
inline Extrinsics extrinsics_from_json(const json& j) {
  Extrinsics e;
  e.R_ir = mat3(j.at("R_ir"));
  e.t_ir = vec3(j.at("t_ir"));
  e.R_ib = mat3(j.at("R_ib"));
  e.t_ib = vec3(j.at("t_ib"));
  for (const Mat3* r : {&e.R_ir, &e.R_ib})
    if (orthonormality_error(*r) > 1e-6 || r->determinant() <= 0.0)
      throw DatasetError("extrinsic rotation is not orthonormal");
  return e;
}

inline json to_json(const DatasetMeta& m) {
  return {{"scenario", m.scenario}, {"description", m.description}, {"duration", m.duration},
          {"rates", {{"imu", m.imu_rate}, {"radar", m.radar_rate}, {"leg", m.leg_rate}}},
          {"seed", m.seed}, {"extrinsics", to_json(m.ext)}, {"leg_model", to_json(m.leg_model)},
          {"noise", m.noise}};
}
inline DatasetMeta meta_from_json(const json& j) {
  DatasetMeta m;
  m.scenario = j.value("scenario", "");
  m.description = j.value("description", "");
  m.duration = j.value("duration", 0.0);
  if (j.contains("rates")) {
    m.imu_rate = j["rates"].value("imu", 100.0);
    m.radar_rate = j["rates"].value("radar", 20.0);
    m.leg_rate = j["rates"].value("leg", 150.0);
  }
  m.seed = j.value("seed", std::uint64_t{0});
  m.ext = extrinsics_from_json(j.at("extrinsics"));
  m.leg_model = leg_model_from_json(j.at("leg_model"));
  m.noise = j.value("noise", json::object());
  return m;
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DatasetError("cannot write " + tmp);
    f << text;
    if (!f) throw DatasetError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
void write_jsonl(const std::filesystem::path& path, const std::vector<T>& items) {
  std::string out;
  for (const auto& it : items) {
    out += to_json(it).dump();
    out += '\n';
  }
  write_text_atomic(path, out);
}

template <typename T, typename Parse>
std::vector<T> read_jsonl(const std::filesystem::path& path, Parse parse) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DatasetError("missing stream file: " + path.string());
  std::vector<T> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse(json::parse(line)));
    } catch (const std::exception& e) {
      throw DatasetError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (out.size() > 1 && !(out.back().stamp > out[out.size() - 2].stamp))
      throw DatasetError(path.string() + ":" + std::to_string(lineno) + ": non-monotone stamp");
  }
  return out;
}

}  // namespace io

inline void save_dataset(const Dataset& d, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  io::write_text_atomic(dir / "meta.json", io::to_json(d.meta).dump(2) + "\n");
  io::write_jsonl(dir / "imu.jsonl", d.imu);
  io::write_jsonl(dir / "radar.jsonl", d.radar);
  io::write_jsonl(dir / "leg.jsonl", d.leg);
  if (!d.gt.empty()) io::write_jsonl(dir / "gt.jsonl", d.gt);
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset d;
  const auto meta_path = dir / "meta.json";
  std::ifstream mf(meta_path);
  if (!mf) throw DatasetError("missing stream file: " + meta_path.string());
  try {
    d.meta = io::meta_from_json(json::parse(mf));
  } catch (const DatasetError&) {
    throw;
  } catch (const std::exception& e) {
    throw DatasetError(meta_path.string() + ": " + e.what());
  }
  d.imu = io::read_jsonl<ImuSample>(dir / "imu.jsonl", io::imu_from_json);
  d.radar = io::read_jsonl<RadarScan>(dir / "radar.jsonl", io::radar_from_json);
  d.leg = io::read_jsonl<LegSample>(dir / "leg.jsonl", io::leg_from_json);
  if (std::filesystem::exists(dir / "gt.jsonl")) d.gt = io::read_jsonl<GtSample>(dir / "gt.jsonl", io::gt_from_json);
  return d;
}

// --- TUM trajectories -----------------------------------------------------

inline std::string format_tum(const Trajectory& traj) {
  std::ostringstream os;
  os.precision(17);
  for (const auto& p : traj) {
    const Quat q = p.orientation.normalized();
    os << p.stamp << ' ' << p.position.x() << ' ' << p.position.y() << ' ' << p.position.z() << ' ' << q.x() << ' '
       << q.y() << ' ' << q.z() << ' ' << q.w() << '\n';
  }
  return os.str();
}

inline void save_tum(const Trajectory& traj, const std::filesystem::path& path) {
  io::write_text_atomic(path, format_tum(traj));
}

inline Trajectory load_tum(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DatasetError("cannot read trajectory: " + path.string());
  Trajectory out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream is(line);
    TrajectoryPoint p;
    double qx, qy, qz, qw;
    if (!(is >> p.stamp >> p.position.x() >> p.position.y() >> p.position.z() >> qx >> qy >> qz >> qw))
      throw DatasetError(path.string() + ":" + std::to_string(lineno) + ": expected 't x y z qx qy qz qw'");
    p.orientation = Quat(qw, qx, qy, qz).normalized();
    if (!out.empty() && !(p.stamp > out.back().stamp))
      throw DatasetError(path.string() + ":" + std::to_string(lineno) + ": non-monotone stamp");
    out.push_back(p);
  }
  return out;
}

inline Trajectory gt_trajectory(const std::vector<GtSample>& gt) {
  Trajectory t;
  t.reserve(gt.size());
  for (const auto& g : gt) t.push_back({g.stamp, g.p, g.q});
  return t;
}

}  // namespace garlileo
