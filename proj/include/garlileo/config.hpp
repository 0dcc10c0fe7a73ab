#pragma once

// Estimator configuration. Serialized as one JSON object; individual keys can
// be overridden with dotted paths ("weights.w_s2=5").

#include "garlileo/dataset.hpp"
#include "garlileo/factors.hpp"
#include "garlileo/solver.hpp"

#include <optional>
#include <stdexcept>
#include <string>

namespace garlileo {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Ablation {
  bool no_gravity = false;  // drop r_G, r_S2 and post-optimization
  bool no_s2 = false;       // drop r_S2 only
  bool no_bias = false;     // b_v fixed at zero

  std::string label() const {
    std::string s;
    auto add = [&](bool on, const char* name) {
      if (!on) return;
      if (!s.empty()) s += ",";
      s += name;
    };
    add(no_gravity, "no-gravity");
    add(no_s2, "no-s2");
    add(no_bias, "no-bias");
    return s.empty() ? "none" : s;
  }
};

/// Parses "no-gravity", "no-s2", "no-bias" (comma separated) or "none".
inline Ablation parse_ablation(const std::string& text, Ablation a = {}) {
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find(',', pos), text.size());
    const std::string tok = text.substr(pos, end - pos);
    if (tok == "no-gravity") {
      a.no_gravity = true;
    } else if (tok == "no-s2") {
      a.no_s2 = true;
    } else if (tok == "no-bias") {
      a.no_bias = true;
    } else if (tok != "none" && !tok.empty()) {
      throw ConfigError("unknown ablation '" + tok + "' (expected no-gravity, no-s2, no-bias)");
    }
    pos = end + 1;
  }
  return a;
}

struct PipelineConfig {
  double dt_knot = 0.05;       // s
  double window = 0.5;         // s of active spline segments
  double init_window = 2.0;    // s
  double tau1 = 0.05;          // m/s, stationary mean speed
  double tau2 = 0.01;          // (m/s)^2, stationary trace of variance
  double w1 = 1.0;             // accelerometer-mean term of the static gravity init
  double w2 = 0.2;             // radar-dynamic term of the static gravity init
  FactorWeights weights;
  RansacConfig ransac;
  std::optional<Extrinsics> ext;      // dataset calibration when empty
  std::optional<LegModel> leg_model;  // dataset leg model when empty
  double gravity_pair_gap = 0.1;      // s
  double gravity_pair_min_gap = 0.05; // s
  double leg_max_gap = 0.05;          // s, differenced leg velocity
  double integration_step = 0.005;    // s
  int init_iters = 50;
  int frame_iters = 20;
  Ablation ablation;

  int window_ctrl() const { return static_cast<int>(std::lround(window / dt_knot)) + kSplineOrder - 1; }

  void validate() const {
    if (!(dt_knot > 0.0)) throw ConfigError("dt_knot must be positive");
    if (!(window >= 3.0 * dt_knot - 1e-12)) throw ConfigError("window must be at least 3 * dt_knot");
    if (!(init_window >= 3.0 * dt_knot)) throw ConfigError("init_window must be at least 3 * dt_knot");
    if (!(tau1 > 0.0) || !(tau2 > 0.0)) throw ConfigError("tau1 and tau2 must be positive");
    if (!(w1 >= 0.0) || !(w2 >= 0.0) || !(w1 + w2 > 0.0)) throw ConfigError("w1, w2 must be nonnegative, not both 0");
    if (!(gravity_pair_gap > 0.0) || !(gravity_pair_min_gap > 0.0) || gravity_pair_min_gap > gravity_pair_gap)
      throw ConfigError("gravity pair gaps must satisfy 0 < min_gap <= gap");
    if (!(leg_max_gap > 0.0)) throw ConfigError("leg_max_gap must be positive");
    if (!(integration_step > 0.0)) throw ConfigError("integration_step must be positive");
    if (init_iters < 1 || frame_iters < 1) throw ConfigError("iteration caps must be >= 1");
    try {
      weights.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (leg_model) leg_model->validate();
  }
};

inline json to_json(const PipelineConfig& c) {
  const auto& w = c.weights;
  json j = {
      {"dt_knot", c.dt_knot},
      {"window", c.window},
      {"init_window", c.init_window},
      {"tau1", c.tau1},
      {"tau2", c.tau2},
      {"w1", c.w1},
      {"w2", c.w2},
      {"weights",
       {{"w_omega", w.w_omega},
        {"w_a", w.w_a},
        {"w_leg", w.w_leg},
        {"w_radar", w.w_radar},
        {"w_grav", w.w_grav},
        {"w_s2", w.w_s2},
        {"w_bias", w.w_bias},
        {"w_bias_a", w.w_bias_a},
        {"w_prior", w.w_prior},
        {"w_end", w.w_end},
        {"cauchy_scale", w.cauchy_scale}}},
      {"ransac",
       {{"threshold", c.ransac.threshold},
        {"min_inliers", c.ransac.min_inliers},
        {"max_iters", c.ransac.max_iters},
        {"confidence", c.ransac.confidence},
        {"max_cond", c.ransac.max_cond},
        {"seed", c.ransac.seed}}},
      {"extrinsics", c.ext ? io::to_json(*c.ext) : json(nullptr)},
      {"leg_model", c.leg_model ? io::to_json(*c.leg_model) : json(nullptr)},
      {"gravity_pair_gap", c.gravity_pair_gap},
      {"gravity_pair_min_gap", c.gravity_pair_min_gap},
      {"leg_max_gap", c.leg_max_gap},
      {"integration_step", c.integration_step},
      {"init_iters", c.init_iters},
      {"frame_iters", c.frame_iters},
      {"ablation",
       {{"no_gravity", c.ablation.no_gravity}, {"no_s2", c.ablation.no_s2}, {"no_bias", c.ablation.no_bias}}},
  };
  return j;
}

namespace config_detail {

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + key + ": " + e.what());
  }
}

inline void check_keys(const json& j, const json& schema, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!schema.contains(it.key())) throw ConfigError("unknown config key '" + where + it.key() + "'");
}

}  // namespace config_detail

/// Reads a config; missing keys keep the defaults of `base`, unknown keys are errors.
inline PipelineConfig config_from_json(const json& j, PipelineConfig c = {}) {
  using config_detail::read;
  const json schema = to_json(PipelineConfig{});
  config_detail::check_keys(j, schema, "");
  read(j, "dt_knot", c.dt_knot, "");
  read(j, "window", c.window, "");
  read(j, "init_window", c.init_window, "");
  read(j, "tau1", c.tau1, "");
  read(j, "tau2", c.tau2, "");
  read(j, "w1", c.w1, "");
  read(j, "w2", c.w2, "");
  if (j.contains("weights")) {
    const auto& w = j["weights"];
    config_detail::check_keys(w, schema["weights"], "weights.");
    read(w, "w_omega", c.weights.w_omega, "weights.");
    read(w, "w_a", c.weights.w_a, "weights.");
    read(w, "w_leg", c.weights.w_leg, "weights.");
    read(w, "w_radar", c.weights.w_radar, "weights.");
    read(w, "w_grav", c.weights.w_grav, "weights.");
    read(w, "w_s2", c.weights.w_s2, "weights.");
    read(w, "w_bias", c.weights.w_bias, "weights.");
    read(w, "w_bias_a", c.weights.w_bias_a, "weights.");
    read(w, "w_prior", c.weights.w_prior, "weights.");
    read(w, "w_end", c.weights.w_end, "weights.");
    read(w, "cauchy_scale", c.weights.cauchy_scale, "weights.");
  }
  if (j.contains("ransac")) {
    const auto& r = j["ransac"];
    config_detail::check_keys(r, schema["ransac"], "ransac.");
    read(r, "threshold", c.ransac.threshold, "ransac.");
    read(r, "min_inliers", c.ransac.min_inliers, "ransac.");
    read(r, "max_iters", c.ransac.max_iters, "ransac.");
    read(r, "confidence", c.ransac.confidence, "ransac.");
    read(r, "max_cond", c.ransac.max_cond, "ransac.");
    read(r, "seed", c.ransac.seed, "ransac.");
  }
  try {
    if (j.contains("extrinsics"))
      c.ext = j["extrinsics"].is_null() ? std::nullopt : std::optional(io::extrinsics_from_json(j["extrinsics"]));
    if (j.contains("leg_model"))
      c.leg_model = j["leg_model"].is_null() ? std::nullopt : std::optional(io::leg_model_from_json(j["leg_model"]));
  } catch (const std::exception& e) {
    throw ConfigError(std::string("calibration: ") + e.what());
  }
  read(j, "gravity_pair_gap", c.gravity_pair_gap, "");
  read(j, "gravity_pair_min_gap", c.gravity_pair_min_gap, "");
  read(j, "leg_max_gap", c.leg_max_gap, "");
  read(j, "integration_step", c.integration_step, "");
  read(j, "init_iters", c.init_iters, "");
  read(j, "frame_iters", c.frame_iters, "");
  if (j.contains("ablation")) {
    const auto& a = j["ablation"];
    config_detail::check_keys(a, schema["ablation"], "ablation.");
    read(a, "no_gravity", c.ablation.no_gravity, "ablation.");
    read(a, "no_s2", c.ablation.no_s2, "ablation.");
    read(a, "no_bias", c.ablation.no_bias, "ablation.");
  }
  c.validate();
  return c;
}

/// Applies one "dotted.key=value" override. The value is parsed as JSON when
/// possible, otherwise taken as a string.
inline PipelineConfig apply_override(const PipelineConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json j = to_json(c);
  json* node = &j;
  std::size_t pos = 0;
  while (true) {
    const std::size_t dot = key.find('.', pos);
    const std::string part = key.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    pos = dot + 1;
  }
  *node = value;
  return config_from_json(j);
}

}  // namespace garlileo
