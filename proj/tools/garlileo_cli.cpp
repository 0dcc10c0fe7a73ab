// garlileo: simulate datasets, run the estimator, evaluate trajectories.
//
//   garlileo simulate --scenario flat_loop --out data/flat --seed 7
//   garlileo run --dataset data/flat --out runs/flat [--config cfg.json] [--set weights.w_s2=5] [--ablate no-gravity]
//   garlileo run --manifest runs/flat/manifest.json --out runs/flat_again
//   garlileo config > default.json
//   garlileo eval --est runs/flat/trajectory.tum --gt data/flat [--gravity runs/flat/gravity.jsonl] [--plot-data plots]
//
// Exit codes: 0 success, 1 internal failure, 2 usage or input error.

#include "garlileo/config.hpp"
#include "garlileo/dataset.hpp"
#include "garlileo/log.hpp"
#include "garlileo/metrics.hpp"
#include "garlileo/pipeline.hpp"
#include "garlileo/simulator.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace garlileo;

namespace {

constexpr const char* kVersion = "0.1.0";

// Bad arguments or unusable input files; maps to exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class StageClock {
 public:
  template <typename F>
  auto time(const std::string& stage, F&& f) {
    const auto t0 = std::chrono::steady_clock::now();
    if constexpr (std::is_void_v<decltype(f())>) {
      f();
      record(stage, t0);
    } else {
      auto out = f();
      record(stage, t0);
      return out;
    }
  }
  json to_json() const { return seconds_; }

 private:
  void record(const std::string& stage, std::chrono::steady_clock::time_point t0) {
    seconds_[stage] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  json seconds_ = json::object();
};

void prepare_out_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw UsageError("output path exists and is not a directory: " + dir.string());
    if (!fs::is_empty(dir) && !force) throw UsageError("output directory exists: " + dir.string() + " (use --force)");
  }
  fs::create_directories(dir);
}

json read_json_file(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw UsageError("cannot read " + path.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw UsageError(path.string() + ": " + e.what());
  }
}

void write_manifest(const fs::path& dir, const std::string& command, json body, const StageClock& clock,
                    const std::map<std::string, fs::path>& outputs) {
  body["command"] = command;
  body["tool_version"] = kVersion;
  body["outputs"] = json::object();
  for (const auto& [k, p] : outputs) body["outputs"][k] = p.string();
  body["wall_clock_s"] = clock.to_json();
  io::write_text_atomic(dir / "manifest.json", body.dump(2) + "\n");
}

// --- simulate -------------------------------------------------------------

struct SimulateArgs {
  std::string scenario;
  fs::path out;
  std::uint64_t seed = 0;
  bool noise_free = false;
  bool force = false;
  std::map<std::string, double> noise;  // NoiseConfig key -> value
};

const std::vector<std::string> kNoiseKeys = {"gyro_sigma",     "accel_sigma",   "impact_magnitude", "impact_probability",
                                             "doppler_sigma",  "outlier_fraction", "outlier_offset", "orient_sigma",
                                             "accel_bias_rw",  "gyro_bias_rw",  "joint_sigma"};

std::string dashed(std::string s) {
  for (auto& c : s)
    if (c == '_') c = '-';
  return s;
}

int cmd_simulate(const SimulateArgs& a) {
  ScenarioSpec spec;
  try {
    spec = scenario_spec(a.scenario);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  StageClock clock;
  NoiseConfig base = a.noise_free ? NoiseConfig::zero() : NoiseConfig{};
  json overrides = json::object();
  for (const auto& [k, v] : a.noise) overrides[k] = v;
  overrides["seed"] = a.seed;
  NoiseConfig noise;
  try {
    noise = noise_from_json(overrides, base);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  prepare_out_dir(a.out, a.force);
  const Dataset d = clock.time("simulate", [&] { return simulate(spec, noise); });
  clock.time("write", [&] { save_dataset(d, a.out); });
  std::map<std::string, fs::path> outputs = {
      {"meta", a.out / "meta.json"}, {"imu", a.out / "imu.jsonl"}, {"radar", a.out / "radar.jsonl"},
      {"leg", a.out / "leg.jsonl"},  {"gt", a.out / "gt.jsonl"}};
  json body = {{"scenario", a.scenario}, {"seed", a.seed}, {"noise", to_json(noise)},
               {"noise_overrides", overrides}, {"dataset_path", a.out.string()}};
  write_manifest(a.out, "simulate", body, clock, outputs);
  std::cout << "wrote " << a.scenario << " (" << d.imu.size() << " imu, " << d.radar.size() << " radar, "
            << d.leg.size() << " leg samples) to " << a.out.string() << "\n";
  return 0;
}

// --- run ------------------------------------------------------------------

struct RunArgs {
  fs::path dataset;
  fs::path out;
  fs::path config;
  fs::path manifest;
  std::vector<std::string> set;
  std::string ablate;
  std::optional<std::uint64_t> seed;
  bool force = false;
};

PipelineConfig build_config(const RunArgs& a, const json* snapshot) {
  try {
    PipelineConfig cfg;
    if (snapshot) cfg = config_from_json(*snapshot);
    if (!a.config.empty()) cfg = config_from_json(read_json_file(a.config), cfg);
    for (const auto& s : a.set) cfg = apply_override(cfg, s);
    if (!a.ablate.empty()) cfg.ablation = parse_ablation(a.ablate, cfg.ablation);
    if (a.seed) cfg.ransac.seed = *a.seed;
    cfg.validate();
    return cfg;
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
}

int cmd_run(RunArgs a) {
  json snapshot;
  if (!a.manifest.empty()) {
    const json m = read_json_file(a.manifest);
    if (m.value("command", "") != "run") throw UsageError(a.manifest.string() + ": not a run manifest");
    snapshot = m.at("config");
    if (a.dataset.empty()) a.dataset = m.at("dataset_path").get<std::string>();
    if (!a.seed) a.seed = m.at("seed").get<std::uint64_t>();
  }
  if (a.dataset.empty()) throw UsageError("run: --dataset or --manifest is required");
  const PipelineConfig cfg = build_config(a, a.manifest.empty() ? nullptr : &snapshot);

  StageClock clock;
  Dataset d;
  try {
    d = clock.time("load", [&] { return load_dataset(a.dataset); });
  } catch (const DatasetError& e) {
    throw UsageError(e.what());
  }
  prepare_out_dir(a.out, a.force);
  const RunResult r = clock.time("estimate", [&] { return run(d, cfg); });

  std::map<std::string, fs::path> outputs = {{"trajectory", a.out / "trajectory.tum"},
                                             {"gravity", a.out / "gravity.jsonl"},
                                             {"frames", a.out / "frames.jsonl"},
                                             {"bias", a.out / "bias.jsonl"},
                                             {"init", a.out / "init.json"}};
  clock.time("write", [&] {
    save_tum(r.trajectory, outputs["trajectory"]);
    io::write_jsonl(outputs["gravity"], r.gravity);
    io::write_jsonl(outputs["frames"], r.frames);
    io::write_jsonl(outputs["bias"], r.bias);
    io::write_text_atomic(outputs["init"], to_json(r.init).dump(2) + "\n");
  });
  json body = {{"config", to_json(cfg)},
               {"ablation", cfg.ablation.label()},
               {"dataset_path", a.dataset.string()},
               {"seed", cfg.ransac.seed},
               {"frames", r.frames.size()},
               {"rolled_back", r.rolled_back},
               {"trajectory_poses", r.trajectory.size()}};
  write_manifest(a.out, "run", body, clock, outputs);
  std::cout << "run " << cfg.ablation.label() << ": " << r.frames.size() << " frames, " << r.rolled_back
            << " rolled back, " << r.trajectory.size() << " poses -> " << a.out.string() << "\n";
  return 0;
}

// --- eval -----------------------------------------------------------------

struct EvalArgs {
  fs::path est;
  fs::path gt;
  fs::path gravity;
  fs::path out;
  fs::path plot_data;
  bool no_align = false;
  double rpe_delta = 1.0;
  double max_dt = 0.01;
};

// Dataset directory, gt.jsonl, or TUM file.
Trajectory load_trajectory(const fs::path& p) {
  if (fs::is_directory(p)) {
    const auto file = p / "gt.jsonl";
    if (!fs::exists(file)) throw UsageError("missing stream file: " + file.string());
    return gt_trajectory(io::read_jsonl<GtSample>(file, io::gt_from_json));
  }
  if (p.extension() == ".jsonl") return gt_trajectory(io::read_jsonl<GtSample>(p, io::gt_from_json));
  return load_tum(p);
}

std::vector<GravitySample> load_gravity(const fs::path& p) {
  return io::read_jsonl<GravitySample>(p, [](const json& j) {
    return GravitySample{j.at("stamp").get<double>(), io::vec3(j.at("g"))};
  });
}

void write_plot_data(const fs::path& dir, const Trajectory& est, const Trajectory& gt_aligned, double max_dt,
                     const GravityErrorResult* ge) {
  fs::create_directories(dir);
  const auto assoc = associate(est, gt_aligned, max_dt);
  std::ostringstream xy, z;
  xy.precision(10);
  z.precision(10);
  xy << "stamp,est_x,est_y,gt_x,gt_y\n";
  z << "stamp,est_z,gt_z\n";
  for (const auto& [i, j] : assoc.pairs) {
    const auto& e = est[i].position;
    const auto& g = gt_aligned[j].position;
    xy << est[i].stamp << ',' << e.x() << ',' << e.y() << ',' << g.x() << ',' << g.y() << '\n';
    z << est[i].stamp << ',' << e.z() << ',' << g.z() << '\n';
  }
  std::ostringstream gcsv;
  gcsv.precision(10);
  gcsv << "stamp,gravity_error_deg\n";
  if (ge)
    for (const auto& [t, deg] : ge->series) gcsv << t << ',' << deg << '\n';
  io::write_text_atomic(dir / "xy_path.csv", xy.str());
  io::write_text_atomic(dir / "z_vs_time.csv", z.str());
  io::write_text_atomic(dir / "gravity_error.csv", gcsv.str());
}

int cmd_eval(const EvalArgs& a) {
  Trajectory est, gt;
  std::vector<GravitySample> grav;
  try {
    est = load_trajectory(a.est);
    gt = load_trajectory(a.gt);
    if (!a.gravity.empty()) grav = load_gravity(a.gravity);
  } catch (const DatasetError& e) {
    throw UsageError(e.what());
  }
  if (est.empty() || gt.empty()) throw UsageError("eval: empty trajectory");
  EvalOptions opt;
  opt.align = !a.no_align;
  opt.rpe_delta = a.rpe_delta;
  opt.max_dt = a.max_dt;
  GravityErrorResult ge;
  MetricReport rep;
  try {
    rep = evaluate(est, gt, a.gravity.empty() ? nullptr : &grav, opt, &ge);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const std::string text = to_json(rep).dump(2);
  std::cout << text << "\n";
  if (!a.out.empty()) {
    if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
    io::write_text_atomic(a.out, text + "\n");
  }
  if (!a.plot_data.empty()) {
    Trajectory gt_aligned = gt;
    if (opt.align) gt_aligned = apply_transform(gt, align_rigid(est, gt, opt.max_dt).transform);
    write_plot_data(a.plot_data, est, gt_aligned, opt.max_dt, a.gravity.empty() ? nullptr : &ge);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Radar-leg-inertial odometry: simulate, run, evaluate"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Log progress to stderr");

  SimulateArgs sa;
  auto* sim = app.add_subcommand("simulate", "Write a synthetic dataset");
  sim->add_option("--scenario", sa.scenario, "flat_loop, stair_loop or slip_zone")->required();
  sim->add_option("--out", sa.out, "Output directory")->required();
  sim->add_option("--seed", sa.seed, "Noise seed");
  sim->add_flag("--noise-free", sa.noise_free, "Zero all noise before applying overrides");
  sim->add_flag("--force", sa.force, "Write into an existing directory");
  for (const auto& key : kNoiseKeys)
    sim->add_option_function<double>("--noise." + dashed(key), [&sa, key](double v) { sa.noise[key] = v; },
                                     "Override NoiseConfig " + key);

  RunArgs ra;
  auto* runc = app.add_subcommand("run", "Run the estimator on a dataset");
  runc->add_option("--dataset", ra.dataset, "Dataset directory");
  runc->add_option("--out", ra.out, "Output directory")->required();
  runc->add_option("--config", ra.config, "JSON config file");
  runc->add_option("--manifest", ra.manifest, "Replay the config, dataset and seed of an earlier run manifest");
  runc->add_option("--set", ra.set, "key=value config override (dotted keys)");
  runc->add_option("--ablate", ra.ablate, "no-gravity, no-s2, no-bias (comma separated)");
  runc->add_option("--seed", ra.seed, "RANSAC seed");
  runc->add_flag("--force", ra.force, "Write into an existing directory");

  EvalArgs ea;
  auto* evalc = app.add_subcommand("eval", "Compare a TUM trajectory against ground truth");
  evalc->add_option("--est", ea.est, "Estimated trajectory (TUM, gt.jsonl or dataset directory)")->required();
  evalc->add_option("--gt", ea.gt, "Ground truth: dataset directory, gt.jsonl or TUM file")->required();
  evalc->add_option("--gravity", ea.gravity, "Gravity log (JSONL) for the gravity error");
  evalc->add_option("--out", ea.out, "Write the report JSON here");
  evalc->add_option("--plot-data", ea.plot_data, "Directory for xy_path.csv, z_vs_time.csv, gravity_error.csv");
  evalc->add_flag("--no-align", ea.no_align, "Skip rigid alignment");
  evalc->add_option("--rpe-delta", ea.rpe_delta, "RPE segment length (m)");
  evalc->add_option("--max-dt", ea.max_dt, "Stamp association tolerance (s)");
  std::uint64_t eval_seed = 0;
  evalc->add_option("--seed", eval_seed, "Accepted for uniformity; evaluation is deterministic");

  auto* cfgc = app.add_subcommand("config", "Print the default estimator configuration as JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  if (verbose) logger().level = LogLevel::Info;

  try {
    if (*sim) return cmd_simulate(sa);
    if (*runc) return cmd_run(ra);
    if (*evalc) return cmd_eval(ea);
    if (*cfgc) {
      std::cout << to_json(PipelineConfig{}).dump(2) << "\n";
      return 0;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
