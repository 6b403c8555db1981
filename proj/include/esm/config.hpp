#pragma once

// Run configuration: a strict JSON document (schema_version 1). Every section
// is optional and falls back to defaults; unknown keys are rejected.

#include <cstdlib>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "esm/denoiser.hpp"
#include "esm/distill.hpp"
#include "esm/io.hpp"
#include "esm/splat.hpp"

namespace esm {

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kOutputRootEnv = "ESMLAB_OUTPUT_ROOT";

struct ScheduleConfig {
  int steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 2e-2;
};

struct DatasetConfig {
  std::string kind = "shapes";  // shapes | gaussian | file
  int side = 32;
  int per_class = 128;      // shapes
  int count = 4096;         // gaussian
  double amplitude = 0.5;   // gaussian mean pattern
  double variance = 0.25;   // gaussian
  std::string path;         // file
};

struct ModelConfig {
  int hidden = 256;
  int depth = 3;
  int temb_dim = 32;
};

struct SceneConfig {
  int num_splats = 256;
  InitMode init = InitMode::random;
};

struct RoundtripConfig {
  std::vector<int> delta_T{25, 50, 150, 200};
  int states = 100;
  double rho_min = 0.1;  // per-state rho ~ U(rho_min, 1)
  std::string precision = "f32";
};

struct SweepConfig {
  std::string parameter = "rho";  // rho | delta_S | delta_T
  std::vector<double> values{0.1, 0.3, 0.5, 0.7, 0.9};
  std::vector<std::uint64_t> seeds{0};
};

struct InitCompareConfig {
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
};

struct RunConfig {
  int schema_version = kSchemaVersion;
  std::uint64_t seed = 0;
  std::string output_dir;            // empty: <root>/<command>
  std::string checkpoint = "denoiser";
  ScheduleConfig schedule;
  DatasetConfig dataset;
  ModelConfig model;
  TrainConfig train;
  DistillConfig distill;
  std::string target_class = "disk";
  int snapshot_every = 500;
  SceneConfig scene;
  PoseSampler poses;
  RoundtripConfig roundtrip;
  SweepConfig sweep;
  InitCompareConfig init_compare;
};

inline const char* to_string(InitMode m) { return m == InitMode::random ? "random" : "data_fitted"; }

inline InitMode parse_init(const std::string& s) {
  if (s == "random") return InitMode::random;
  if (s == "data_fitted") return InitMode::data_fitted;
  throw ConfigError("unknown scene init '" + s + "' (expected random or data_fitted)");
}

namespace detail {

/// Reads known keys from one JSON object and rejects anything else.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <typename V>
  void get(const std::string& key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const json::exception&) {
      throw ConfigError(where_ + "." + key + ": wrong type");
    }
  }

  const json* child(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, _] : j_.items())
      if (!seen_.count(k)) throw ConfigError(where_ + ": unknown key '" + k + "'");
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline void check(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

}  // namespace detail

inline void validate(const RunConfig& c) {
  using detail::check;
  check(c.schema_version == kSchemaVersion, "schema_version must be " + std::to_string(kSchemaVersion));
  check(c.schedule.steps >= 2, "schedule.steps must be >= 2");
  check(c.schedule.beta_start > 0 && c.schedule.beta_start <= c.schedule.beta_end && c.schedule.beta_end < 1,
        "schedule: require 0 < beta_start <= beta_end < 1");
  const auto& d = c.dataset;
  check(d.kind == "shapes" || d.kind == "gaussian" || d.kind == "file",
        "dataset.kind must be shapes, gaussian or file");
  check(d.side >= 8 && d.side <= 128, "dataset.side must lie in [8, 128]");
  check(d.per_class >= 1 && d.count >= 1, "dataset.per_class and dataset.count must be >= 1");
  check(d.variance > 0, "dataset.variance must be positive");
  check(d.kind != "file" || !d.path.empty(), "dataset.path is required when dataset.kind is file");
  check(c.model.hidden >= 8 && c.model.depth >= 1 && c.model.temb_dim >= 2 && c.model.temb_dim % 2 == 0,
        "model: require hidden >= 8, depth >= 1 and an even temb_dim");
  check(c.train.steps >= 0 && c.train.batch >= 1 && c.train.lr > 0, "train: require steps >= 0, batch >= 1, lr > 0");
  check(c.train.cond_drop_prob >= 0 && c.train.cond_drop_prob <= 1, "train.cond_drop_prob must lie in [0, 1]");
  const auto& g = c.distill;
  check(g.rho > 0 && g.rho <= 1, "distill.rho must lie in (0, 1]");
  check(g.delta_S >= 1 && g.delta_T >= 1, "distill.delta_S and distill.delta_T must be >= 1");
  check(1 <= g.t_min && g.t_min < g.t_max && g.t_max <= c.schedule.steps, "distill: require 1 <= t_min < t_max <= T");
  check(g.iterations >= 0, "distill.iterations must be >= 0");
  check(g.lr_scene >= 0 && g.lr_lora >= 0, "distill learning rates must be >= 0");
  check(g.lora_rank >= 1, "distill.lora_rank must be >= 1");
  check(c.snapshot_every >= 0, "distill.snapshot_every must be >= 0");
  check(c.scene.num_splats >= 1, "scene.num_splats must be >= 1");
  check(c.poses.max_rotation >= 0 && c.poses.max_shift >= 0 && c.poses.zoom_lo > 0 &&
            c.poses.zoom_lo <= c.poses.zoom_hi,
        "poses: require nonnegative ranges and 0 < zoom_min <= zoom_max");
  const auto& r = c.roundtrip;
  check(!r.delta_T.empty() && r.states >= 1, "roundtrip needs a nonempty delta_T grid and states >= 1");
  for (int dt : r.delta_T) check(dt >= 1 && dt < c.schedule.steps, "roundtrip.delta_T values must lie in [1, T)");
  check(r.rho_min > 0 && r.rho_min <= 1, "roundtrip.rho_min must lie in (0, 1]");
  check(r.precision == "f32" || r.precision == "f64", "roundtrip.precision must be f32 or f64");
  const auto& s = c.sweep;
  check(s.parameter == "rho" || s.parameter == "delta_S" || s.parameter == "delta_T",
        "sweep.parameter must be rho, delta_S or delta_T");
  check(!s.values.empty() && !s.seeds.empty(), "sweep needs values and seeds");
  for (double v : s.values) {
    if (s.parameter == "rho")
      check(v > 0 && v <= 1, "sweep: rho values must lie in (0, 1]");
    else
      check(v >= 1 && v == std::floor(v), "sweep: delta values must be positive integers");
  }
  check(!c.init_compare.seeds.empty(), "init_compare.seeds must be nonempty");
}

inline RunConfig parse_run_config(const json& j) {
  RunConfig c;
  detail::ObjectReader top(j, "config");
  top.get("schema_version", c.schema_version);
  if (c.schema_version != kSchemaVersion)
    throw ConfigError("unsupported schema_version " + std::to_string(c.schema_version));
  top.get("seed", c.seed);
  top.get("output_dir", c.output_dir);
  top.get("checkpoint", c.checkpoint);
  if (const json* s = top.child("schedule")) {
    detail::ObjectReader r(*s, "schedule");
    r.get("steps", c.schedule.steps);
    r.get("beta_start", c.schedule.beta_start);
    r.get("beta_end", c.schedule.beta_end);
    std::string kind = "linear";
    r.get("kind", kind);
    if (kind != "linear") throw ConfigError("schedule.kind must be linear");
    r.finish();
  }
  if (const json* s = top.child("dataset")) {
    detail::ObjectReader r(*s, "dataset");
    r.get("kind", c.dataset.kind);
    r.get("side", c.dataset.side);
    r.get("per_class", c.dataset.per_class);
    r.get("count", c.dataset.count);
    r.get("amplitude", c.dataset.amplitude);
    r.get("variance", c.dataset.variance);
    r.get("path", c.dataset.path);
    r.finish();
  }
  if (const json* s = top.child("model")) {
    detail::ObjectReader r(*s, "model");
    r.get("hidden", c.model.hidden);
    r.get("depth", c.model.depth);
    r.get("temb_dim", c.model.temb_dim);
    r.finish();
  }
  if (const json* s = top.child("train")) {
    detail::ObjectReader r(*s, "train");
    r.get("steps", c.train.steps);
    r.get("lr", c.train.lr);
    r.get("batch", c.train.batch);
    r.get("cond_drop_prob", c.train.cond_drop_prob);
    r.finish();
  }
  if (const json* s = top.child("distill")) {
    detail::ObjectReader r(*s, "distill");
    std::string loss = to_string(c.distill.loss), omega_mode = "constant";
    r.get("loss", loss);
    c.distill.loss = parse_loss(loss);
    r.get("rho", c.distill.rho);
    r.get("delta_S", c.distill.delta_S);
    r.get("delta_T", c.distill.delta_T);
    r.get("iterations", c.distill.iterations);
    r.get("omega_mode", omega_mode);
    if (omega_mode == "constant")
      c.distill.omega_mode = OmegaMode::constant;
    else if (omega_mode == "one_minus_alpha_bar")
      c.distill.omega_mode = OmegaMode::one_minus_alpha_bar;
    else
      throw ConfigError("distill.omega_mode must be constant or one_minus_alpha_bar");
    r.get("omega_scale", c.distill.omega_scale);
    r.get("guidance", c.distill.guidance);
    r.get("t_min", c.distill.t_min);
    r.get("t_max", c.distill.t_max);
    r.get("lr_scene", c.distill.lr_scene);
    r.get("lr_lora", c.distill.lr_lora);
    r.get("lora_rank", c.distill.lora_rank);
    r.get("lora_scale", c.distill.lora_scale);
    r.get("target_class", c.target_class);
    r.get("snapshot_every", c.snapshot_every);
    r.finish();
  }
  if (const json* s = top.child("scene")) {
    detail::ObjectReader r(*s, "scene");
    std::string init = to_string(c.scene.init);
    r.get("num_splats", c.scene.num_splats);
    r.get("init", init);
    c.scene.init = parse_init(init);
    r.finish();
  }
  if (const json* s = top.child("poses")) {
    detail::ObjectReader r(*s, "poses");
    r.get("max_rotation", c.poses.max_rotation);
    r.get("max_shift", c.poses.max_shift);
    r.get("zoom_min", c.poses.zoom_lo);
    r.get("zoom_max", c.poses.zoom_hi);
    r.finish();
  }
  if (const json* s = top.child("roundtrip")) {
    detail::ObjectReader r(*s, "roundtrip");
    r.get("delta_T", c.roundtrip.delta_T);
    r.get("states", c.roundtrip.states);
    r.get("rho_min", c.roundtrip.rho_min);
    r.get("precision", c.roundtrip.precision);
    r.finish();
  }
  if (const json* s = top.child("sweep")) {
    detail::ObjectReader r(*s, "sweep");
    r.get("parameter", c.sweep.parameter);
    r.get("values", c.sweep.values);
    r.get("seeds", c.sweep.seeds);
    r.finish();
  }
  if (const json* s = top.child("init_compare")) {
    detail::ObjectReader r(*s, "init_compare");
    r.get("seeds", c.init_compare.seeds);
    r.finish();
  }
  top.finish();
  c.distill.seed = c.seed;
  c.distill.side = c.dataset.side;
  validate(c);
  return c;
}

inline RunConfig load_run_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file '" + path.string() + "' does not exist");
  try {
    return parse_run_config(json::parse(read_text_file(path)));
  } catch (const json::parse_error& e) {
    throw ConfigError("config file '" + path.string() + "' is not valid JSON: " + e.what());
  }
}

/// Inverse of parse_run_config (used to record the effective config next to outputs).
inline json to_json(const RunConfig& c) {
  json j;
  j["schema_version"] = c.schema_version;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["checkpoint"] = c.checkpoint;
  j["schedule"] = {{"steps", c.schedule.steps}, {"beta_start", c.schedule.beta_start},
                   {"beta_end", c.schedule.beta_end}, {"kind", "linear"}};
  j["dataset"] = {{"kind", c.dataset.kind},          {"side", c.dataset.side},
                  {"per_class", c.dataset.per_class}, {"count", c.dataset.count},
                  {"amplitude", c.dataset.amplitude}, {"variance", c.dataset.variance},
                  {"path", c.dataset.path}};
  j["model"] = {{"hidden", c.model.hidden}, {"depth", c.model.depth}, {"temb_dim", c.model.temb_dim}};
  j["train"] = {{"steps", c.train.steps},
                {"lr", c.train.lr},
                {"batch", c.train.batch},
                {"cond_drop_prob", c.train.cond_drop_prob}};
  const auto& g = c.distill;
  j["distill"] = {{"loss", to_string(g.loss)},
                  {"rho", g.rho},
                  {"delta_S", g.delta_S},
                  {"delta_T", g.delta_T},
                  {"iterations", g.iterations},
                  {"omega_mode", g.omega_mode == OmegaMode::constant ? "constant" : "one_minus_alpha_bar"},
                  {"omega_scale", g.omega_scale},
                  {"guidance", g.guidance},
                  {"t_min", g.t_min},
                  {"t_max", g.t_max},
                  {"lr_scene", g.lr_scene},
                  {"lr_lora", g.lr_lora},
                  {"lora_rank", g.lora_rank},
                  {"lora_scale", g.lora_scale},
                  {"target_class", c.target_class},
                  {"snapshot_every", c.snapshot_every}};
  j["scene"] = {{"num_splats", c.scene.num_splats}, {"init", to_string(c.scene.init)}};
  j["poses"] = {{"max_rotation", c.poses.max_rotation},
                {"max_shift", c.poses.max_shift},
                {"zoom_min", c.poses.zoom_lo},
                {"zoom_max", c.poses.zoom_hi}};
  j["roundtrip"] = {{"delta_T", c.roundtrip.delta_T},
                    {"states", c.roundtrip.states},
                    {"rho_min", c.roundtrip.rho_min},
                    {"precision", c.roundtrip.precision}};
  j["sweep"] = {{"parameter", c.sweep.parameter}, {"values", c.sweep.values}, {"seeds", c.sweep.seeds}};
  j["init_compare"] = {{"seeds", c.init_compare.seeds}};
  return j;
}

inline fs::path output_root() {
  const char* env = std::getenv(kOutputRootEnv);
  return env && *env ? fs::path(env) : fs::path("runs");
}

/// Relative artifact paths (output_dir, checkpoint) live under the output root.
inline fs::path resolve_artifact(const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : output_root() / path;
}

inline fs::path output_dir_for(const RunConfig& c, const std::string& command) {
  return resolve_artifact(c.output_dir.empty() ? command : c.output_dir);
}

}  // namespace esm
