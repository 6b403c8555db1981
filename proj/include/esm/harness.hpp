#pragma once

// Experiment commands behind the esmlab CLI. Each command validates its
// inputs before touching the filesystem and throws ConfigError / IoError /
// NumericError; the CLI maps those to exit codes.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "esm/config.hpp"
#include "esm/dataset.hpp"
#include "esm/distill.hpp"
#include "esm/inversion.hpp"
#include "esm/io.hpp"
#include "esm/serialize.hpp"

namespace esm {

inline double median(std::vector<double> xs) {
  if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

inline std::string pad_int(long v, int width) {
  std::string s = std::to_string(v);
  return s.size() >= std::size_t(width) ? s : std::string(std::size_t(width) - s.size(), '0') + s;
}

/// Builds (or loads) the dataset described by the config. Throws ConfigError for a missing file.
inline Dataset<float> make_dataset(const DatasetConfig& d, std::uint64_t seed) {
  if (d.kind == "file") {
    if (!fs::exists(fs::path(d.path) / "manifest.json"))
      throw ConfigError("dataset path '" + d.path + "' does not exist or holds no manifest.json");
    return dataset_from_checkpoint<float>(read_checkpoint(d.path));
  }
  Rng rng = Rng::derive(seed, 0xDA7Aull);
  if (d.kind == "gaussian")
    return make_gaussian_dataset(gaussian_mean_pattern<float>(d.side, d.amplitude), d.variance, d.count, rng);
  return make_shape_dataset<float>(d.side, d.per_class, rng);
}

inline int resolve_class(const std::string& name, const std::vector<std::string>& class_names, int num_classes) {
  if (!name.empty() && std::all_of(name.begin(), name.end(), [](unsigned char c) { return std::isdigit(c); })) {
    const int id = std::stoi(name);
    if (id >= num_classes) throw ConfigError("target class " + name + " outside the model's classes");
    return id;
  }
  for (std::size_t i = 0; i < class_names.size(); ++i)
    if (class_names[i] == name) return int(i);
  throw ConfigError("unknown target class '" + name + "'");
}

// ---------------------------------------------------------------- train-denoiser

struct TrainOutcome {
  fs::path checkpoint_dir;
  fs::path loss_csv;
  double initial_loss = 0.0;  // smoothed
  double final_loss = 0.0;    // smoothed
};

inline TrainOutcome cmd_train_denoiser(const RunConfig& cfg) {
  validate(cfg);
  const NoiseSchedule sched = build_schedule(cfg.schedule.steps, cfg.schedule.beta_start, cfg.schedule.beta_end);
  const Dataset<float> data = make_dataset(cfg.dataset, cfg.seed);
  if (data.size() == 0) throw ConfigError("dataset is empty");
  DenoiserSpec spec{data.side, data.num_classes, cfg.model.hidden, cfg.model.depth, cfg.model.temb_dim};
  Rng init_rng = Rng::derive(cfg.seed, 1);
  DenoiserModel<float> model(spec, init_rng);
  Rng train_rng = Rng::derive(cfg.seed, 2);
  const TrainResult result = train_denoiser(model, data, sched, cfg.train, train_rng);

  TrainOutcome out;
  const fs::path dir = output_dir_for(cfg, "train-denoiser");
  out.checkpoint_dir = resolve_artifact(cfg.checkpoint);
  out.loss_csv = dir / "loss.csv";
  const auto sm = smoothed(result.losses, 50);
  if (!sm.empty()) {
    out.initial_loss = sm.front();
    out.final_loss = sm.back();
  }
  json meta;
  meta["seed"] = cfg.seed;
  meta["train"] = {{"steps", cfg.train.steps},
                   {"lr", cfg.train.lr},
                   {"batch", cfg.train.batch},
                   {"cond_drop_prob", cfg.train.cond_drop_prob}};
  meta["dataset"] = to_json(cfg)["dataset"];
  meta["final_smoothed_loss"] = out.final_loss;
  write_checkpoint(out.checkpoint_dir, denoiser_checkpoint(model, sched, data.class_names, meta));
  fs::create_directories(dir);
  CsvWriter csv(out.loss_csv, {"step", "loss", "smoothed_loss"});
  for (std::size_t i = 0; i < result.losses.size(); ++i)
    csv.row({std::to_string(i), format_number(result.losses[i]), format_number(sm[i])});
  return out;
}

// ---------------------------------------------------------------- shared context

/// Frozen inputs of every distillation-type command.
struct LabContext {
  LoadedDenoiser den;
  int target_label = 0;
  Tensor<float> target_pixels;  // class mean, pixel units
  Dataset<float> data;
};

inline LoadedDenoiser load_denoiser_checked(const RunConfig& cfg) {
  const fs::path dir = resolve_artifact(cfg.checkpoint);
  if (!fs::exists(dir / "manifest.json"))
    throw ConfigError("denoiser checkpoint '" + dir.string() + "' not found (run train-denoiser first)");
  return load_denoiser(dir);
}

inline LabContext load_context(const RunConfig& cfg) {
  validate(cfg);
  LabContext ctx{load_denoiser_checked(cfg), 0, {}, {}};
  const auto& spec = ctx.den.model.spec();
  if (spec.side != cfg.dataset.side)
    throw ConfigError("dataset.side " + std::to_string(cfg.dataset.side) + " does not match the checkpoint side " +
                      std::to_string(spec.side));
  if (cfg.distill.t_max > ctx.den.schedule.steps()) throw ConfigError("distill.t_max exceeds the checkpoint schedule");
  ctx.data = make_dataset(cfg.dataset, cfg.seed);
  const auto& names = ctx.den.class_names.empty() ? ctx.data.class_names : ctx.den.class_names;
  ctx.target_label = resolve_class(cfg.target_class, names, spec.num_classes);
  ctx.target_pixels = class_mean_pixels(ctx.data, ctx.target_label);
  return ctx;
}

// ---------------------------------------------------------------- roundtrip

struct RoundtripRow {
  int delta_T = 0;
  int state = 0;
  int s = 0;
  int t = 0;
  double rho = 0.0;
  double naive_err = 0.0;
  double coupled_err = 0.0;
};

struct RoundtripSummary {
  int delta_T = 0;
  double median_naive = 0.0;
  double median_coupled = 0.0;
  double max_coupled = 0.0;
};

struct RoundtripOutcome {
  std::vector<RoundtripRow> rows;
  std::vector<RoundtripSummary> summary;
};

namespace detail {

template <typename T>
std::vector<RoundtripRow> roundtrip_rows(const DenoiserModel<T>& model, const NoiseSchedule& sched,
                                         const Dataset<float>& data, const RoundtripConfig& rc, std::uint64_t seed) {
  const int max_dt = *std::max_element(rc.delta_T.begin(), rc.delta_T.end());
  if (max_dt + 1 > sched.steps()) throw ConfigError("roundtrip: delta_T grid does not fit in the schedule");
  auto eps = [&model](const Tensor<T>& x, int step) { return predict_eps(model, x, std::max(step, 1), Condition::none()); };
  std::vector<RoundtripRow> rows;
  // States are shared across the delta_T grid: same x_s and s, t = s + delta_T.
  for (int i = 0; i < rc.states; ++i) {
    Rng rng = Rng::derive(seed, 0x5EED0000ull + std::uint64_t(i));
    const auto idx = std::size_t(rng.uniform_int(0, int(data.size()) - 1));
    const int s = rng.uniform_int(1, sched.steps() - max_dt);
    const double rho = rng.uniform(rc.rho_min, 1.0);
    const Tensor<T> x0 = data.images[idx].template cast<T>();
    const Tensor<T> x_s = q_sample(x0, s, rng.normal_tensor<T>(x0.shape()), sched);
    for (int dt : rc.delta_T) {
      const int t = s + dt;
      const Tensor<T> naive_t = naive_interval(x_s, s, t, eps, sched);
      const Tensor<T> naive_back = naive_reverse(naive_t, t, s, eps, sched);
      const auto fwd = coupled_invert(CoupledState<T>::start(x_s, s), t, eps, rho, sched);
      const Tensor<T> x_int = unmix(fwd.state.x, fwd.state.x_aux, rho);
      const auto back = coupled_exact_reverse(x_int, fwd.state.x_aux, t, s, eps, sched);
      const double coupled = std::max(rel_err(back.x, x_s), rel_err(back.x_aux, x_s));
      rows.push_back({dt, i, s, t, rho, rel_err(naive_back, x_s), coupled});
    }
  }
  return rows;
}

}  // namespace detail

inline RoundtripOutcome cmd_roundtrip(const RunConfig& cfg) {
  validate(cfg);
  const LoadedDenoiser den = load_denoiser_checked(cfg);
  DatasetConfig dcfg = cfg.dataset;
  dcfg.side = den.model.spec().side;
  const Dataset<float> data = make_dataset(dcfg, cfg.seed);
  if (data.side != den.model.spec().side) throw ConfigError("roundtrip: dataset side does not match the checkpoint");
  RoundtripOutcome out;
  if (cfg.roundtrip.precision == "f64") {
    const DenoiserModel<double> m64(den.model.spec(), den.model.params().cast<double>());
    out.rows = detail::roundtrip_rows(m64, den.schedule, data, cfg.roundtrip, cfg.seed);
  } else {
    out.rows = detail::roundtrip_rows(den.model, den.schedule, data, cfg.roundtrip, cfg.seed);
  }
  for (int dt : cfg.roundtrip.delta_T) {
    std::vector<double> naive, coupled;
    for (const auto& r : out.rows)
      if (r.delta_T == dt) {
        naive.push_back(r.naive_err);
        coupled.push_back(r.coupled_err);
      }
    out.summary.push_back({dt, median(naive), median(coupled), *std::max_element(coupled.begin(), coupled.end())});
  }
  const fs::path dir = output_dir_for(cfg, "roundtrip");
  fs::create_directories(dir);
  {
    CsvWriter csv(dir / "roundtrip.csv", {"delta_T", "state", "s", "t", "rho", "naive_err", "coupled_err"});
    for (const auto& r : out.rows)
      csv.row({std::to_string(r.delta_T), std::to_string(r.state), std::to_string(r.s), std::to_string(r.t),
               format_number(r.rho), format_number(r.naive_err), format_number(r.coupled_err)});
  }
  CsvWriter csv(dir / "roundtrip_summary.csv", {"delta_T", "median_naive_err", "median_coupled_err", "max_coupled_err"});
  for (const auto& s : out.summary)
    csv.row({std::to_string(s.delta_T), format_number(s.median_naive), format_number(s.median_coupled),
             format_number(s.max_coupled)});
  return out;
}

// ---------------------------------------------------------------- distill

inline const std::vector<std::string>& iteration_csv_header() {
  static const std::vector<std::string> h{"iteration", "t",        "s",          "loss_variant",
                                          "eps_ism",   "eps_esm",  "term1",      "term2",
                                          "eta_norm",  "delta_norm", "grad_norm", "lora_loss"};
  return h;
}

inline std::vector<std::string> iteration_csv_row(const IterationLog& r) {
  return {std::to_string(r.iteration),        std::to_string(r.t),
          std::to_string(r.s),                to_string(r.loss),
          format_number(r.report.eps_ism),    format_number(r.report.eps_esm),
          format_number(r.report.term1),      format_number(r.report.term2),
          format_number(r.report.eta_norm),   format_number(r.report.delta_norm),
          format_number(r.grad_norm),         format_number(r.lora_loss)};
}

struct DistillOutcome {
  double initial_mse = 0.0;
  double final_mse = 0.0;
  double sharpness = 0.0;
  double mean_eps_ism = 0.0;
  double mean_eps_esm = 0.0;
  double esm_below_ism_rate = 0.0;  // fraction of iterations with eps_esm < eps_ism (ESM only)
  int first_iteration = 0;
  int end_iteration = 0;
  Tensor<float> initial_render;
  Tensor<float> final_render;
  std::vector<IterationLog> log;
};

struct DistillRunOptions {
  fs::path out_dir;
  bool write_artifacts = true;
  int snapshot_every = 0;
  std::optional<InitMode> init;               // overrides cfg.scene.init
  std::optional<DistillSession<float>> resume;
};

inline Tensor<float> canonical_render(const SplatScene<float>& scene, int side) {
  return render(scene, CameraPose{}, side).image;
}

inline void write_summary_csv(const fs::path& path, const std::vector<std::pair<std::string, std::string>>& kv) {
  CsvWriter csv(path, {"metric", "value"});
  for (const auto& [k, v] : kv) csv.row({k, v});
}

/// One distillation run against the frozen context. MSE is measured on the
/// identity-pose render against the target class mean.
inline DistillOutcome run_distill(const LabContext& ctx, const RunConfig& cfg, DistillRunOptions opts) {
  DistillConfig dc = cfg.distill;
  dc.seed = cfg.seed;
  dc.side = ctx.den.model.spec().side;
  dc.target_label = ctx.target_label;
  validate(dc, ctx.den.schedule);

  DistillSession<float> session;
  if (opts.resume) {
    session = std::move(*opts.resume);
    if (session.scene.channels() != 1) throw ConfigError("resume: only grayscale scenes can be distilled");
    if (dc.loss == LossKind::esm && !session.adapter) {
      Rng rng = Rng::derive(dc.seed, 0xADA97E5ull);
      session.adapter = make_lora(ctx.den.model, LoraConfig{dc.lora_rank, dc.lora_scale, dc.lr_lora}, rng);
    }
  } else {
    Rng init_rng = Rng::derive(dc.seed, 0x5CE7Eull);
    const InitMode mode = opts.init.value_or(cfg.scene.init);
    session = start_session(init_scene(mode, std::size_t(cfg.scene.num_splats), init_rng, &ctx.target_pixels),
                            ctx.den.model, dc);
  }

  DistillOutcome out;
  out.first_iteration = session.iteration;
  out.initial_render = canonical_render(session.scene, dc.side);
  out.initial_mse = mean_squared_diff(out.initial_render, ctx.target_pixels);
  dc.iterations = std::max(0, cfg.distill.iterations - session.iteration);

  std::optional<CsvWriter> csv;
  if (opts.write_artifacts) {
    fs::create_directories(opts.out_dir);
    write_text_file(opts.out_dir / "config.json", to_json(cfg).dump(2) + "\n");
    write_png(opts.out_dir / "target.png", ctx.target_pixels);
    write_png(opts.out_dir / "render_initial.png", out.initial_render);
    csv.emplace(opts.out_dir / "iterations.csv", iteration_csv_header());
  }
  const int snap = opts.write_artifacts ? opts.snapshot_every : 0;
  auto observer = [&](const IterationLog& row) {
    if (csv) csv->row(iteration_csv_row(row));
    if (snap > 0 && (row.iteration + 1) % snap == 0) {
      Checkpoint ck = session_checkpoint(session);
      ck.meta["iteration"] = row.iteration + 1;  // the update for row.iteration is already applied
      const fs::path sdir = opts.out_dir / "snapshots" / ("iter_" + pad_int(row.iteration + 1, 6));
      write_checkpoint(sdir, ck);
      write_png(sdir / "render.png", canonical_render(session.scene, dc.side));
    }
  };
  const PoseSampler poses = cfg.poses;
  out.log = distill_loop(session, poses, ctx.den.model, ctx.den.schedule, dc, observer);
  out.end_iteration = session.iteration;
  out.final_render = canonical_render(session.scene, dc.side);
  out.final_mse = mean_squared_diff(out.final_render, ctx.target_pixels);
  out.sharpness = sharpness(out.final_render);
  if (!out.log.empty()) {
    std::size_t below = 0;
    for (const auto& r : out.log) {
      out.mean_eps_ism += r.report.eps_ism;
      out.mean_eps_esm += r.report.eps_esm;
      below += r.report.eps_esm < r.report.eps_ism;
    }
    out.mean_eps_ism /= double(out.log.size());
    out.mean_eps_esm /= double(out.log.size());
    out.esm_below_ism_rate = double(below) / double(out.log.size());
  }
  if (opts.write_artifacts) {
    csv->flush();
    write_checkpoint(opts.out_dir / "scene", session_checkpoint(session));
    write_png(opts.out_dir / "render_final.png", out.final_render);
    std::vector<std::pair<std::string, std::string>> kv{
        {"loss_variant", to_string(dc.loss)},
        {"first_iteration", std::to_string(out.first_iteration)},
        {"end_iteration", std::to_string(out.end_iteration)},
        {"initial_mse", format_number(out.initial_mse)},
        {"final_mse", format_number(out.final_mse)},
        {"sharpness", format_number(out.sharpness)},
        {"mean_eps_ism", format_number(out.mean_eps_ism)}};
    if (dc.loss == LossKind::esm) {
      kv.emplace_back("mean_eps_esm", format_number(out.mean_eps_esm));
      kv.emplace_back("mean_eps_esm_minus_mean_eps_ism", format_number(out.mean_eps_esm - out.mean_eps_ism));
      kv.emplace_back("esm_below_ism_rate", format_number(out.esm_below_ism_rate));
    }
    write_summary_csv(opts.out_dir / "summary.csv", kv);
  }
  return out;
}

inline DistillOutcome cmd_distill(const RunConfig& cfg, const std::optional<fs::path>& resume_from = std::nullopt) {
  const LabContext ctx = load_context(cfg);
  DistillRunOptions opts;
  opts.out_dir = output_dir_for(cfg, "distill");
  opts.snapshot_every = cfg.snapshot_every;
  if (resume_from) {
    if (!fs::exists(*resume_from / "manifest.json"))
      throw ConfigError("resume snapshot '" + resume_from->string() + "' not found");
    opts.resume = session_from_checkpoint<float>(read_checkpoint(*resume_from));
  }
  return run_distill(ctx, cfg, std::move(opts));
}

// ---------------------------------------------------------------- sweep

struct SweepRow {
  double value = 0.0;
  std::uint64_t seed = 0;
  double initial_mse = 0.0;
  double final_mse = std::numeric_limits<double>::quiet_NaN();
  double sharpness = std::numeric_limits<double>::quiet_NaN();
  double mean_eps_ism = std::numeric_limits<double>::quiet_NaN();
  double mean_eps_esm = std::numeric_limits<double>::quiet_NaN();
  bool divergent = false;
  std::string error;
};

struct SweepMedian {
  double value = 0.0;
  double median_final_mse = 0.0;
  double median_sharpness = 0.0;
  int divergent_runs = 0;
};

struct SweepOutcome {
  std::string parameter;
  std::vector<SweepRow> rows;
  std::vector<SweepMedian> medians;

  /// max - min of the per-value median final MSE.
  double median_spread() const {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& m : medians) {
      lo = std::min(lo, m.median_final_mse);
      hi = std::max(hi, m.median_final_mse);
    }
    return hi - lo;
  }
};

inline void apply_sweep_value(RunConfig& rc, const std::string& parameter, double v) {
  if (parameter == "rho")
    rc.distill.rho = v;
  else if (parameter == "delta_S")
    rc.distill.delta_S = int(v);
  else
    rc.distill.delta_T = int(v);
}

/// A run is divergent if it aborted numerically or ended no closer to the target than it started.
inline bool is_divergent(double initial_mse, double final_mse) {
  return !std::isfinite(final_mse) || !(final_mse < initial_mse);
}

inline SweepOutcome run_sweep(const LabContext& ctx, const RunConfig& cfg, const fs::path& dir, bool write_artifacts) {
  SweepOutcome out;
  out.parameter = cfg.sweep.parameter;
  std::vector<Tensor<float>> tiles;
  for (double v : cfg.sweep.values) {
    for (std::uint64_t seed : cfg.sweep.seeds) {
      RunConfig rc = cfg;
      rc.seed = seed;
      apply_sweep_value(rc, cfg.sweep.parameter, v);
      SweepRow row;
      row.value = v;
      row.seed = seed;
      DistillRunOptions opts;
      opts.write_artifacts = write_artifacts;
      opts.out_dir = dir / "runs" / (cfg.sweep.parameter + "_" + format_number(v)) / ("seed_" + std::to_string(seed));
      Tensor<float> tile({std::size_t(ctx.den.model.spec().side), std::size_t(ctx.den.model.spec().side)}, 0.5f);
      try {
        const DistillOutcome r = run_distill(ctx, rc, std::move(opts));
        row.initial_mse = r.initial_mse;
        row.final_mse = r.final_mse;
        row.sharpness = r.sharpness;
        row.mean_eps_ism = r.mean_eps_ism;
        row.mean_eps_esm = r.mean_eps_esm;
        row.divergent = is_divergent(r.initial_mse, r.final_mse);
        tile = r.final_render;
      } catch (const NumericError& e) {
        row.divergent = true;
        row.error = e.what();
      }
      tiles.push_back(std::move(tile));
      out.rows.push_back(std::move(row));
    }
    SweepMedian m;
    m.value = v;
    std::vector<double> mse, sharp;
    for (const auto& r : out.rows)
      if (r.value == v) {
        if (std::isfinite(r.final_mse)) mse.push_back(r.final_mse);
        if (std::isfinite(r.sharpness)) sharp.push_back(r.sharpness);
        m.divergent_runs += r.divergent;
      }
    m.median_final_mse = median(mse);
    m.median_sharpness = median(sharp);
    out.medians.push_back(m);
  }
  if (write_artifacts) {
    fs::create_directories(dir);
    {
      CsvWriter csv(dir / "sweep_summary.csv", {"parameter", "value", "seed", "initial_mse", "final_mse", "sharpness",
                                                "divergent", "mean_eps_ism", "mean_eps_esm", "error"});
      for (const auto& r : out.rows)
        csv.row({out.parameter, format_number(r.value), std::to_string(r.seed), format_number(r.initial_mse),
                 format_number(r.final_mse), format_number(r.sharpness), r.divergent ? "1" : "0",
                 format_number(r.mean_eps_ism), format_number(r.mean_eps_esm), r.error});
    }
    {
      CsvWriter csv(dir / "sweep_medians.csv",
                    {"parameter", "value", "median_final_mse", "median_sharpness", "divergent_runs"});
      for (const auto& m : out.medians)
        csv.row({out.parameter, format_number(m.value), format_number(m.median_final_mse),
                 format_number(m.median_sharpness), std::to_string(m.divergent_runs)});
    }
    // One row per value, one column per seed.
    write_png(dir / "contact_sheet.png", contact_sheet(tiles, int(cfg.sweep.seeds.size())));
  }
  return out;
}

inline SweepOutcome cmd_sweep(const RunConfig& cfg) {
  const LabContext ctx = load_context(cfg);
  return run_sweep(ctx, cfg, output_dir_for(cfg, "sweep"), true);
}

// ---------------------------------------------------------------- init-compare

struct InitCompareRow {
  std::uint64_t seed = 0;
  InitMode init = InitMode::random;
  double initial_mse = 0.0;
  double final_mse = 0.0;
};

struct InitCompareOutcome {
  std::vector<InitCompareRow> rows;
  double median_random = 0.0;
  double median_data_fitted = 0.0;
};

inline InitCompareOutcome run_init_compare(const LabContext& ctx, const RunConfig& cfg, const fs::path& dir,
                                           bool write_artifacts) {
  InitCompareOutcome out;
  std::vector<Tensor<float>> tiles;
  std::vector<double> rnd, fit;
  for (std::uint64_t seed : cfg.init_compare.seeds) {
    tiles.push_back(ctx.target_pixels);
    for (InitMode mode : {InitMode::random, InitMode::data_fitted}) {
      RunConfig rc = cfg;
      rc.seed = seed;  // shared between the pair: identical pose and timestep draws
      DistillRunOptions opts;
      opts.write_artifacts = write_artifacts;
      opts.init = mode;
      opts.out_dir = dir / "runs" / (std::string(to_string(mode)) + "_seed_" + std::to_string(seed));
      const DistillOutcome r = run_distill(ctx, rc, std::move(opts));
      out.rows.push_back({seed, mode, r.initial_mse, r.final_mse});
      (mode == InitMode::random ? rnd : fit).push_back(r.final_mse);
      tiles.push_back(r.final_render);
    }
  }
  out.median_random = median(rnd);
  out.median_data_fitted = median(fit);
  if (write_artifacts) {
    fs::create_directories(dir);
    {
      CsvWriter csv(dir / "init_compare.csv", {"seed", "init", "initial_mse", "final_mse"});
      for (const auto& r : out.rows)
        csv.row({std::to_string(r.seed), to_string(r.init), format_number(r.initial_mse), format_number(r.final_mse)});
    }
    write_summary_csv(dir / "init_compare_summary.csv",
                      {{"median_final_mse_random", format_number(out.median_random)},
                       {"median_final_mse_data_fitted", format_number(out.median_data_fitted)}});
    // Columns: target, random, data_fitted.
    write_png(dir / "contact_sheet.png", contact_sheet(tiles, 3));
  }
  return out;
}

inline InitCompareOutcome cmd_init_compare(const RunConfig& cfg) {
  const LabContext ctx = load_context(cfg);
  return run_init_compare(ctx, cfg, output_dir_for(cfg, "init-compare"), true);
}

}  // namespace esm
