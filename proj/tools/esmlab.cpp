// esmlab: command-line front end for the toy distillation lab.
//
// Flags override fields of the JSON config (or of the defaults when no
// --config is given); the merged document goes through the same strict
// parser either way.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "esm/harness.hpp"
#include "esm/verify.hpp"

namespace {

enum Exit { kOk = 0, kConfigError = 1, kNumericError = 2, kVerifyFailed = 3 };

struct Overrides {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output_dir, checkpoint, dataset, dataset_path, loss, init, target_class, parameter,
      precision;
  std::optional<int> side, steps, iterations, delta_S, delta_T, num_splats, states, snapshot_every;
  std::optional<double> rho;
  std::vector<double> values;
  std::vector<std::uint64_t> seeds;
  std::vector<int> delta_T_grid;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("-c,--config", o.config_path, "JSON run config");
  cmd->add_option("--seed", o.seed, "master seed");
  cmd->add_option("--output-dir", o.output_dir, "output directory (relative paths resolve under $ESMLAB_OUTPUT_ROOT)");
}

void add_checkpoint(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--checkpoint", o.checkpoint, "denoiser checkpoint directory");
}

void add_dataset(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--dataset", o.dataset, "shapes | gaussian | file");
  cmd->add_option("--dataset-path", o.dataset_path, "dataset directory for --dataset file");
  cmd->add_option("--side", o.side, "image side in pixels");
}

void add_distill(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--loss", o.loss, "sds | ism | esm");
  cmd->add_option("--rho", o.rho, "mixing ratio");
  cmd->add_option("--delta-S", o.delta_S, "inversion stride");
  cmd->add_option("--delta-T", o.delta_T, "interval length");
  cmd->add_option("--iterations", o.iterations, "total distillation iterations");
  cmd->add_option("--init", o.init, "random | data_fitted");
  cmd->add_option("--num-splats", o.num_splats, "splat count");
  cmd->add_option("--target-class", o.target_class, "class name to distill");
  cmd->add_option("--snapshot-every", o.snapshot_every, "snapshot period in iterations (0 disables)");
}

void set_if(esm::json& j, const char* a, const char* b, const auto& opt) {
  if (opt) j[a][b] = *opt;
}

esm::RunConfig build_config(const Overrides& o) {
  esm::json j = esm::json{{"schema_version", esm::kSchemaVersion}};
  if (!o.config_path.empty()) {
    const auto text = esm::read_text_file(o.config_path);
    try {
      j = esm::json::parse(text);
    } catch (const esm::json::parse_error& e) {
      throw esm::ConfigError("config '" + o.config_path + "' is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw esm::ConfigError("config root must be an object");
  }
  if (o.seed) j["seed"] = *o.seed;
  if (o.output_dir) j["output_dir"] = *o.output_dir;
  if (o.checkpoint) j["checkpoint"] = *o.checkpoint;
  set_if(j, "dataset", "kind", o.dataset);
  set_if(j, "dataset", "path", o.dataset_path);
  set_if(j, "dataset", "side", o.side);
  set_if(j, "train", "steps", o.steps);
  set_if(j, "distill", "loss", o.loss);
  set_if(j, "distill", "rho", o.rho);
  set_if(j, "distill", "delta_S", o.delta_S);
  set_if(j, "distill", "delta_T", o.delta_T);
  set_if(j, "distill", "iterations", o.iterations);
  set_if(j, "distill", "target_class", o.target_class);
  set_if(j, "distill", "snapshot_every", o.snapshot_every);
  set_if(j, "scene", "init", o.init);
  set_if(j, "scene", "num_splats", o.num_splats);
  set_if(j, "roundtrip", "states", o.states);
  set_if(j, "roundtrip", "precision", o.precision);
  if (!o.delta_T_grid.empty()) j["roundtrip"]["delta_T"] = o.delta_T_grid;
  set_if(j, "sweep", "parameter", o.parameter);
  if (!o.values.empty()) j["sweep"]["values"] = o.values;
  if (!o.seeds.empty()) {
    j["sweep"]["seeds"] = o.seeds;
    j["init_compare"]["seeds"] = o.seeds;
  }
  return esm::parse_run_config(j);
}

int run_verify(const std::optional<std::string>& out, const std::string& fault) {
  const esm::Fault f = esm::parse_fault(fault);
  const auto report = esm::run_verify_suite(f);
  const esm::fs::path dir = out ? esm::resolve_artifact(*out) : esm::output_root() / "verify";
  esm::fs::create_directories(dir);
  report.write_csv(dir / "verify.csv");
  std::size_t failed = 0;
  for (const auto& r : report.rows) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.module << '.' << r.property << "  measured="
              << esm::format_number(r.measured) << ' ' << r.relation << ' ' << esm::format_number(r.threshold) << '\n';
    failed += !r.passed;
  }
  std::cout << (report.rows.size() - failed) << '/' << report.rows.size() << " properties hold; report "
            << (dir / "verify.csv").string() << '\n';
  return failed ? kVerifyFailed : kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"esmlab: exact score matching on a toy splat-and-diffusion lab"};
  app.require_subcommand(1);
  Overrides o;
  std::optional<std::string> resume;
  std::string fault;

  auto* train = app.add_subcommand("train-denoiser", "train the toy denoiser; writes checkpoint and loss.csv");
  add_common(train, o);
  add_checkpoint(train, o);
  add_dataset(train, o);
  train->add_option("--steps", o.steps, "optimizer steps");

  auto* rt = app.add_subcommand("roundtrip", "naive vs coupled inversion reconstruction errors");
  add_common(rt, o);
  add_checkpoint(rt, o);
  add_dataset(rt, o);
  rt->add_option("--states", o.states, "number of seeded states");
  rt->add_option("--precision", o.precision, "f32 | f64");
  rt->add_option("--delta-T", o.delta_T_grid, "interval grid");

  auto* dist = app.add_subcommand("distill", "optimize a splat scene against the denoiser");
  add_common(dist, o);
  add_checkpoint(dist, o);
  add_dataset(dist, o);
  add_distill(dist, o);
  dist->add_option("--resume", resume, "scene snapshot directory to continue from");

  auto* sweep = app.add_subcommand("sweep", "one distill run per parameter value and seed");
  add_common(sweep, o);
  add_checkpoint(sweep, o);
  add_dataset(sweep, o);
  add_distill(sweep, o);
  sweep->add_option("--parameter", o.parameter, "rho | delta_S | delta_T");
  sweep->add_option("--values", o.values, "grid values");
  sweep->add_option("--seeds", o.seeds, "seeds per value");

  auto* ic = app.add_subcommand("init-compare", "paired random vs data-fitted initialization runs");
  add_common(ic, o);
  add_checkpoint(ic, o);
  add_dataset(ic, o);
  add_distill(ic, o);
  ic->add_option("--seeds", o.seeds, "seeds");

  auto* ver = app.add_subcommand("verify", "run the invariant suite; writes verify.csv");
  ver->add_option("--output-dir", o.output_dir, "report directory");
  ver->add_option("--inject-fault", fault, "mix-sign: break the mixing step on purpose");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    if (ver->parsed()) return run_verify(o.output_dir, fault);
    const esm::RunConfig cfg = build_config(o);
    if (train->parsed()) {
      const auto out = esm::cmd_train_denoiser(cfg);
      std::cout << "checkpoint " << out.checkpoint_dir.string() << "\nloss " << esm::format_number(out.initial_loss)
                << " -> " << esm::format_number(out.final_loss) << '\n';
    } else if (rt->parsed()) {
      const auto out = esm::cmd_roundtrip(cfg);
      for (const auto& s : out.summary)
        std::cout << "delta_T=" << s.delta_T << " median naive_err=" << esm::format_number(s.median_naive)
                  << " max coupled_err=" << esm::format_number(s.max_coupled) << '\n';
    } else if (dist->parsed()) {
      const auto out = esm::cmd_distill(cfg, resume ? std::optional<esm::fs::path>(esm::resolve_artifact(*resume))
                                                    : std::nullopt);
      std::cout << "iterations " << out.first_iteration << ".." << out.end_iteration << "  mse "
                << esm::format_number(out.initial_mse) << " -> " << esm::format_number(out.final_mse) << '\n';
    } else if (sweep->parsed()) {
      const auto out = esm::cmd_sweep(cfg);
      for (const auto& m : out.medians)
        std::cout << cfg.sweep.parameter << '=' << esm::format_number(m.value) << " median final_mse="
                  << esm::format_number(m.median_final_mse) << " divergent=" << m.divergent_runs << '\n';
    } else if (ic->parsed()) {
      const auto out = esm::cmd_init_compare(cfg);
      std::cout << "median final mse: random " << esm::format_number(out.median_random) << ", data_fitted "
                << esm::format_number(out.median_data_fitted) << '\n';
    }
    return kOk;
  } catch (const esm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const esm::IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return kConfigError;
  } catch (const esm::ContractViolation& e) {
    std::cerr << "invalid argument: " << e.what() << '\n';
    return kConfigError;
  } catch (const esm::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumericError;
  }
}
