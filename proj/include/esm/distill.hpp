#pragma once

// Score-distillation gradient estimators (SDS, ISM, ESM), the optimization
// loop over a splat scene, and the accumulated-error bookkeeping.
//
// The diffusion latent of a render is x0 = 2 * pixels - 1, so every
// latent-space cotangent reaches render_vjp multiplied by 2.

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "esm/adam.hpp"
#include "esm/denoiser.hpp"
#include "esm/inversion.hpp"
#include "esm/lora.hpp"
#include "esm/splat.hpp"

namespace esm {

enum class LossKind { sds, ism, esm };
enum class OmegaMode { constant, one_minus_alpha_bar };

inline const char* to_string(LossKind k) {
  switch (k) {
    case LossKind::sds:
      return "sds";
    case LossKind::ism:
      return "ism";
    default:
      return "esm";
  }
}

inline LossKind parse_loss(const std::string& s) {
  if (s == "sds") return LossKind::sds;
  if (s == "ism") return LossKind::ism;
  if (s == "esm") return LossKind::esm;
  throw ConfigError("unknown loss variant '" + s + "' (expected sds, ism or esm)");
}

struct DistillConfig {
  LossKind loss = LossKind::esm;
  double rho = 0.93;
  int delta_S = 200;
  int delta_T = 50;
  int iterations = 5000;
  OmegaMode omega_mode = OmegaMode::constant;
  double omega_scale = 1.0;
  double guidance = 1.0;
  int t_min = 1;
  int t_max = 1000;
  double lr_scene = 1e-2;
  double lr_lora = 1e-3;
  int lora_rank = 4;
  double lora_scale = 1.0;
  int target_label = 0;
  int side = 32;
  std::uint64_t seed = 0;
};

inline void validate(const DistillConfig& cfg, const NoiseSchedule& sched) {
  if (!(cfg.rho > 0.0 && cfg.rho <= 1.0)) throw ConfigError("distill: rho must lie in (0, 1]");
  if (cfg.delta_S < 1 || cfg.delta_T < 1) throw ConfigError("distill: delta_S and delta_T must be >= 1");
  if (!(1 <= cfg.t_min && cfg.t_min < cfg.t_max && cfg.t_max <= sched.steps()))
    throw ConfigError("distill: require 1 <= t_min < t_max <= T");
  if (cfg.iterations < 0) throw ConfigError("distill: iterations must be >= 0");
  if (!(cfg.lr_scene >= 0.0 && cfg.lr_lora >= 0.0)) throw ConfigError("distill: learning rates must be >= 0");
  if (cfg.side < 8) throw ConfigError("distill: side must be >= 8");
}

inline double omega(const DistillConfig& cfg, const NoiseSchedule& sched, int t) {
  const double base = cfg.omega_mode == OmegaMode::constant ? 1.0 : 1.0 - sched.alpha_bar(t);
  return cfg.omega_scale * base;
}

/// Accumulated-error quantities. eps_esm is always term1 + term2.
struct ErrorReport {
  double eps_ism = 0.0;
  double eps_esm = 0.0;
  double term1 = 0.0;
  double term2 = 0.0;
  double eta_norm = 0.0;
  double delta_norm = 0.0;
};

template <typename T>
struct DistillGradient {
  SplatGrad<T> grad;
  Tensor<T> cotangent;  // latent-space, includes omega(t)
  ErrorReport report;
  int t = 0;
  int s = 0;
};

/// The three predictors the estimators consult. `cond` is eps(x, t, y) with
/// guidance applied, `null` is eps(x, t, null) and `lo` the adapted eps_lo.
template <typename T>
struct EpsFns {
  NoisePredictor<T> cond;
  NoisePredictor<T> null;
  NoisePredictor<T> lo;
};

namespace detail {

/// Network timestep for an interval endpoint; s may be clamped to 0 when t <= delta_T.
inline int net_step(int s) { return std::max(s, 1); }

template <typename T>
SplatGrad<T> pull_back(const SplatScene<T>& scene, const RenderResult<T>& r, const Tensor<T>& latent_cot) {
  return render_vjp(scene, r.cache, T(2) * latent_cot);
}

template <typename T>
int sample_t(const DistillConfig& cfg, Rng& rng) {
  return rng.uniform_int(cfg.t_min, cfg.t_max);
}

}  // namespace detail

/// Predictors of a trained denoiser; `lo` is present only when an adapter is given.
template <typename T>
EpsFns<T> model_eps(const DenoiserModel<T>& model, const DistillConfig& cfg, const LoraAdapter<T>* adapter = nullptr) {
  EpsFns<T> f;
  const int label = cfg.target_label;
  const double g = cfg.guidance;
  f.cond = [&model, label, g](const Tensor<T>& x, int t) {
    return predict_eps(model, x, detail::net_step(t), Condition::label(label), g);
  };
  f.null = [&model](const Tensor<T>& x, int t) {
    return predict_eps(model, x, detail::net_step(t), Condition::none());
  };
  if (adapter)
    f.lo = [&model, adapter](const Tensor<T>& x, int t) {
      return predict_eps_lora(model, *adapter, x, detail::net_step(t), Condition::none());
    };
  return f;
}

/// SDS from an existing render.
template <typename T>
DistillGradient<T> sds_gradient(const SplatScene<T>& scene, const RenderResult<T>& r, const EpsFns<T>& eps,
                                const NoiseSchedule& sched, const DistillConfig& cfg, Rng& rng) {
  DistillGradient<T> out;
  out.t = detail::sample_t<T>(cfg, rng);
  out.s = 0;
  const Tensor<T> x0 = to_latent(r.image);
  const Tensor<T> noise = rng.normal_tensor<T>(x0.shape());
  const Tensor<T> x_t = q_sample(x0, out.t, noise, sched);
  const Tensor<T> diff = eps.cond(x_t, out.t) - noise;
  out.cotangent = T(omega(cfg, sched, out.t)) * diff;
  out.report.eps_ism = squared_norm(diff);
  out.report.delta_norm = std::sqrt(out.report.eps_ism);
  out.grad = detail::pull_back(scene, r, out.cotangent);
  return out;
}

/// ISM: x_s by naive multi-step inversion, x_t by the naive interval step.
template <typename T>
DistillGradient<T> ism_gradient(const SplatScene<T>& scene, const RenderResult<T>& r, const EpsFns<T>& eps,
                                const NoiseSchedule& sched, const DistillConfig& cfg, Rng& rng) {
  DistillGradient<T> out;
  out.t = detail::sample_t<T>(cfg, rng);
  out.s = std::max(out.t - cfg.delta_T, 0);
  const Tensor<T> x0 = to_latent(r.image);
  const Tensor<T> x_s = naive_invert(x0, out.s, cfg.delta_S, eps.null, sched).x_s;
  const Tensor<T> eps_s = eps.null(x_s, out.s);
  const Tensor<T> x_t = ddim_inversion_transition(x_s, eps_s, out.s, out.t, sched);
  const Tensor<T> delta = eps.cond(x_t, out.t) - eps_s;
  out.cotangent = T(omega(cfg, sched, out.t)) * delta;
  out.report.eps_ism = squared_norm(delta);
  out.report.delta_norm = std::sqrt(out.report.eps_ism);
  out.grad = detail::pull_back(scene, r, out.cotangent);
  return out;
}

/// ESM: naive inversion to x_s, coupled exact interval step with the adapter
/// and ratio mixing, then the ISM-form cotangent at the mixed x_t.
template <typename T>
DistillGradient<T> esm_gradient(const SplatScene<T>& scene, const RenderResult<T>& r, const EpsFns<T>& eps,
                                const NoiseSchedule& sched, const DistillConfig& cfg, Rng& rng) {
  if (!eps.lo) throw ContractViolation("esm_gradient: adapter predictor missing");
  DistillGradient<T> out;
  out.t = detail::sample_t<T>(cfg, rng);
  out.s = std::max(out.t - cfg.delta_T, 0);
  const Tensor<T> x0 = to_latent(r.image);
  const Tensor<T> x_s = naive_invert(x0, out.s, cfg.delta_S, eps.null, sched).x_s;
  const auto step = coupled_invert(CoupledState<T>::start(x_s, out.s), out.t, eps.lo, cfg.rho, sched);
  const Tensor<T>& x_t = step.state.x;
  const Tensor<T> eps_t = eps.cond(x_t, out.t);
  const Tensor<T> eps_s = eps.null(x_s, out.s);
  const Tensor<T> eps_int = eps.null(step.x_int, out.t);
  const Tensor<T> delta = eps_t - eps_s;
  out.cotangent = T(omega(cfg, sched, out.t)) * delta;
  out.report.eps_ism = squared_norm(delta);
  out.report.delta_norm = std::sqrt(out.report.eps_ism);
  out.report.term1 = squared_norm(eps_t - eps_int);
  out.report.term2 = squared_norm(eps_int - eps_s);
  out.report.eps_esm = out.report.term1 + out.report.term2;
  out.report.eta_norm = std::sqrt(out.report.term2);
  out.grad = detail::pull_back(scene, r, out.cotangent);
  return out;
}

/// Model-based wrappers: render under `pose`, then estimate.
template <typename T>
DistillGradient<T> sds_gradient(const SplatScene<T>& scene, const CameraPose& pose, const DenoiserModel<T>& model,
                                const NoiseSchedule& sched, const DistillConfig& cfg, Rng& rng) {
  return sds_gradient(scene, render(scene, pose, cfg.side), model_eps(model, cfg), sched, cfg, rng);
}

template <typename T>
DistillGradient<T> ism_gradient(const SplatScene<T>& scene, const CameraPose& pose, const DenoiserModel<T>& model,
                                const NoiseSchedule& sched, const DistillConfig& cfg, Rng& rng) {
  return ism_gradient(scene, render(scene, pose, cfg.side), model_eps(model, cfg), sched, cfg, rng);
}

template <typename T>
DistillGradient<T> esm_gradient(const SplatScene<T>& scene, const CameraPose& pose, const DenoiserModel<T>& model,
                                const LoraAdapter<T>& adapter, const NoiseSchedule& sched, const DistillConfig& cfg,
                                Rng& rng) {
  return esm_gradient(scene, render(scene, pose, cfg.side), model_eps(model, cfg, &adapter), sched, cfg, rng);
}

/// Scalar (collinear) model of the ISM/ESM error comparison.
struct ErrorSplit {
  double eps_ism = 0.0;
  double eps_esm = 0.0;
  double identity_residual = 0.0;
  bool assumption_holds = false;  // 0 < eta < delta_norm
};

inline ErrorSplit error_split(double delta_norm, double eta) {
  ErrorSplit r;
  r.eps_ism = delta_norm * delta_norm;
  r.eps_esm = (delta_norm - eta) * (delta_norm - eta) + eta * eta;
  r.identity_residual = r.eps_esm - (r.eps_ism + 2.0 * eta * (eta - delta_norm));
  r.assumption_holds = delta_norm > 0.0 && eta > 0.0 && eta < delta_norm;
  return r;
}

struct IterationLog {
  int iteration = 0;
  int t = 0;
  int s = 0;
  LossKind loss = LossKind::esm;
  ErrorReport report;
  double grad_norm = 0.0;
  double lora_loss = 0.0;
};

/// Everything the optimization carries across iterations (and across a resume).
template <typename T>
struct DistillSession {
  SplatScene<T> scene;
  AdamState<T> scene_opt;
  std::optional<LoraAdapter<T>> adapter;
  int iteration = 0;  // next iteration index
};

template <typename T>
DistillSession<T> start_session(SplatScene<T> scene, const DenoiserModel<T>& model, const DistillConfig& cfg) {
  DistillSession<T> session{std::move(scene), {}, std::nullopt, 0};
  if (cfg.loss == LossKind::esm) {
    Rng rng = Rng::derive(cfg.seed, 0xADA97E5ull);
    session.adapter = make_lora(model, LoraConfig{cfg.lora_rank, cfg.lora_scale, cfg.lr_lora}, rng);
  }
  return session;
}

using IterationObserver = std::function<void(const IterationLog&)>;

/// Runs cfg.iterations more iterations. Randomness for iteration k is derived
/// from (cfg.seed, k), so a resumed session replays the same draws.
template <typename T>
std::vector<IterationLog> distill_loop(DistillSession<T>& session, const PoseSampler& poses,
                                       const DenoiserModel<T>& model, const NoiseSchedule& sched,
                                       const DistillConfig& cfg, const IterationObserver& observer = {}) {
  validate(cfg, sched);
  model.check_condition(Condition::label(cfg.target_label));
  if (cfg.loss == LossKind::esm && !session.adapter)
    throw ContractViolation("distill_loop: ESM requires an adapter (use start_session)");
  const EpsFns<T> eps = model_eps(model, cfg, session.adapter ? &*session.adapter : nullptr);
  std::vector<IterationLog> log;
  log.reserve(std::size_t(cfg.iterations));
  const int end = session.iteration + cfg.iterations;
  for (; session.iteration < end; ++session.iteration) {
    const int it = session.iteration;
    Rng rng = Rng::derive(cfg.seed, std::uint64_t(it));
    const CameraPose pose = poses.sample(rng);
    const auto r = render(session.scene, pose, cfg.side);
    IterationLog row;
    row.iteration = it;
    row.loss = cfg.loss;
    DistillGradient<T> g;
    switch (cfg.loss) {
      case LossKind::sds:
        g = sds_gradient(session.scene, r, eps, sched, cfg, rng);
        break;
      case LossKind::ism:
        g = ism_gradient(session.scene, r, eps, sched, cfg, rng);
        break;
      case LossKind::esm:
        row.lora_loss = lora_train_step(model, *session.adapter, to_latent(r.image), sched, cfg.lr_lora, rng);
        g = esm_gradient(session.scene, r, eps, sched, cfg, rng);
        break;
    }
    if (!g.grad.all_finite())
      throw NumericError("distill_loop: non-finite gradient at iteration " + std::to_string(it) + " (seed " +
                         std::to_string(cfg.seed) + ", t " + std::to_string(g.t) + ")");
    row.t = g.t;
    row.s = g.s;
    row.report = g.report;
    row.grad_norm = g.grad.norm();
    session.scene.params.zero_grad();
    g.grad.accumulate_into(session.scene);
    adam_step(session.scene.params, session.scene_opt, AdamConfig{cfg.lr_scene});
    for (const auto& e : session.scene.params.entries())
      if (!e.value.all_finite())
        throw NumericError("distill_loop: scene parameter '" + e.name + "' became non-finite at iteration " +
                           std::to_string(it) + " (seed " + std::to_string(cfg.seed) + ")");
    if (observer) observer(row);
    log.push_back(row);
  }
  return log;
}

}  // namespace esm
