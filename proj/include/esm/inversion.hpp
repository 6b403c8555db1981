#pragma once

// DDIM inversion: the naive multi-step chain, the coupled auxiliary-variable
// interval step with ratio mixing, and its exact reverse.

#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "esm/denoiser.hpp"
#include "esm/schedule.hpp"

namespace esm {

/// Pair of latents advanced together; `x_aux` starts as a copy of `x`.
template <typename T>
struct CoupledState {
  Tensor<T> x;
  Tensor<T> x_aux;
  int t = 0;

  static CoupledState start(Tensor<T> x, int t) {
    Tensor<T> aux = x;
    return {std::move(x), std::move(aux), t};
  }
};

struct InversionStep {
  int from = 0;
  int to = 0;
  double error = 0.0;  // optional per-step diagnostic, filled by callers that have a reference
};

template <typename T>
struct InversionTrace {
  std::vector<InversionStep> steps;
  std::vector<Tensor<T>> latents;  // only when requested
  double reconstruction_error = 0.0;

  /// step,timestep,error
  void write_csv(std::ostream& os) const {
    os << "step,timestep,error\r\n";
    for (std::size_t i = 0; i < steps.size(); ++i)
      os << i << ',' << steps[i].to << ',' << steps[i].error << "\r\n";
  }
};

template <typename T>
struct NaiveInversion {
  Tensor<T> x_s;
  InversionTrace<T> trace;
};

/// x_0 -> x_s in strides of delta_s, each transition using eps(current latent, target timestep).
/// A final partial stride lands exactly on s.
template <typename T, typename EpsFn>
NaiveInversion<T> naive_invert(const Tensor<T>& x0, int s, int delta_s, EpsFn&& eps_fn, const NoiseSchedule& sched,
                               bool keep_latents = false) {
  if (s < 0 || s > sched.steps()) throw ContractViolation("naive_invert: s outside [0, T]");
  if (delta_s < 1) throw ContractViolation("naive_invert: delta_s must be >= 1");
  NaiveInversion<T> out{x0, {}};
  int cur = 0;
  while (cur < s) {
    const int next = std::min(cur + delta_s, s);
    const Tensor<T> eps = eps_fn(out.x_s, next);
    out.x_s = ddim_inversion_transition(out.x_s, eps, cur, next, sched);
    out.trace.steps.push_back({cur, next, 0.0});
    if (keep_latents) out.trace.latents.push_back(out.x_s);
    cur = next;
  }
  return out;
}

/// x_t = (x_int - (1 - rho) x_aux_int) / rho.
template <typename T>
Tensor<T> mix(const Tensor<T>& x_int, const Tensor<T>& x_aux_int, double rho) {
  if (!(rho > 0.0 && rho <= 1.0)) throw ContractViolation("mix: rho must lie in (0, 1]");
  require_same_shape(x_int, x_aux_int, "mix");
  Tensor<T> out(x_int.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = T((double(x_int[i]) - (1.0 - rho) * double(x_aux_int[i])) / rho);
  return out;
}

/// Inverse of mix: x_int = rho x_t + (1 - rho) x_aux_int.
template <typename T>
Tensor<T> unmix(const Tensor<T>& x_t, const Tensor<T>& x_aux_int, double rho) {
  if (!(rho > 0.0 && rho <= 1.0)) throw ContractViolation("unmix: rho must lie in (0, 1]");
  require_same_shape(x_t, x_aux_int, "unmix");
  Tensor<T> out(x_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = T(rho * double(x_t[i]) + (1.0 - rho) * double(x_aux_int[i]));
  return out;
}

template <typename T>
struct CoupledStep {
  CoupledState<T> state;  // x = mixed x_t, x_aux = x'_int, t
  Tensor<T> x_int;
  Tensor<T> x_aux_int;
};

/// Exactly invertible s -> t interval step. Each sub-update feeds the
/// predictor the partner variable, never the one being advanced:
///   x'_int = F(x'_s, eps(x_s, s)),  x_int = F(x_s, eps(x'_int, s)),
/// followed by ratio mixing.
template <typename T, typename EpsFn>
CoupledStep<T> coupled_invert(const CoupledState<T>& state, int t, EpsFn&& eps_fn, double rho,
                              const NoiseSchedule& sched) {
  if (!(rho > 0.0 && rho <= 1.0)) throw ContractViolation("coupled_invert: rho must lie in (0, 1]");
  const int s = state.t;
  if (!(s < t)) throw ContractViolation("coupled_invert: require s < t");
  require_same_shape(state.x, state.x_aux, "coupled_invert");
  Tensor<T> x_aux_int = ddim_inversion_transition(state.x_aux, eps_fn(state.x, s), s, t, sched);
  Tensor<T> x_int = ddim_inversion_transition(state.x, eps_fn(x_aux_int, s), s, t, sched);
  Tensor<T> x_t = mix(x_int, x_aux_int, rho);
  return {CoupledState<T>{std::move(x_t), x_aux_int, t}, std::move(x_int), std::move(x_aux_int)};
}

/// Runs the coupled step backwards: recovers (x_s, x'_s) from (x_int, x'_int).
template <typename T, typename EpsFn>
CoupledState<T> coupled_exact_reverse(const Tensor<T>& x_int, const Tensor<T>& x_aux_int, int t, int s,
                                      EpsFn&& eps_fn, const NoiseSchedule& sched) {
  if (!(0 <= s && s < t)) throw ContractViolation("coupled_exact_reverse: require 0 <= s < t");
  Tensor<T> x_s = ddim_generation_step(x_int, eps_fn(x_aux_int, s), t, s, sched);
  Tensor<T> x_aux_s = ddim_generation_step(x_aux_int, eps_fn(x_s, s), t, s, sched);
  return {std::move(x_s), std::move(x_aux_s), s};
}

/// Single approximate interval step x_s -> x_t with eps evaluated at (x_s, s).
template <typename T, typename EpsFn>
Tensor<T> naive_interval(const Tensor<T>& x_s, int s, int t, EpsFn&& eps_fn, const NoiseSchedule& sched) {
  return ddim_inversion_transition(x_s, eps_fn(x_s, s), s, t, sched);
}

/// Standard DDIM generation back from x_t with eps re-evaluated at (x_t, t).
template <typename T, typename EpsFn>
Tensor<T> naive_reverse(const Tensor<T>& x_t, int t, int s, EpsFn&& eps_fn, const NoiseSchedule& sched) {
  return ddim_generation_step(x_t, eps_fn(x_t, t), t, s, sched);
}

}  // namespace esm
