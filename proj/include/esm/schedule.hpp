#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "esm/tensor.hpp"

namespace esm {

enum class ScheduleKind { linear };

/// Discrete noise schedule indexed by absolute timestep, with alpha_bar(0) == 1.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;

  int steps() const noexcept { return steps_; }
  double beta_start() const noexcept { return beta_start_; }
  double beta_end() const noexcept { return beta_end_; }

  double beta(int t) const { return beta_.at(check_step(t, 1)); }
  double alpha(int t) const { return 1.0 - beta(t); }
  double alpha_bar(int t) const { return alpha_bar_.at(check_step(t, 0)); }
  /// DDPM-equivalent variance (1 - a_t)(1 - abar_{t-1}) / (1 - abar_t).
  double sigma_ddpm_sq(int t) const { return sigma_sq_.at(check_step(t, 1)); }

  friend NoiseSchedule build_schedule(int, double, double, ScheduleKind);

 private:
  std::size_t check_step(int t, int lo) const {
    if (t < lo || t > steps_)
      throw ContractViolation("timestep " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                              std::to_string(steps_) + "]");
    return std::size_t(t);
  }

  int steps_ = 0;
  double beta_start_ = 0.0, beta_end_ = 0.0;
  std::vector<double> beta_;       // [0] unused
  std::vector<double> alpha_bar_;  // [0] == 1
  std::vector<double> sigma_sq_;   // [0] unused
};

inline NoiseSchedule build_schedule(int steps = 1000, double beta_start = 1e-4, double beta_end = 2e-2,
                                    ScheduleKind kind = ScheduleKind::linear) {
  if (steps < 2) throw ContractViolation("build_schedule: need at least 2 steps");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw ContractViolation("build_schedule: require 0 < beta_start <= beta_end < 1");
  (void)kind;
  NoiseSchedule s;
  s.steps_ = steps;
  s.beta_start_ = beta_start;
  s.beta_end_ = beta_end;
  s.beta_.assign(std::size_t(steps) + 1, 0.0);
  s.alpha_bar_.assign(std::size_t(steps) + 1, 1.0);
  s.sigma_sq_.assign(std::size_t(steps) + 1, 0.0);
  for (int t = 1; t <= steps; ++t) {
    s.beta_[t] = beta_start + (beta_end - beta_start) * double(t - 1) / double(steps - 1);
    s.alpha_bar_[t] = s.alpha_bar_[t - 1] * (1.0 - s.beta_[t]);
    s.sigma_sq_[t] = s.beta_[t] * (1.0 - s.alpha_bar_[t - 1]) / (1.0 - s.alpha_bar_[t]);
  }
  return s;
}

/// Coefficients (a, b) of the deterministic DDIM map x_to = a * x_from + b * eps.
struct DdimCoeffs {
  double a;
  double b;
};

inline DdimCoeffs ddim_coeffs(const NoiseSchedule& sched, int from, int to) {
  const double ab_from = sched.alpha_bar(from);
  const double ab_to = sched.alpha_bar(to);
  const double a = std::sqrt(ab_to / ab_from);
  return {a, std::sqrt(1.0 - ab_to) - a * std::sqrt(1.0 - ab_from)};
}

template <typename T>
Tensor<T> apply_ddim(const Tensor<T>& x, const Tensor<T>& eps, const DdimCoeffs& c) {
  require_same_shape(x, eps, "ddim transition");
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = T(c.a * double(x[i]) + c.b * double(eps[i]));
  return out;
}

/// sqrt(abar_t) x0 + sqrt(1 - abar_t) noise; t == 0 returns x0.
template <typename T>
Tensor<T> q_sample(const Tensor<T>& x0, int t, const Tensor<T>& noise, const NoiseSchedule& sched) {
  require_same_shape(x0, noise, "q_sample");
  if (t == 0) return x0;
  const double ab = sched.alpha_bar(t);
  return apply_ddim(x0, noise, DdimCoeffs{std::sqrt(ab), std::sqrt(1.0 - ab)});
}

/// Deterministic (sigma = 0) denoising step x_t -> x_s for s < t.
template <typename T>
Tensor<T> ddim_generation_step(const Tensor<T>& x_t, const Tensor<T>& eps, int t, int s, const NoiseSchedule& sched) {
  if (!(0 <= s && s < t)) throw ContractViolation("ddim_generation_step: require 0 <= s < t");
  return apply_ddim(x_t, eps, ddim_coeffs(sched, t, s));
}

/// DDIM transition x_s -> x_t for s < t with a caller-chosen noise estimate.
template <typename T>
Tensor<T> ddim_inversion_transition(const Tensor<T>& x_s, const Tensor<T>& eps, int s, int t,
                                    const NoiseSchedule& sched) {
  if (!(0 <= s && s < t)) throw ContractViolation("ddim_inversion_transition: require 0 <= s < t");
  if (t > sched.steps()) throw ContractViolation("ddim_inversion_transition: t beyond schedule");
  return apply_ddim(x_s, eps, ddim_coeffs(sched, s, t));
}

}  // namespace esm
