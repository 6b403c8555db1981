#pragma once

#include <cmath>

#include "esm/denoiser.hpp"

namespace esm {

struct LoraConfig {
  int rank = 4;
  double scale = 1.0;
  double lr = 1e-3;
};

/// Low-rank adapter over every hidden-producing affine layer of a denoiser.
/// B starts at zero so the adapted predictor equals the base at init.
template <typename T>
struct LoraAdapter {
  LowRankSet<T> factors;
  AdamState<T> opt;

  const ParamStore<T>& params() const noexcept { return factors.params; }
  ParamStore<T>& params() noexcept { return factors.params; }
};

template <typename T>
LoraAdapter<T> make_lora(const DenoiserModel<T>& base, const LoraConfig& cfg, Rng& rng) {
  require(cfg.rank >= 1, "make_lora: rank must be >= 1");
  LoraAdapter<T> adapter;
  adapter.factors.rank = cfg.rank;
  adapter.factors.scale = T(cfg.scale);
  const auto affine = base.affine_ops();
  // The last affine op maps back to image space; the rest produce hidden activations.
  for (std::size_t k = 0; k + 1 < affine.size(); ++k) {
    const std::size_t op = affine[k];
    const auto& aff = std::get<AffineOp>(base.graph().ops()[op]);
    const auto& w = base.params().value(aff.weight);
    const std::size_t out = w.shape()[0], in = w.shape()[1];
    require(std::size_t(cfg.rank) < std::min(in, out), "make_lora: rank must be below layer width");
    Tensor<T> a({std::size_t(cfg.rank), in});
    const double sd = 1.0 / std::sqrt(double(in));
    for (auto& v : a.data()) v = T(sd * rng.normal());
    adapter.factors.params.add(LowRankSet<T>::a_name(op), std::move(a));
    adapter.factors.params.add(LowRankSet<T>::b_name(op), Tensor<T>({out, std::size_t(cfg.rank)}));
    adapter.factors.op_indices.push_back(op);
  }
  return adapter;
}

/// Forward pass with every adapted W replaced by W + scale * B * A.
template <typename T>
Tensor<T> predict_eps_lora(const DenoiserModel<T>& base, const LoraAdapter<T>& adapter, const Tensor<T>& x, int t,
                           const Condition& c) {
  for (std::size_t op : adapter.factors.op_indices) {
    const auto& aff = std::get<AffineOp>(base.graph().ops().at(op));
    const auto& w = base.params().value(aff.weight);
    const auto& a = adapter.params().value(LowRankSet<T>::a_name(op));
    const auto& b = adapter.params().value(LowRankSet<T>::b_name(op));
    if (a.shape()[1] != w.shape()[1] || b.shape()[0] != w.shape()[0] || a.shape()[0] != b.shape()[1])
      throw ContractViolation("predict_eps_lora: adapter shapes incompatible with layer " + std::to_string(op));
  }
  return predict_eps(base, x, t, c, 1.0, &adapter.factors);
}

template <typename T>
NoisePredictor<T> adapted_unconditional(const DenoiserModel<T>& base, const LoraAdapter<T>& adapter) {
  return [&base, &adapter](const Tensor<T>& x, int t) {
    return predict_eps_lora(base, adapter, x, t, Condition::none());
  };
}

/// Adapter-only denoising loss on a fixed (tau, noise); accumulates adapter grads.
template <typename T>
double lora_loss_and_grad(const DenoiserModel<T>& base, LoraAdapter<T>& adapter, const Tensor<T>& x0_render, int tau,
                          const Tensor<T>& noise, const NoiseSchedule& sched) {
  DenoiserBatch<T> batch{{x0_render}, {noise}, {tau}, {Condition::none()}};
  return denoiser_loss_and_grad<T>(base, batch, sched, nullptr, &adapter.factors, &adapter.factors.params);
}

/// One Adam step on A, B against ||eps_lo(q_sample(x0, tau, e), tau, null) - e||^2.
template <typename T>
double lora_train_step(const DenoiserModel<T>& base, LoraAdapter<T>& adapter, const Tensor<T>& x0_render,
                       const NoiseSchedule& sched, double lr, Rng& rng) {
  const int tau = rng.uniform_int(1, sched.steps());
  const Tensor<T> noise = rng.normal_tensor<T>(x0_render.shape());
  adapter.params().zero_grad();
  const double loss = lora_loss_and_grad(base, adapter, x0_render, tau, noise, sched);
  if (!std::isfinite(loss))
    throw NumericError("lora_train_step: non-finite loss at tau " + std::to_string(tau) + " (seed " +
                       std::to_string(rng.seed()) + ")");
  adam_step(adapter.params(), adapter.opt, AdamConfig{lr});
  return loss;
}

}  // namespace esm
