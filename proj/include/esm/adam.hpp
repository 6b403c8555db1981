#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "esm/tensor.hpp"

namespace esm {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment buffers for one ParamStore, in entry order.
template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  long step = 0;
};

/// One bias-corrected Adam update; zeroes the grads afterwards.
template <typename T>
void adam_step(ParamStore<T>& store, AdamState<T>& state, const AdamConfig& cfg) {
  require(cfg.lr >= 0.0, "adam_step: learning rate must be nonnegative");
  auto& entries = store.entries();
  for (const auto& e : entries)
    if (!e.grad.all_finite()) throw NumericError("adam_step: non-finite gradient in '" + e.name + "'");
  if (state.m.size() != entries.size()) {
    state.m.clear();
    state.v.clear();
    for (const auto& e : entries) {
      state.m.emplace_back(e.value.shape());
      state.v.emplace_back(e.value.shape());
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  for (std::size_t k = 0; k < entries.size(); ++k) {
    auto& e = entries[k];
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const double g = e.grad[i];
      const double mi = cfg.beta1 * double(m[i]) + (1.0 - cfg.beta1) * g;
      const double vi = cfg.beta2 * double(v[i]) + (1.0 - cfg.beta2) * g * g;
      m[i] = T(mi);
      v[i] = T(vi);
      e.value[i] = T(double(e.value[i]) - cfg.lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.eps));
    }
  }
  store.zero_grad();
}

}  // namespace esm
