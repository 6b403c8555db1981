#pragma once

// Central finite differences for gradient checks.

#include <cmath>
#include <vector>

#include "esm/tensor.hpp"

namespace esm {

/// d f / d x[i] for every scalar of x, perturbing x in place (restored afterwards).
template <typename T, typename F>
std::vector<double> fd_gradient(Tensor<T>& x, F&& f, double h) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T saved = x[i];
    x[i] = T(double(saved) + h);
    const double fp = f();
    x[i] = T(double(saved) - h);
    const double fm = f();
    x[i] = saved;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// Same over every entry of a ParamStore, concatenated in entry order.
template <typename T, typename F>
std::vector<double> fd_gradient(ParamStore<T>& store, F&& f, double h) {
  std::vector<double> out;
  for (auto& e : store.entries()) {
    const auto g = fd_gradient(e.value, f, h);
    out.insert(out.end(), g.begin(), g.end());
  }
  return out;
}

template <typename T>
std::vector<double> flat_grads(const ParamStore<T>& store) {
  std::vector<double> out;
  for (const auto& e : store.entries())
    for (std::size_t i = 0; i < e.grad.size(); ++i) out.push_back(double(e.grad[i]));
  return out;
}

template <typename T>
std::vector<double> flat_values(const Tensor<T>& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

/// ||a - b|| / ||b|| (absolute when b is zero).
inline double vec_rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size(), "vec_rel_err: length mismatch");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
}

}  // namespace esm
