#pragma once

// The invariant suite behind `esmlab verify`: every module's properties on
// tiny internal fixtures, one report row per property with its measured value.

#include <chrono>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "esm/config.hpp"
#include "esm/distill.hpp"
#include "esm/gradcheck.hpp"
#include "esm/io.hpp"
#include "esm/serialize.hpp"

namespace esm {

struct PropertyResult {
  std::string module;
  std::string property;
  double measured = 0.0;
  double threshold = 0.0;
  std::string relation;  // how measured compares to threshold: "<", "<=", "==", ">="
  bool passed = false;
  double seconds = 0.0;
};

enum class Fault { none, mix_sign };

inline Fault parse_fault(const std::string& s) {
  if (s.empty() || s == "none") return Fault::none;
  if (s == "mix-sign") return Fault::mix_sign;
  throw ConfigError("unknown fault '" + s + "' (expected mix-sign)");
}

struct VerifyReport {
  std::vector<PropertyResult> rows;

  bool all_passed() const {
    return std::all_of(rows.begin(), rows.end(), [](const PropertyResult& r) { return r.passed; });
  }

  void write_csv(const fs::path& path) const {
    CsvWriter csv(path, {"module", "property", "measured", "relation", "threshold", "passed", "seconds"});
    for (const auto& r : rows)
      csv.row({r.module, r.property, format_number(r.measured), r.relation, format_number(r.threshold),
               r.passed ? "1" : "0", format_number(r.seconds)});
  }
};

namespace verify_detail {

struct Measure {
  double value;
  std::string relation;
  double threshold;
};

inline Measure lt(double v, double thr) { return {v, "<", thr}; }
inline Measure le(double v, double thr) { return {v, "<=", thr}; }
inline Measure ge(double v, double thr) { return {v, ">=", thr}; }
inline Measure is_true(bool b) { return {b ? 1.0 : 0.0, "==", 1.0}; }

inline bool holds(const Measure& m) {
  if (!std::isfinite(m.value)) return false;
  if (m.relation == "<") return m.value < m.threshold;
  if (m.relation == "<=") return m.value <= m.threshold;
  if (m.relation == ">=") return m.value >= m.threshold;
  return m.value == m.threshold;
}

template <typename F>
bool throws(F&& f) {
  try {
    f();
  } catch (const std::exception&) {
    return true;
  }
  return false;
}

template <typename T>
DenoiserModel<T> tiny_model(std::uint64_t seed, int side = 4, bool zero_output = false) {
  Rng rng(seed);
  return DenoiserModel<T>(DenoiserSpec{side, 2, 16, 2, 8}, rng, zero_output);
}

/// Random-weight model with a nonzero output layer, scaled so eps is O(1).
template <typename T>
SplatScene<T> random_scene(std::size_t n, Rng& rng, double opacity_lo, double opacity_hi, double color_hi = 0.8) {
  auto sc = SplatScene<T>::blank(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    sc.center()[2 * i] = T(rng.uniform(-0.5, 0.5));
    sc.center()[2 * i + 1] = T(rng.uniform(-0.5, 0.5));
    sc.log_scale()[2 * i] = T(std::log(rng.uniform(0.12, 0.3)));
    sc.log_scale()[2 * i + 1] = T(std::log(rng.uniform(0.12, 0.3)));
    sc.angle()[i] = T(rng.uniform(0.0, 3.0));
    sc.color()[i] = T(rng.uniform(0.1, color_hi));
    const double a = rng.uniform(opacity_lo, opacity_hi);
    sc.opacity_logit()[i] = T(std::log(a / (1.0 - a)));
  }
  return sc;
}

template <typename T>
double composite_loss(const SplatScene<T>& sc, const CameraPose& pose, const Tensor<T>& cot, int side) {
  return dot(render(sc, pose, side).image, cot);
}

inline OpGraph<double> mlp_graph(ParamStore<double>& params, Rng& rng, const std::vector<int>& widths) {
  std::vector<Op> ops;
  for (std::size_t k = 0; k + 1 < widths.size(); ++k) {
    const std::string w = "w" + std::to_string(k), b = "b" + std::to_string(k);
    params.add(w, rng.normal_tensor<double>({std::size_t(widths[k + 1]), std::size_t(widths[k])}));
    params.add(b, rng.normal_tensor<double>({std::size_t(widths[k + 1])}));
    ops.push_back(AffineOp{w, b});
    if (k + 2 < widths.size()) ops.push_back(SiluOp{});
  }
  return OpGraph<double>(std::move(ops));
}

/// Max over params and input of the FD-vs-VJP relative error for <cot, graph(x)>.
inline double graph_fd_error(const OpGraph<double>& g, ParamStore<double> params, Mat<double> x,
                             const Mat<double>& cot, double h) {
  const auto res = vjp(g, params, x, cot);
  auto f = [&]() { return (g.forward(params, x).array() * cot.array()).sum(); };
  double worst = 0.0;
  if (params.size() > 0) worst = vec_rel_err(flat_grads(res.grads), fd_gradient(params, f, h));
  Tensor<double> xt({std::size_t(x.size())}, 0.0);
  for (Eigen::Index i = 0; i < x.size(); ++i) xt[std::size_t(i)] = x.data()[i];
  auto fx = [&]() {
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = xt[std::size_t(i)];
    return f();
  };
  const auto gx = fd_gradient(xt, fx, h);
  std::vector<double> an(res.input_grad.data(), res.input_grad.data() + res.input_grad.size());
  return std::max(worst, vec_rel_err(an, gx));
}

}  // namespace verify_detail

/// Runs the full suite. `fault` deliberately breaks one property (mutation smoke test).
inline VerifyReport run_verify_suite(Fault fault = Fault::none) {
  using namespace verify_detail;
  VerifyReport report;
  auto run = [&report](const char* module, const char* property, const std::function<Measure()>& fn) {
    const auto start = std::chrono::steady_clock::now();
    PropertyResult r{module, property};
    try {
      const Measure m = fn();
      r.measured = m.value;
      r.relation = m.relation;
      r.threshold = m.threshold;
      r.passed = holds(m);
    } catch (const std::exception&) {
      r.measured = std::numeric_limits<double>::quiet_NaN();
      r.relation = "threw";
      r.passed = false;
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    report.rows.push_back(std::move(r));
  };

  const NoiseSchedule sched = build_schedule();

  // ------------------------------------------------------------ diffcore
  run("diffcore", "vjp_identity_map", [] {
    OpGraph<double> g(std::vector<Op>{});
    ParamStore<double> p;
    Rng rng(1);
    Mat<double> x = Mat<double>::Random(3, 2), c = Mat<double>::Random(3, 2);
    return le((vjp(g, p, x, c).input_grad - c).cwiseAbs().maxCoeff(), 0.0);
  });
  run("diffcore", "vjp_sum_of_squares", [] {
    OpGraph<double> g({SumSquaresOp{}});
    ParamStore<double> p;
    Mat<double> x(2, 1);
    x << 1, 2;
    Mat<double> c(1, 1);
    c << 1;
    const auto gx = vjp(g, p, x, c).input_grad;
    return le(std::max(std::abs(gx(0, 0) - 2.0), std::abs(gx(1, 0) - 4.0)), 0.0);
  });
  run("diffcore", "mlp_vjp_matches_fd_h1e-3", [] {
    Rng rng(11);
    ParamStore<double> p;
    const auto g = mlp_graph(p, rng, {6, 8, 8, 3});
    Mat<double> x(6, 3), c(3, 3);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
    for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = rng.normal();
    return lt(graph_fd_error(g, p, x, c, 1e-3), 1e-6);
  });
  run("diffcore", "every_op_vjp_matches_fd", [] {
    Rng rng(12);
    double worst = 0.0;
    {
      ParamStore<double> p;
      const auto g = mlp_graph(p, rng, {5, 4});
      Mat<double> x(5, 2), c(4, 2);
      for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
      for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = rng.normal();
      worst = std::max(worst, graph_fd_error(g, p, x, c, 1e-5));
    }
    for (int which = 0; which < 2; ++which) {
      OpGraph<double> g(which == 0 ? std::vector<Op>{SiluOp{}} : std::vector<Op>{SumSquaresOp{}});
      Mat<double> x(5, 2), c(which == 0 ? 5 : 1, 2);
      for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
      for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = rng.normal();
      worst = std::max(worst, graph_fd_error(g, ParamStore<double>{}, x, c, 1e-5));
    }
    return lt(worst, 1e-5);
  });
  run("diffcore", "vjp_linear_in_cotangent", [] {
    Rng rng(13);
    ParamStore<double> p;
    const auto g = mlp_graph(p, rng, {4, 6, 3});
    Mat<double> x(4, 2), c1(3, 2), c2(3, 2);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
    for (Eigen::Index i = 0; i < c1.size(); ++i) c1.data()[i] = rng.normal(), c2.data()[i] = rng.normal();
    const double a = 0.7, b = -1.3;
    const auto r1 = vjp(g, p, x, c1), r2 = vjp(g, p, x, c2), r = vjp(g, p, x, Mat<double>(a * c1 + b * c2));
    std::vector<double> lhs = flat_grads(r.grads), rhs;
    const auto g1 = flat_grads(r1.grads), g2 = flat_grads(r2.grads);
    for (std::size_t i = 0; i < g1.size(); ++i) rhs.push_back(a * g1[i] + b * g2[i]);
    return lt(vec_rel_err(lhs, rhs), 1e-6);
  });
  run("diffcore", "adam_single_step_unit_grad", [] {
    ParamStore<double> p;
    p.add("x", Tensor<double>({1}, 1.0));
    p.grad("x")[0] = 1.0;
    AdamState<double> st;
    adam_step(p, st, AdamConfig{0.1});
    return lt(std::abs(p.value("x")[0] - 0.9), 1e-6);
  });
  run("diffcore", "adam_rejects_nonfinite_grad", [] {
    ParamStore<double> p;
    p.add("w", Tensor<double>({2}, 1.0));
    p.grad("w")[1] = std::numeric_limits<double>::quiet_NaN();
    AdamState<double> st;
    bool named = false;
    try {
      adam_step(p, st, AdamConfig{});
    } catch (const NumericError& e) {
      named = std::string(e.what()).find("'w'") != std::string::npos;
    }
    return is_true(named);
  });
  run("diffcore", "checked_tensor_rejects_nan", [] {
    return is_true(throws([] { Tensor<float>::checked({2}, {1.0f, std::nanf("")}); }));
  });

  // ------------------------------------------------------------ schedule
  run("schedule", "alpha_bar_1", [&] { return lt(std::abs(sched.alpha_bar(1) - 0.9999), 1e-12); });
  run("schedule", "alpha_bar_T_vs_long_double_product", [&] {
    long double prod = 1.0L;
    for (int t = 1; t <= 1000; ++t) {
      const long double beta = 1e-4L + (2e-2L - 1e-4L) * (long double)(t - 1) / 999.0L;
      prod *= 1.0L - beta;
    }
    return lt(double(std::abs((long double)sched.alpha_bar(1000) - prod) / prod), 1e-6);
  });
  run("schedule", "two_step_product", [] {
    const auto s2 = build_schedule(2, 0.1, 0.2);
    return lt(std::abs(s2.alpha_bar(2) - 0.72), 1e-12);
  });
  run("schedule", "monotone_tables_and_sigma_identity", [&] {
    bool ok = sched.alpha_bar(0) == 1.0;
    double sigma_err = 0.0;
    for (int t = 1; t <= sched.steps(); ++t) {
      ok = ok && sched.alpha_bar(t) < sched.alpha_bar(t - 1) && sched.beta(t) > 0 && sched.beta(t) < 1;
      if (t > 1) ok = ok && sched.beta(t) > sched.beta(t - 1);
      const double expect =
          (1.0 - sched.alpha(t)) * (1.0 - sched.alpha_bar(t - 1)) / (1.0 - sched.alpha_bar(t));
      sigma_err = std::max(sigma_err, std::abs(sched.sigma_ddpm_sq(t) - expect));
    }
    return ok ? lt(sigma_err, 1e-12) : is_true(false);
  });
  run("schedule", "ddim_round_trip_fixed_eps_f64", [&] {
    Rng rng(21);
    double worst = 0.0;
    for (int k = 0; k < 200; ++k) {
      const int t = rng.uniform_int(1, 1000), s = rng.uniform_int(0, t - 1);
      const auto x = rng.normal_tensor<double>({16});
      const auto e = rng.normal_tensor<double>({16});
      worst = std::max(worst, rel_err(ddim_generation_step(ddim_inversion_transition(x, e, s, t, sched), e, t, s, sched), x));
    }
    return lt(worst, 1e-10);
  });
  run("schedule", "generation_step_with_true_noise", [&] {
    Rng rng(22);
    double worst = 0.0;
    for (int k = 0; k < 50; ++k) {
      const int t = rng.uniform_int(2, 1000);
      const auto x0 = rng.normal_tensor<double>({8}), e = rng.normal_tensor<double>({8});
      worst = std::max(worst, rel_err(ddim_generation_step(q_sample(x0, t, e, sched), e, t, t - 1, sched),
                                      q_sample(x0, t - 1, e, sched)));
    }
    return lt(worst, 1e-10);
  });
  run("schedule", "q_sample_variance_monte_carlo", [&] {
    Rng rng(23);
    const int t = 400, n = 10000;
    const Tensor<double> x0({1}, 0.3);
    double sum = 0.0, sq = 0.0;
    for (int k = 0; k < n; ++k) {
      const double v = q_sample(x0, t, rng.normal_tensor<double>({1}), sched)[0];
      sum += v;
      sq += v * v;
    }
    const double var = (sq - sum * sum / n) / (n - 1);
    return lt(std::abs(var / (1.0 - sched.alpha_bar(t)) - 1.0), 0.05);
  });

  // ------------------------------------------------------------ denoiser
  run("denoiser", "zero_output_layer_predicts_zero", [&] {
    const auto m = tiny_model<double>(31, 4, true);
    Rng rng(31);
    return le(norm(predict_eps(m, rng.normal_tensor<double>({4, 4}), 10, Condition::label(1), 3.0)), 0.0);
  });
  run("denoiser", "guidance_blend_affine", [] {
    const auto m = tiny_model<double>(32);
    Rng rng(32);
    const auto x = rng.normal_tensor<double>({4, 4});
    const auto e_null = predict_eps(m, x, 100, Condition::none());
    const auto e_c = predict_eps(m, x, 100, Condition::label(0));
    double err = max_abs_diff(predict_eps(m, x, 100, Condition::label(0), 0.0), e_null);
    err = std::max(err, max_abs_diff(predict_eps(m, x, 100, Condition::label(0), 1.0), e_c));
    const auto e_half = predict_eps(m, x, 100, Condition::label(0), 0.5);
    err = std::max(err, max_abs_diff(e_half, lincomb(0.5, e_null, 0.5, e_c)));
    return lt(err, 1e-12);
  });
  run("denoiser", "predict_eps_deterministic", [] {
    const auto m = tiny_model<float>(33);
    Rng rng(33);
    const auto x = rng.normal_tensor<float>({4, 4});
    return is_true(predict_eps(m, x, 7, Condition::label(1), 2.0) == predict_eps(m, x, 7, Condition::label(1), 2.0));
  });
  run("denoiser", "timestep_zero_rejected", [] {
    const auto m = tiny_model<float>(34);
    return is_true(throws([&] { predict_eps(m, Tensor<float>({4, 4}), 0, Condition::none()); }));
  });
  run("denoiser", "oracle_affine_in_x", [&] {
    Rng rng(35);
    GaussianOracle<double> o{rng.normal_tensor<double>({4, 4}), 0.3};
    const auto x1 = rng.normal_tensor<double>({4, 4}), x2 = rng.normal_tensor<double>({4, 4});
    const double a = 0.37;
    return lt(max_abs_diff(oracle_eps(o, lincomb(a, x1, 1 - a, x2), 321, sched),
                           lincomb(a, oracle_eps(o, x1, 321, sched), 1 - a, oracle_eps(o, x2, 321, sched))),
              1e-10);
  });
  run("denoiser", "oracle_matches_monte_carlo_posterior_t500", [&] {
    // E[e | x_t] is affine in x_t for Gaussian data; recover it by least squares on 1e5 draws.
    Rng rng(36);
    const double mu = 0.4, var_d = 0.25;
    const int t = 500, n = 100000;
    const double ab = sched.alpha_bar(t);
    double sx = 0, se = 0, sxx = 0, sxe = 0;
    for (int k = 0; k < n; ++k) {
      const double x0 = mu + std::sqrt(var_d) * rng.normal(), e = rng.normal();
      const double xt = std::sqrt(ab) * x0 + std::sqrt(1 - ab) * e;
      sx += xt, se += e, sxx += xt * xt, sxe += xt * e;
    }
    const double slope = (sxe - sx * se / n) / (sxx - sx * sx / n);
    const double icpt = se / n - slope * sx / n;
    GaussianOracle<double> o{Tensor<double>({1}, mu), var_d};
    const double o0 = oracle_eps(o, Tensor<double>({1}, 0.0), t, sched)[0];
    const double o1 = oracle_eps(o, Tensor<double>({1}, 1.0), t, sched)[0];
    const double rel = std::max(std::abs(slope - (o1 - o0)) / std::abs(o1 - o0), std::abs(icpt - o0) / std::abs(o0));
    return lt(rel, 0.01);
  });
  run("denoiser", "training_gradient_matches_fd", [&] {
    auto m = tiny_model<double>(37);
    Rng rng(37);
    DenoiserBatch<double> b;
    for (int k = 0; k < 3; ++k) {
      b.x0.push_back(rng.normal_tensor<double>({4, 4}));
      b.noise.push_back(rng.normal_tensor<double>({4, 4}));
      b.t.push_back(rng.uniform_int(1, 1000));
      b.cond.push_back(k == 2 ? Condition::none() : Condition::label(k));
    }
    ParamStore<double> grads = m.params();
    grads.zero_grad();
    denoiser_loss_and_grad(m, b, sched, &grads);
    auto f = [&] { return denoiser_loss_and_grad<double>(m, b, sched, nullptr); };
    return lt(vec_rel_err(flat_grads(grads), fd_gradient(m.params(), f, 1e-5)), 1e-4);
  });

  // ------------------------------------------------------------ lora
  run("lora", "fresh_adapter_equals_base", [] {
    const auto m = tiny_model<float>(41);
    Rng rng(41);
    const auto ad = make_lora(m, LoraConfig{2, 1.0, 1e-3}, rng);
    const auto x = rng.normal_tensor<float>({4, 4});
    return is_true(predict_eps_lora(m, ad, x, 300, Condition::none()) == predict_eps(m, x, 300, Condition::none()));
  });
  run("lora", "zero_scale_equals_base", [] {
    const auto m = tiny_model<double>(42);
    Rng rng(42);
    auto ad = make_lora(m, LoraConfig{2, 0.0, 1e-3}, rng);
    for (auto& e : ad.params().entries()) e.value = rng.normal_tensor<double>(e.value.shape());
    const auto x = rng.normal_tensor<double>({4, 4});
    return le(max_abs_diff(predict_eps_lora(m, ad, x, 300, Condition::none()), predict_eps(m, x, 300, Condition::none())),
              0.0);
  });
  run("lora", "rank1_matches_merged_weights", [] {
    auto m = tiny_model<double>(43);
    Rng rng(43);
    auto ad = make_lora(m, LoraConfig{1, 0.5, 1e-3}, rng);
    const std::size_t op = ad.factors.op_indices.front();
    auto& a = ad.params().value(LowRankSet<double>::a_name(op));
    auto& b = ad.params().value(LowRankSet<double>::b_name(op));
    b = rng.normal_tensor<double>(b.shape());
    const auto x = rng.normal_tensor<double>({4, 4});
    const auto adapted = predict_eps_lora(m, ad, x, 222, Condition::label(1));
    const auto& aff = std::get<AffineOp>(m.graph().ops()[op]);
    auto& w = m.params().value(aff.weight);
    const std::size_t in = w.shape()[1];
    for (std::size_t r = 0; r < w.shape()[0]; ++r)
      for (std::size_t c = 0; c < in; ++c) w[r * in + c] += 0.5 * b[r] * a[c];
    return lt(max_abs_diff(adapted, predict_eps(m, x, 222, Condition::label(1))), 1e-6);
  });
  run("lora", "zero_lr_leaves_adapter", [&] {
    const auto m = tiny_model<float>(44);
    Rng rng(44);
    auto ad = make_lora(m, LoraConfig{2, 1.0, 1e-3}, rng);
    const auto before = ad.params().value_hash();
    lora_train_step(m, ad, rng.normal_tensor<float>({4, 4}), sched, 0.0, rng);
    return is_true(ad.params().value_hash() == before);
  });
  run("lora", "adapter_A_gradient_matches_fd", [&] {
    const auto m = tiny_model<double>(45);
    Rng rng(45);
    auto ad = make_lora(m, LoraConfig{2, 1.0, 1e-3}, rng);
    for (auto& e : ad.params().entries())
      if (e.name.back() == 'B') e.value = rng.normal_tensor<double>(e.value.shape());
    const auto x0 = rng.normal_tensor<double>({4, 4}), noise = rng.normal_tensor<double>({4, 4});
    ad.params().zero_grad();
    lora_loss_and_grad(m, ad, x0, 250, noise, sched);
    double worst = 0.0;
    for (auto& e : ad.params().entries()) {
      if (e.name.back() != 'A') continue;
      const auto analytic = flat_values(e.grad);
      auto f = [&] {
        DenoiserBatch<double> b{{x0}, {noise}, {250}, {Condition::none()}};
        return denoiser_loss_and_grad<double>(m, b, sched, nullptr, &ad.factors, nullptr);
      };
      worst = std::max(worst, vec_rel_err(analytic, fd_gradient(e.value, f, 1e-5)));
    }
    return lt(worst, 1e-4);
  });
  run("lora", "base_frozen_under_adapter_training", [&] {
    const auto m = tiny_model<float>(46);
    const auto before = m.params().value_hash();
    Rng rng(46);
    auto ad = make_lora(m, LoraConfig{2, 1.0, 1e-2}, rng);
    const auto x0 = rng.normal_tensor<float>({4, 4});
    for (int k = 0; k < 5; ++k) lora_train_step(m, ad, x0, sched, 1e-2, rng);
    return is_true(m.params().value_hash() == before);
  });

  run("lora", "fresh_adapter_coupled_path_equals_base", [&] {
    const auto m = tiny_model<double>(47);
    Rng rng(47);
    const auto ad = make_lora(m, LoraConfig{2, 1.0, 1e-3}, rng);
    auto lo = [&](const Tensor<double>& x, int t) { return predict_eps_lora(m, ad, x, t, Condition::none()); };
    bool same = true;
    for (int k = 0; k < 10; ++k) {
      const int t = rng.uniform_int(2, 1000), s = rng.uniform_int(1, t - 1);
      const auto st = CoupledState<double>::start(rng.normal_tensor<double>({4, 4}), s);
      const auto a = coupled_invert(st, t, lo, 0.93, sched), b = coupled_invert(st, t, unconditional(m), 0.93, sched);
      same = same && a.state.x == b.state.x && a.state.x_aux == b.state.x_aux && a.x_int == b.x_int;
    }
    return is_true(same);
  });

  // ------------------------------------------------------------ inversion
  run("inversion", "mix_unmix_identity_f32_rho0.93", [fault] {
    Rng rng(51);
    const auto a = rng.normal_tensor<float>({64}), b = rng.normal_tensor<float>({64});
    const double rho = 0.93;
    Tensor<float> mixed = mix(a, b, rho);
    if (fault == Fault::mix_sign)
      for (std::size_t i = 0; i < mixed.size(); ++i) mixed[i] = float((a[i] + (1.0 - rho) * b[i]) / rho);
    return lt(max_abs_diff(unmix(mixed, b, rho), a), 1e-6);
  });
  run("inversion", "mix_unmix_identity_all_rho_f64", [] {
    Rng rng(52);
    double worst = 0.0;
    for (int k = 0; k < 50; ++k) {
      const double rho = rng.uniform(1e-3, 1.0);
      const auto a = rng.normal_tensor<double>({16}), b = rng.normal_tensor<double>({16});
      worst = std::max(worst, rel_err(unmix(mix(a, b, rho), b, rho), a));
    }
    return lt(worst, 1e-10);
  });
  run("inversion", "rho1_mix_is_x_int", [&] {
    const auto m = tiny_model<double>(53);
    Rng rng(53);
    const auto st = coupled_invert(CoupledState<double>::start(rng.normal_tensor<double>({4, 4}), 100), 180,
                                   unconditional(m), 1.0, sched);
    return le(max_abs_diff(st.state.x, st.x_int), 0.0);
  });
  run("inversion", "zero_predictor_is_rescaling", [&] {
    Rng rng(54);
    auto zero = [](const Tensor<double>& x, int) { return Tensor<double>(x.shape()); };
    const auto x = rng.normal_tensor<double>({4, 4});
    const auto st = coupled_invert(CoupledState<double>::start(x, 120), 333, zero, 0.4, sched);
    const auto expect = std::sqrt(sched.alpha_bar(333) / sched.alpha_bar(120)) * x;
    double err = std::max({rel_err(st.x_int, expect), rel_err(st.x_aux_int, expect), rel_err(st.state.x, expect)});
    const auto nx = naive_invert(x, 437, 200, zero, sched).x_s;
    err = std::max(err, rel_err(nx, std::sqrt(sched.alpha_bar(437)) * x));
    return lt(err, 1e-12);
  });
  run("inversion", "naive_invert_s0_is_identity", [&] {
    Rng rng(55);
    const auto x = rng.normal_tensor<double>({4, 4});
    const auto r = naive_invert(x, 0, 50, unconditional(tiny_model<double>(55)), sched);
    return is_true(r.x_s == x && r.trace.steps.empty());
  });
  auto exact_round_trip = [&](auto tag, std::uint64_t seed) {
    using T = decltype(tag);
    const auto m = tiny_model<T>(seed);
    const auto eps = unconditional(m);
    Rng rng(seed);
    double worst = 0.0;
    for (int k = 0; k < 40; ++k) {
      const int t = rng.uniform_int(2, 1000), s = rng.uniform_int(1, t - 1);
      const double rho = rng.uniform(0.05, 1.0);
      const auto xs = rng.normal_tensor<T>({4, 4});
      const auto fwd = coupled_invert(CoupledState<T>::start(xs, s), t, eps, rho, sched);
      const auto back = coupled_exact_reverse(unmix(fwd.state.x, fwd.state.x_aux, rho), fwd.state.x_aux, t, s, eps, sched);
      worst = std::max({worst, rel_err(back.x, xs), rel_err(back.x_aux, xs)});
    }
    return worst;
  };
  run("inversion", "coupled_round_trip_exact_f64", [&] { return lt(exact_round_trip(double{}, 56), 1e-10); });
  run("inversion", "coupled_round_trip_exact_oracle_f64", [&] {
    GaussianOracle<double> o{gaussian_mean_pattern<double>(4), 0.3};
    const auto eps = oracle_predictor(o, sched);
    Rng rng(61);
    double worst = 0.0;
    for (int k = 0; k < 40; ++k) {
      const int t = rng.uniform_int(2, 1000), s = rng.uniform_int(1, t - 1);
      const double rho = rng.uniform(0.05, 1.0);
      const auto xs = rng.normal_tensor<double>({4, 4});
      const auto fwd = coupled_invert(CoupledState<double>::start(xs, s), t, eps, rho, sched);
      const auto back =
          coupled_exact_reverse(unmix(fwd.state.x, fwd.state.x_aux, rho), fwd.state.x_aux, t, s, eps, sched);
      worst = std::max({worst, rel_err(back.x, xs), rel_err(back.x_aux, xs)});
    }
    return lt(worst, 1e-10);
  });

  run("inversion", "coupled_round_trip_exact_f32", [&] { return lt(exact_round_trip(float{}, 57), 1e-4); });
  run("inversion", "x_int_matches_independent_coupled_formula", [&] {
    Rng rng(58);
    GaussianOracle<double> o{rng.normal_tensor<double>({4, 4}), 0.2};
    const auto m = tiny_model<double>(58);
    const auto ad = make_lora(m, LoraConfig{2, 1.0, 1e-3}, rng);
    auto eps_lo = [&](const Tensor<double>& x, int t) { return predict_eps_lora(m, ad, x, t, Condition::none()); };
    const auto xs = rng.normal_tensor<double>({4, 4});
    const int s = 300, t = 350;
    const auto st = coupled_invert(CoupledState<double>::start(xs, s), t, eps_lo, 0.93, sched);
    const double as = sched.alpha_bar(s), at = sched.alpha_bar(t);
    auto advance = [&](const Tensor<double>& x, const Tensor<double>& e) {
      Tensor<double> out(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i)
        out[i] = std::sqrt(at) * (x[i] - std::sqrt(1 - as) * e[i]) / std::sqrt(as) + std::sqrt(1 - at) * e[i];
      return out;
    };
    const auto aux = advance(xs, predict_eps(m, xs, s, Condition::none()));
    const auto xint = advance(xs, predict_eps(m, aux, s, Condition::none()));
    (void)o;
    return lt(std::max(max_abs_diff(st.x_aux_int, aux), max_abs_diff(st.x_int, xint)), 1e-6);
  });
  run("inversion", "naive_interval_error_nondecreasing_in_delta_T", [&] {
    // Oracle predictor; reference is the same interval traversed in unit sub-steps.
    Rng rng(59);
    GaussianOracle<double> o{gaussian_mean_pattern<double>(8), 0.25};
    const auto eps = oracle_predictor(o, sched);
    std::vector<double> errs;
    for (int dt : {25, 50, 150, 200}) {
      double acc = 0.0;
      Rng r2(590);
      for (int k = 0; k < 10; ++k) {
        const int s = r2.uniform_int(1, 700);
        const auto xs = q_sample(o.mu, s, r2.normal_tensor<double>(o.mu.shape()), sched);
        const auto naive = naive_interval(xs, s, s + dt, eps, sched);
        auto fine = xs;
        for (int u = s; u < s + dt; ++u) fine = ddim_inversion_transition(fine, eps(fine, u), u, u + 1, sched);
        acc += rel_err(naive, fine);
      }
      errs.push_back(acc / 10);
    }
    (void)rng;
    return is_true(std::is_sorted(errs.begin(), errs.end()) && errs.front() > 0);
  });
  run("inversion", "naive_invert_error_grows_with_delta_S", [&] {
    GaussianOracle<double> o{gaussian_mean_pattern<double>(8), 0.25};
    const auto eps = oracle_predictor(o, sched);
    Rng rng(60);
    const auto x0 = lincomb(1.0, o.mu, 0.5, rng.normal_tensor<double>(o.mu.shape()));
    const int s = 600;
    const auto ref = naive_invert(x0, s, 1, eps, sched).x_s;
    std::vector<double> errs;
    for (int ds : {50, 100, 150, 200}) errs.push_back(rel_err(naive_invert(x0, s, ds, eps, sched).x_s, ref));
    return is_true(std::is_sorted(errs.begin(), errs.end()) && errs.front() > 0);
  });

  // ------------------------------------------------------------ splat
  run("splat", "transparent_scene_renders_background", [] {
    Rng rng(61);
    auto sc = random_scene<double>(8, rng, 0.1, 0.5);
    for (auto& v : sc.opacity_logit().data()) v = -60.0;
    return le(norm(render(sc, CameraPose{}, 16).image), 1e-20);
  });
  run("splat", "centered_splat_peaks_and_decays", [] {
    auto sc = SplatScene<double>::blank(1);
    sc.log_scale()[0] = sc.log_scale()[1] = std::log(0.3);
    sc.color()[0] = 1.0;
    sc.opacity_logit()[0] = 40.0;
    const int side = 16;
    const auto img = render(sc, CameraPose{}, side).image;
    // Pixel centres are symmetric about the origin; walk outward along the row just below centre.
    const std::size_t r = side / 2;
    bool ok = img[r * side + side / 2] == *std::max_element(img.data().begin(), img.data().end());
    for (int c = side / 2; c + 1 < side; ++c) ok = ok && img[r * side + std::size_t(c) + 1] <= img[r * side + std::size_t(c)];
    return is_true(ok);
  });
  run("splat", "zoom2_footprint_area_ratio", [] {
    auto sc = SplatScene<double>::blank(1);
    sc.log_scale()[0] = sc.log_scale()[1] = std::log(0.12);
    sc.color()[0] = 1.0;
    sc.opacity_logit()[0] = 40.0;
    auto count = [&](double zoom) {
      const auto img = render(sc, CameraPose{0, 0, 0, zoom}, 64).image;
      return double(std::count_if(img.data().begin(), img.data().end(), [](double v) { return v > 0.5; }));
    };
    return lt(std::abs(count(2.0) / count(1.0) / 4.0 - 1.0), 0.2);
  });
  run("splat", "render_vjp_matches_fd_h1e-4", [] {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      Rng rng(62 + seed);
      auto sc = random_scene<double>(5, rng, 0.2, 0.7, 0.6);
      const CameraPose pose{rng.uniform(-1, 1), 0.05, -0.03, 1.1};
      const auto cot = rng.normal_tensor<double>({16, 16});
      const auto g = render_vjp(sc, pose, cot).flat();
      auto f = [&] { return composite_loss(sc, pose, cot, 16); };
      worst = std::max(worst, vec_rel_err(g, fd_gradient(sc.params, f, 1e-4)));
    }
    return lt(worst, 1e-3);
  });
  run("splat", "zero_cotangent_zero_gradient", [] {
    Rng rng(66);
    const auto sc = random_scene<double>(5, rng, 0.2, 0.7);
    return le(render_vjp(sc, CameraPose{}, Tensor<double>({16, 16})).norm(), 0.0);
  });
  run("splat", "center_gradient_local_to_footprint", [] {
    auto sc = SplatScene<double>::blank(1);
    sc.center()[0] = -0.5;
    sc.center()[1] = -0.5;
    sc.log_scale()[0] = sc.log_scale()[1] = std::log(0.05);
    sc.color()[0] = 0.7;
    Tensor<double> cot({32, 32});
    for (int r = 0; r < 32; ++r)
      for (int c = 0; c < 32; ++c) {
        const auto [x, y] = pixel_center(r, c, 32);
        if (std::hypot(x + 0.5, y + 0.5) > 4 * 0.05) cot[std::size_t(r * 32 + c)] = 1.0;
      }
    const auto g = render_vjp(sc, CameraPose{}, cot);
    return lt(std::hypot(g.center[0], g.center[1]), 1e-6);
  });
  run("splat", "vjp_linear_in_cotangent", [] {
    Rng rng(67);
    const auto sc = random_scene<double>(6, rng, 0.2, 0.6);
    const auto c1 = rng.normal_tensor<double>({16, 16}), c2 = rng.normal_tensor<double>({16, 16});
    const auto g1 = render_vjp(sc, CameraPose{}, c1).flat(), g2 = render_vjp(sc, CameraPose{}, c2).flat();
    const auto g = render_vjp(sc, CameraPose{}, lincomb(2.0, c1, -0.5, c2)).flat();
    std::vector<double> expect;
    for (std::size_t i = 0; i < g1.size(); ++i) expect.push_back(2.0 * g1[i] - 0.5 * g2[i]);
    return lt(vec_rel_err(g, expect), 1e-6);
  });
  run("splat", "reorder_within_second_order_bound_low_opacity", [] {
    // Swapping compositing order changes a pixel by at most sum_{i<j} a_i a_j |c_i - c_j|
    // (a = opacity * kernel); at opacities < 0.05 that is the whole deviation from additivity.
    // Each pair is swapped exactly once by the reversal and a lone swap hits the bound with equality.
    double worst_excess = -1.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(68 + seed);
      const std::size_t n = 12;
      const auto sc = random_scene<double>(n, rng, 0.001, 0.05, 1.0);
      auto rev = sc;
      for (auto& e : rev.params.entries()) {
        const auto& src = sc.params.value(e.name);
        const std::size_t w = e.value.size() / n;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t k = 0; k < w; ++k) e.value[i * w + k] = src[(n - 1 - i) * w + k];
      }
      const int side = 24;
      const auto a = render(sc, CameraPose{}, side), b = render(rev, CameraPose{}, side);
      std::vector<std::vector<double>> alpha(n, std::vector<double>(std::size_t(side * side), 0.0));
      for (std::size_t i = 0; i < n; ++i) {
        auto one = SplatScene<double>::blank(1);
        for (auto& e : one.params.entries()) {
          const std::size_t w = e.value.size();
          for (std::size_t k = 0; k < w; ++k) e.value[k] = sc.params.value(e.name)[i * w + k];
        }
        one.color()[0] = 1.0;
        const auto img = render(one, CameraPose{}, side).image;
        for (std::size_t p = 0; p < img.size(); ++p) alpha[i][p] = img[p];
      }
      for (std::size_t p = 0; p < std::size_t(side * side); ++p) {
        double bound = 0.0;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = i + 1; j < n; ++j)
            bound += alpha[i][p] * alpha[j][p] * std::abs(double(sc.color()[i]) - double(sc.color()[j]));
        worst_excess = std::max(worst_excess, std::abs(a.image[p] - b.image[p]) - bound);
      }
    }
    return le(worst_excess, 1e-12);
  });
  run("splat", "mass_nondecreasing_in_opacity_uniform_color", [] {
    bool ok = true;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(78 + seed);
      auto sc = random_scene<double>(10, rng, 0.05, 0.9);
      for (auto& c : sc.color().data()) c = 0.6;
      for (std::size_t i = 0; i < sc.count(); ++i) {
        const auto base = render(sc, CameraPose{}, 16).image;
        const double before = std::accumulate(base.data().begin(), base.data().end(), 0.0);
        auto up = sc;
        up.opacity_logit()[i] += 0.5;
        const auto img = render(up, CameraPose{}, 16).image;
        ok = ok && std::accumulate(img.data().begin(), img.data().end(), 0.0) >= before - 1e-12;
      }
    }
    return is_true(ok);
  });
  run("splat", "random_init_reproducible", [] {
    Rng a(90), b(90);
    return is_true(init_scene<float>(InitMode::random, 64, a).params.value_hash() ==
                   init_scene<float>(InitMode::random, 64, b).params.value_hash());
  });
  run("splat", "data_fitted_centers_inside_disk", [] {
    Rng rng(91);
    const auto ds = make_shape_dataset<double>(32, 32, rng);
    const auto mean = class_mean_pixels(ds, 0);
    const auto sc = init_scene(InitMode::data_fitted, 256, rng, &mean);
    // Support mask: pixels where the class mean is lit.
    std::size_t inside = 0;
    for (std::size_t i = 0; i < sc.count(); ++i) {
      const double x = sc.center()[2 * i], y = sc.center()[2 * i + 1];
      const int c = std::clamp(int((x + 1.0) / 2.0 * 32), 0, 31), r = std::clamp(int((y + 1.0) / 2.0 * 32), 0, 31);
      inside += mean[std::size_t(r * 32 + c)] > 0.1;
    }
    return ge(double(inside) / double(sc.count()), 0.8);
  });
  run("splat", "data_fitted_init_closer_than_random", [] {
    double fit = 0.0, rnd = 0.0;
    Rng drng(92);
    const auto ds = make_shape_dataset<float>(32, 32, drng);
    const auto mean = class_mean_pixels(ds, 0);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng a(seed), b(seed);
      fit += mean_squared_diff(render(init_scene(InitMode::data_fitted, 256, a, &mean), CameraPose{}, 32).image, mean);
      rnd += mean_squared_diff(render(init_scene(InitMode::random, 256, b, &mean), CameraPose{}, 32).image, mean);
    }
    return lt(fit / 5, rnd / 5);
  });
  run("splat", "empty_scene_rejected", [] {
    Rng rng(93);
    return is_true(throws([&] { init_scene<float>(InitMode::random, 0, rng); }));
  });

  // ------------------------------------------------------------ distill
  run("distill", "error_split_identity_1000_pairs", [] {
    Rng rng(101);
    double worst = 0.0;
    bool below = true;
    for (int k = 0; k < 1000; ++k) {
      const double d = rng.uniform(1e-3, 10.0);
      double eta = rng.uniform(0.0, d);
      if (eta <= 0.0) eta = 0.5 * d;
      const auto r = error_split(d, eta);
      worst = std::max(worst, std::abs(r.identity_residual));
      below = below && r.assumption_holds && r.eps_esm < r.eps_ism;
    }
    return below ? lt(worst, 1e-12) : is_true(false);
  });
  run("distill", "error_split_worked_instance", [] {
    const auto r = error_split(2.0, 0.5);
    return le(std::abs(r.eps_ism - 4.0) + std::abs(r.eps_esm - 2.5) + std::abs(r.identity_residual), 0.0);
  });
  run("distill", "error_split_limits", [] {
    const auto small = error_split(2.0, 1e-9), edge = error_split(2.0, 2.0);
    return is_true(std::abs(small.eps_esm - small.eps_ism) < 1e-8 && edge.eps_esm == edge.eps_ism &&
                   !edge.assumption_holds);
  });

  // Distillation fixtures: 8x8 renders, tiny random-weight denoiser.
  const auto dmodel = tiny_model<double>(110, 8);
  Rng frng(110);
  const auto dscene = random_scene<double>(6, frng, 0.2, 0.7);
  DistillConfig dcfg;
  dcfg.side = 8;
  dcfg.target_label = 1;
  dcfg.delta_S = 150;
  dcfg.delta_T = 80;
  const auto dad = [&] {
    Rng r(111);
    auto ad = make_lora(dmodel, LoraConfig{2, 1.0, 1e-3}, r);
    for (auto& e : ad.params().entries())
      if (e.name.back() == 'B') e.value = 0.1 * r.normal_tensor<double>(e.value.shape());
    return ad;
  }();
  const CameraPose dpose{0.3, 0.02, -0.01, 1.02};

  run("distill", "esm_report_decomposition_and_recomputation", [&] {
    const auto eps = model_eps(dmodel, dcfg, &dad);
    double worst = 0.0;
    bool exact = true;
    for (std::uint64_t it = 0; it < 5; ++it) {
      Rng rng = Rng::derive(7, it), rng2 = Rng::derive(7, it);
      const auto r = render(dscene, dpose, 8);
      const auto g = esm_gradient(dscene, r, eps, sched, dcfg, rng);
      exact = exact && g.report.eps_esm == g.report.term1 + g.report.term2 && g.report.term1 >= 0 && g.report.term2 >= 0;
      // Independent recomputation.
      const int t = rng2.uniform_int(dcfg.t_min, dcfg.t_max), s = std::max(t - dcfg.delta_T, 0);
      auto f = [&](const Tensor<double>& x, int from, int to, const Tensor<double>& e) {
        const double af = sched.alpha_bar(from), at = sched.alpha_bar(to);
        Tensor<double> out(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i)
          out[i] = std::sqrt(at) * (x[i] - std::sqrt(1 - af) * e[i]) / std::sqrt(af) + std::sqrt(1 - at) * e[i];
        return out;
      };
      auto phi = [&](const Tensor<double>& x, int k) { return predict_eps(dmodel, x, std::max(k, 1), Condition::none()); };
      auto lo = [&](const Tensor<double>& x, int k) {
        return predict_eps_lora(dmodel, dad, x, std::max(k, 1), Condition::none());
      };
      Tensor<double> x = to_latent(r.image);
      for (int cur = 0; cur < s;) {
        const int nxt = std::min(cur + dcfg.delta_S, s);
        x = f(x, cur, nxt, phi(x, nxt));
        cur = nxt;
      }
      const auto xs = x;
      const auto aux = s < t ? f(xs, s, t, lo(xs, s)) : xs;
      const auto xint = f(xs, s, t, lo(aux, s));
      Tensor<double> xt(xint.shape());
      for (std::size_t i = 0; i < xt.size(); ++i) xt[i] = (xint[i] - (1 - dcfg.rho) * aux[i]) / dcfg.rho;
      const auto et = predict_eps(dmodel, xt, t, Condition::label(1));
      const auto es = phi(xs, s), ei = predict_eps(dmodel, xint, t, Condition::none());
      double t1 = 0, t2 = 0;
      for (std::size_t i = 0; i < et.size(); ++i) t1 += (et[i] - ei[i]) * (et[i] - ei[i]), t2 += (ei[i] - es[i]) * (ei[i] - es[i]);
      worst = std::max({worst, std::abs(t1 - g.report.term1) / std::max(t1, 1e-30),
                        std::abs(t2 - g.report.term2) / std::max(t2, 1e-30)});
    }
    return exact ? lt(worst, 1e-6) : is_true(false);
  });
  run("distill", "esm_rho1_fresh_adapter_uses_x_int", [&] {
    Rng r(112);
    const auto fresh = make_lora(dmodel, LoraConfig{2, 1.0, 1e-3}, r);
    DistillConfig c = dcfg;
    c.rho = 1.0;
    const auto eps = model_eps(dmodel, c, &fresh);
    Rng rng = Rng::derive(8, 0), rng2 = Rng::derive(8, 0);
    const auto rr = render(dscene, dpose, 8);
    const auto g = esm_gradient(dscene, rr, eps, sched, c, rng);
    const int t = rng2.uniform_int(c.t_min, c.t_max), s = std::max(t - c.delta_T, 0);
    const auto phi = unconditional(dmodel);
    auto phi1 = [&](const Tensor<double>& x, int k) { return phi(x, std::max(k, 1)); };
    const auto xs = naive_invert(to_latent(rr.image), s, c.delta_S, phi1, sched).x_s;
    const auto aux = ddim_inversion_transition(xs, phi1(xs, s), s, t, sched);
    const auto xint = ddim_inversion_transition(xs, phi1(aux, s), s, t, sched);
    const auto expect = predict_eps(dmodel, xint, t, Condition::label(1)) - phi1(xs, s);
    return lt(max_abs_diff(g.cotangent, expect), 1e-12);
  });
  run("distill", "sds_gradient_decomposes_through_render_vjp", [&] {
    const auto eps = model_eps(dmodel, dcfg);
    Rng rng = Rng::derive(9, 0), rng2 = Rng::derive(9, 0);
    const auto rr = render(dscene, dpose, 8);
    const auto g = sds_gradient(dscene, rr, eps, sched, dcfg, rng);
    const int t = rng2.uniform_int(dcfg.t_min, dcfg.t_max);
    const auto x0 = to_latent(rr.image);
    const auto noise = rng2.normal_tensor<double>(x0.shape());
    const auto cot = predict_eps(dmodel, q_sample(x0, t, noise, sched), t, Condition::label(1)) - noise;
    return lt(vec_rel_err(g.grad.flat(), render_vjp(dscene, rr.cache, 2.0 * cot).flat()), 1e-6);
  });
  run("distill", "ism_on_oracle_matches_straight_line", [&] {
    GaussianOracle<double> o{gaussian_mean_pattern<double>(8), 0.3};
    const auto op = oracle_predictor(o, sched);
    auto clamp = [op](const Tensor<double>& x, int k) { return op(x, std::max(k, 1)); };
    const EpsFns<double> eps{clamp, clamp, clamp};
    double worst = 0.0;
    for (std::uint64_t it = 0; it < 5; ++it) {
      Rng rng = Rng::derive(10, it), rng2 = Rng::derive(10, it);
      const auto rr = render(dscene, dpose, 8);
      const auto g = ism_gradient(dscene, rr, eps, sched, dcfg, rng);
      const int t = rng2.uniform_int(dcfg.t_min, dcfg.t_max), s = std::max(t - dcfg.delta_T, 0);
      const double var = o.var_d;
      auto oracle = [&](const std::vector<double>& x, int k) {
        const double ab = sched.alpha_bar(std::max(k, 1));
        std::vector<double> e(x.size());
        for (std::size_t i = 0; i < x.size(); ++i)
          e[i] = std::sqrt(1 - ab) * (x[i] - std::sqrt(ab) * o.mu[i]) / (ab * var + 1 - ab);
        return e;
      };
      auto step = [&](const std::vector<double>& x, int from, int to, const std::vector<double>& e) {
        const double af = sched.alpha_bar(from), at = sched.alpha_bar(to);
        std::vector<double> out(x.size());
        for (std::size_t i = 0; i < x.size(); ++i)
          out[i] = std::sqrt(at / af) * x[i] + (std::sqrt(1 - at) - std::sqrt(at / af) * std::sqrt(1 - af)) * e[i];
        return out;
      };
      std::vector<double> x(rr.image.size());
      for (std::size_t i = 0; i < x.size(); ++i) x[i] = 2 * rr.image[i] - 1;
      for (int cur = 0; cur < s;) {
        const int nxt = std::min(cur + dcfg.delta_S, s);
        x = step(x, cur, nxt, oracle(x, nxt));
        cur = nxt;
      }
      const auto es = oracle(x, s);
      const auto et = oracle(step(x, s, t, es), t);
      double ism = 0.0;
      for (std::size_t i = 0; i < et.size(); ++i) ism += (et[i] - es[i]) * (et[i] - es[i]);
      worst = std::max(worst, std::abs(ism - g.report.eps_ism) / std::max(ism, 1e-30));
    }
    return lt(worst, 1e-6);
  });
  run("distill", "zero_omega_zero_gradient", [&] {
    DistillConfig c = dcfg;
    c.omega_scale = 0.0;
    Rng rng(113);
    double worst = 0.0;
    const auto eps = model_eps(dmodel, c, &dad);
    const auto rr = render(dscene, dpose, 8);
    worst = std::max(worst, sds_gradient(dscene, rr, eps, sched, c, rng).grad.norm());
    worst = std::max(worst, ism_gradient(dscene, rr, eps, sched, c, rng).grad.norm());
    worst = std::max(worst, esm_gradient(dscene, rr, eps, sched, c, rng).grad.norm());
    return le(worst, 0.0);
  });
  run("distill", "omega_scale_equivariance_k4", [&] {
    DistillConfig c4 = dcfg;
    c4.omega_scale = 4.0;
    bool exact = true;
    const auto rr = render(dscene, dpose, 8);
    for (LossKind k : {LossKind::sds, LossKind::ism, LossKind::esm}) {
      Rng r1 = Rng::derive(11, 0), r4 = Rng::derive(11, 0);
      const auto e1 = model_eps(dmodel, dcfg, &dad), e4 = model_eps(dmodel, c4, &dad);
      DistillGradient<double> g1, g4;
      if (k == LossKind::sds) {
        g1 = sds_gradient(dscene, rr, e1, sched, dcfg, r1);
        g4 = sds_gradient(dscene, rr, e4, sched, c4, r4);
      } else if (k == LossKind::ism) {
        g1 = ism_gradient(dscene, rr, e1, sched, dcfg, r1);
        g4 = ism_gradient(dscene, rr, e4, sched, c4, r4);
      } else {
        g1 = esm_gradient(dscene, rr, e1, sched, dcfg, r1);
        g4 = esm_gradient(dscene, rr, e4, sched, c4, r4);
      }
      const auto a = g1.grad.flat(), b = g4.grad.flat();
      for (std::size_t i = 0; i < a.size(); ++i) exact = exact && b[i] == 4.0 * a[i];
    }
    return is_true(exact);
  });
  run("distill", "stop_gradient_parameter_hashes", [&] {
    const auto hm = dmodel.params().value_hash(), ha = dad.params().value_hash();
    Rng rng(114);
    const auto eps = model_eps(dmodel, dcfg, &dad);
    const auto rr = render(dscene, dpose, 8);
    sds_gradient(dscene, rr, eps, sched, dcfg, rng);
    ism_gradient(dscene, rr, eps, sched, dcfg, rng);
    esm_gradient(dscene, rr, eps, sched, dcfg, rng);
    return is_true(dmodel.params().value_hash() == hm && dad.params().value_hash() == ha);
  });
  run("distill", "loop_deterministic_under_seed", [&] {
    const auto m = tiny_model<float>(115, 8);
    Rng r(115);
    const auto sc = random_scene<float>(6, r, 0.2, 0.7);
    DistillConfig c = dcfg;
    c.iterations = 6;
    c.seed = 99;
    auto once = [&] {
      auto session = start_session(sc, m, c);
      auto log = distill_loop(session, PoseSampler{}, m, sched, c);
      return std::make_pair(log, session.scene.params.value_hash());
    };
    const auto [l1, h1] = once();
    const auto [l2, h2] = once();
    bool same = h1 == h2 && l1.size() == l2.size();
    for (std::size_t i = 0; same && i < l1.size(); ++i)
      same = l1[i].t == l2[i].t && l1[i].report.eps_esm == l2[i].report.eps_esm &&
             l1[i].report.eps_ism == l2[i].report.eps_ism && l1[i].grad_norm == l2[i].grad_norm &&
             l1[i].lora_loss == l2[i].lora_loss;
    return is_true(same);
  });
  run("distill", "zero_iterations_leave_scene", [&] {
    const auto m = tiny_model<float>(116, 8);
    Rng r(116);
    const auto sc = random_scene<float>(6, r, 0.2, 0.7);
    DistillConfig c = dcfg;
    c.iterations = 0;
    auto session = start_session(sc, m, c);
    distill_loop(session, PoseSampler{}, m, sched, c);
    return is_true(session.scene.params.value_hash() == sc.params.value_hash());
  });

  // ------------------------------------------------------------ harness
  run("harness", "config_rejects_unknown_key", [] {
    return is_true(throws([] { parse_run_config(json{{"schema_version", 1}, {"distill", {{"rh0", 0.5}}}}); }) &&
                   !throws([] { parse_run_config(json{{"schema_version", 1}}); }));
  });
  run("harness", "config_round_trips_through_json", [] {
    RunConfig c = parse_run_config(json{{"schema_version", 1}, {"seed", 5}, {"distill", {{"rho", 0.7}}}});
    return is_true(to_json(parse_run_config(to_json(c))) == to_json(c));
  });
  run("harness", "csv_rfc4180_quoting", [] {
    return is_true(csv_field("a,b") == "\"a,b\"" && csv_field("say \"hi\"") == "\"say \"\"hi\"\"\"" &&
                   csv_field("plain") == "plain" && csv_field("x\ny") == "\"x\ny\"");
  });
  run("harness", "png_stream_is_well_formed", [] {
    const std::string png = encode_png(std::vector<std::uint8_t>(12, 200), 4, 3, 1);
    // IDAT payload must inflate back to 3 filtered rows of 4 bytes.
    const std::size_t idat = png.find("IDAT");
    const std::uint32_t len = (std::uint32_t(std::uint8_t(png[idat - 4])) << 24) |
                              (std::uint32_t(std::uint8_t(png[idat - 3])) << 16) |
                              (std::uint32_t(std::uint8_t(png[idat - 2])) << 8) | std::uint8_t(png[idat - 1]);
    std::vector<Bytef> raw(15);
    uLongf raw_len = raw.size();
    const int rc = uncompress(raw.data(), &raw_len, reinterpret_cast<const Bytef*>(png.data() + idat + 4), len);
    return is_true(png.rfind("\x89PNG\r\n\x1a\n", 0) == 0 && rc == Z_OK && raw_len == 15 && raw[0] == 0 &&
                   raw[1] == 200 && png.size() > 8 && png.substr(png.size() - 8, 4) == "IEND");
  });
  run("harness", "checkpoint_round_trip_bit_exact", [] {
    const fs::path dir = fs::temp_directory_path() / ("esm_verify_ckpt_" + std::to_string(::getpid()));
    Rng rng(120);
    Checkpoint c;
    c.kind = "test";
    c.meta = {{"k", 1}};
    c.add("a/b", rng.normal_tensor<float>({3, 5}));
    c.add("c", Tensor<float>({2}, -0.0f));
    write_checkpoint(dir, c);
    const auto back = read_checkpoint(dir);
    fs::remove_all(dir);
    bool same = back.kind == "test" && back.meta == c.meta && back.tensors.size() == 2;
    for (std::size_t k = 0; same && k < 2; ++k)
      same = back.tensors[k].first == c.tensors[k].first &&
             std::memcmp(back.tensors[k].second.raw(), c.tensors[k].second.raw(), c.tensors[k].second.size() * 4) == 0;
    return is_true(same);
  });
  return report;
}

}  // namespace esm
