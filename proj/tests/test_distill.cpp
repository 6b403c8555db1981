#include "test_util.hpp"

using namespace esm;
using esm::testing::default_schedule;
using esm::testing::small_model;

namespace {

template <typename T>
NoisePredictor<T> zero_pred() {
  return [](const Tensor<T>& x, int) { return Tensor<T>(x.shape()); };
}

DistillConfig tiny_cfg(LossKind loss) {
  DistillConfig c;
  c.loss = loss;
  c.side = 8;
  c.delta_S = 150;
  c.delta_T = 80;
  c.iterations = 6;
  c.target_label = 1;
  return c;
}

SplatScene<double> tiny_scene(std::uint64_t seed) {
  Rng rng(seed);
  return esm::testing::scene_with<double>(6, rng, 0.2, 0.7);
}

template <typename T>
Tensor<T> rot90(const Tensor<T>& img) {
  const std::size_t n = img.shape()[0];
  Tensor<T> out(img.shape());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = img[c * n + (n - 1 - r)];
  return out;
}

}  // namespace

TEST(ErrorSplit, WorkedInstance) {
  const auto r = error_split(2.0, 0.5);
  EXPECT_DOUBLE_EQ(r.eps_ism, 4.0);
  EXPECT_DOUBLE_EQ(r.eps_esm, 2.5);
  EXPECT_TRUE(r.assumption_holds);
}

TEST(ErrorSplit, LimitsOfTheAssumption) {
  const auto small = error_split(2.0, 1e-9);
  EXPECT_NEAR(small.eps_esm, small.eps_ism, 1e-8);
  EXPECT_LT(small.eps_esm, small.eps_ism);
  const auto edge = error_split(2.0, 2.0);
  EXPECT_FALSE(edge.assumption_holds);
  EXPECT_DOUBLE_EQ(edge.eps_esm, edge.eps_ism);
  EXPECT_FALSE(error_split(0.0, 0.0).assumption_holds);
}

TEST(ErrorSplit, StrictlyBetterInsideAssumption) {
  Rng rng(1);
  for (int k = 0; k < 1000; ++k) {
    const double d = rng.uniform(1e-3, 10.0), eta = rng.uniform(0.0, d);
    if (eta <= 0.0) continue;
    const auto r = error_split(d, eta);
    ASSERT_LT(std::abs(r.identity_residual), 1e-12);
    ASSERT_LT(r.eps_esm, r.eps_ism) << d << " " << eta;
  }
}

TEST(DistillConfigCheck, RejectsOutOfRangeFields) {
  const auto& s = default_schedule();
  auto bad = [&](auto mutate) {
    DistillConfig c;
    mutate(c);
    EXPECT_THROW(validate(c, s), ConfigError);
  };
  bad([](DistillConfig& c) { c.rho = 0.0; });
  bad([](DistillConfig& c) { c.rho = 1.01; });
  bad([](DistillConfig& c) { c.delta_S = 0; });
  bad([](DistillConfig& c) { c.delta_T = 0; });
  bad([](DistillConfig& c) { c.t_min = 0; });
  bad([](DistillConfig& c) { c.t_max = 1001; });
  bad([](DistillConfig& c) { c.iterations = -1; });
  bad([](DistillConfig& c) { c.side = 4; });
  EXPECT_NO_THROW(validate(DistillConfig{}, s));
}

TEST(DistillConfigCheck, LossNamesParse) {
  EXPECT_EQ(parse_loss("sds"), LossKind::sds);
  EXPECT_EQ(parse_loss("ism"), LossKind::ism);
  EXPECT_EQ(parse_loss("esm"), LossKind::esm);
  EXPECT_THROW(parse_loss("ESM"), ConfigError);
  EXPECT_THROW(parse_loss("bogus"), ConfigError);
}

TEST(Sds, NoiseRecoveringPredictorGivesZero) {
  const auto sc = tiny_scene(2);
  const auto r = render(sc, CameraPose{}, 8);
  const auto x0 = to_latent(r.image);
  const auto& s = default_schedule();
  EpsFns<double> f;
  f.cond = [&](const Tensor<double>& x, int t) {
    return (1.0 / std::sqrt(1 - s.alpha_bar(t))) * (x - std::sqrt(s.alpha_bar(t)) * x0);
  };
  Rng rng(2);
  const auto g = sds_gradient(sc, r, f, s, tiny_cfg(LossKind::sds), rng);
  EXPECT_LT(norm(g.cotangent), 1e-9);
  EXPECT_LT(g.grad.norm(), 1e-8);
}

TEST(Sds, ZeroWeightGivesZeroGradient) {
  const auto sc = tiny_scene(3);
  const auto m = small_model<double>(3, 8);
  auto cfg = tiny_cfg(LossKind::sds);
  cfg.omega_scale = 0.0;
  Rng rng(3);
  const auto g = sds_gradient(sc, CameraPose{}, m, default_schedule(), cfg, rng);
  EXPECT_EQ(g.grad.norm(), 0.0);
  EXPECT_GT(g.report.eps_ism, 0.0);
}

TEST(Ism, ZeroPredictorsGiveZeroCotangent) {
  const auto sc = tiny_scene(4);
  const auto r = render(sc, CameraPose{}, 8);
  EpsFns<double> f{zero_pred<double>(), zero_pred<double>(), zero_pred<double>()};
  for (auto loss : {LossKind::ism, LossKind::esm}) {
    Rng rng(4);
    const auto cfg = tiny_cfg(loss);
    const auto g = loss == LossKind::ism ? ism_gradient(sc, r, f, default_schedule(), cfg, rng)
                                         : esm_gradient(sc, r, f, default_schedule(), cfg, rng);
    EXPECT_EQ(norm(g.cotangent), 0.0);
    EXPECT_EQ(g.report.eps_esm, 0.0);
  }
}

TEST(Ism, MatchesHandBuiltEstimate) {
  const auto sc = tiny_scene(5);
  const auto m = small_model<double>(5, 8);
  const auto cfg = tiny_cfg(LossKind::ism);
  const auto& sched = default_schedule();
  Rng rng(5), replay(5);
  const auto g = ism_gradient(sc, CameraPose{}, m, sched, cfg, rng);
  const int t = replay.uniform_int(cfg.t_min, cfg.t_max), s = std::max(t - cfg.delta_T, 0);
  ASSERT_EQ(g.t, t);
  ASSERT_EQ(g.s, s);
  const auto f = model_eps(m, cfg);
  const auto x0 = to_latent(render(sc, CameraPose{}, 8).image);
  const auto xs = naive_invert(x0, s, cfg.delta_S, f.null, sched).x_s;
  const auto es = f.null(xs, s);
  const auto xt = ddim_inversion_transition(xs, es, s, t, sched);
  EXPECT_LT(max_abs_diff(g.cotangent, f.cond(xt, t) - es), 1e-14);
}

TEST(Esm, MatchesHandBuiltCoupledEstimate) {
  const auto sc = tiny_scene(6);
  const auto m = small_model<double>(6, 8);
  Rng arng(6);
  auto ad = make_lora(m, LoraConfig{}, arng);
  for (auto& e : ad.params().entries()) e.value = 0.1 * arng.normal_tensor<double>(e.value.shape());
  auto cfg = tiny_cfg(LossKind::esm);
  cfg.omega_mode = OmegaMode::one_minus_alpha_bar;
  const auto& sched = default_schedule();
  Rng rng(7), replay(7);
  const auto g = esm_gradient(sc, CameraPose{}, m, ad, sched, cfg, rng);
  const int t = replay.uniform_int(cfg.t_min, cfg.t_max), s = std::max(t - cfg.delta_T, 0);
  const auto f = model_eps(m, cfg, &ad);
  const auto x0 = to_latent(render(sc, CameraPose{}, 8).image);
  const auto xs = naive_invert(x0, s, cfg.delta_S, f.null, sched).x_s;
  const auto aux = ddim_inversion_transition(xs, f.lo(xs, s), s, t, sched);
  const auto xint = ddim_inversion_transition(xs, f.lo(aux, s), s, t, sched);
  const auto xt = (1.0 / cfg.rho) * (xint - (1.0 - cfg.rho) * aux);
  const auto expect = (1.0 - sched.alpha_bar(t)) * (f.cond(xt, t) - f.null(xs, s));
  EXPECT_LT(max_abs_diff(g.cotangent, expect), 1e-12);
  EXPECT_DOUBLE_EQ(g.report.eps_esm, g.report.term1 + g.report.term2);
  EXPECT_NEAR(g.report.eta_norm * g.report.eta_norm, g.report.term2, 1e-12 * (1 + g.report.term2));
  EXPECT_NEAR(g.report.term2, squared_norm(f.null(xint, t) - f.null(xs, s)), 1e-10);
}

TEST(Esm, UnitRatioWithBasePredictorsHasNoFirstTerm) {
  const auto sc = tiny_scene(8);
  const auto r = render(sc, CameraPose{}, 8);
  GaussianOracle<double> o{gaussian_mean_pattern<double>(8), 0.3};
  const auto p = oracle_predictor(o, default_schedule());
  EpsFns<double> f{p, p, p};
  auto cfg = tiny_cfg(LossKind::esm);
  cfg.rho = 1.0;
  Rng rng(8);
  const auto g = esm_gradient(sc, r, f, default_schedule(), cfg, rng);
  EXPECT_EQ(g.report.term1, 0.0);
  EXPECT_GT(g.report.term2, 0.0);
}

TEST(Esm, RequiresAdapterPredictor) {
  const auto sc = tiny_scene(9);
  EpsFns<double> f{zero_pred<double>(), zero_pred<double>(), {}};
  Rng rng(9);
  EXPECT_THROW(esm_gradient(sc, render(sc, CameraPose{}, 8), f, default_schedule(), tiny_cfg(LossKind::esm), rng),
               ContractViolation);
}

TEST(Estimators, CotangentPullsBackThroughLatentMap) {
  const auto sc = tiny_scene(10);
  const auto m = small_model<double>(10, 8);
  const auto r = render(sc, CameraPose{}, 8);
  Rng rng(10);
  const auto g = ism_gradient(sc, r, model_eps(m, tiny_cfg(LossKind::ism)), default_schedule(),
                              tiny_cfg(LossKind::ism), rng);
  EXPECT_EQ(g.grad.flat(), render_vjp(sc, r.cache, 2.0 * g.cotangent).flat());
}

TEST(Estimators, SmallTimestepsClampIntervalStart) {
  const auto sc = tiny_scene(11);
  const auto m = small_model<double>(11, 8);
  auto cfg = tiny_cfg(LossKind::ism);
  cfg.t_max = 20;
  for (int k = 0; k < 10; ++k) {
    Rng rng(std::uint64_t(100 + k));
    const auto g = ism_gradient(sc, CameraPose{}, m, default_schedule(), cfg, rng);
    EXPECT_EQ(g.s, 0);
    EXPECT_TRUE(g.cotangent.all_finite());
  }
}

TEST(Estimators, RenderRotationByQuarterTurnIsPixelRotation) {
  const auto sc = tiny_scene(12);
  const auto a = render(sc, CameraPose{}, 16).image;
  const auto b = render(sc, CameraPose{std::numbers::pi / 2, 0, 0, 1}, 16).image;
  const auto ra = rot90(a);
  const auto rb = rot90(rot90(rot90(a)));
  EXPECT_LT(std::min(max_abs_diff(ra, b), max_abs_diff(rb, b)), 1e-12);
}

TEST(DistillLoop, ZeroIterationsLeaveScene) {
  const auto m = small_model<double>(13, 8);
  auto cfg = tiny_cfg(LossKind::esm);
  cfg.iterations = 0;
  auto session = start_session(tiny_scene(13), m, cfg);
  const auto before = session.scene.params.value_hash();
  EXPECT_TRUE(distill_loop(session, PoseSampler{}, m, default_schedule(), cfg).empty());
  EXPECT_EQ(session.scene.params.value_hash(), before);
}

TEST(DistillLoop, NeverModifiesTheDenoiser) {
  const auto m = small_model<double>(14, 8);
  const auto before = m.params().value_hash();
  for (auto loss : {LossKind::sds, LossKind::ism, LossKind::esm}) {
    const auto cfg = tiny_cfg(loss);
    auto session = start_session(tiny_scene(14), m, cfg);
    distill_loop(session, PoseSampler{}, m, default_schedule(), cfg);
    EXPECT_EQ(m.params().value_hash(), before) << to_string(loss);
    EXPECT_NE(session.scene.params.value_hash(), tiny_scene(14).params.value_hash());
  }
}

TEST(DistillLoop, SeededRunsAreBitIdentical) {
  const auto m = small_model<float>(15, 8);
  auto run = [&] {
    const auto cfg = tiny_cfg(LossKind::esm);
    auto session = start_session(tiny_scene(15).cast<float>(), m, cfg);
    const auto log = distill_loop(session, PoseSampler{}, m, default_schedule(), cfg);
    return std::make_pair(session.scene.params.value_hash(), log.back().report.eps_esm);
  };
  EXPECT_EQ(run(), run());
}

TEST(DistillLoop, SplitRunEqualsUninterrupted) {
  const auto m = small_model<double>(16, 8);
  auto cfg = tiny_cfg(LossKind::esm);
  auto whole = start_session(tiny_scene(16), m, cfg);
  const auto full = distill_loop(whole, PoseSampler{}, m, default_schedule(), cfg);
  cfg.iterations = 2;
  auto split = start_session(tiny_scene(16), m, cfg);
  distill_loop(split, PoseSampler{}, m, default_schedule(), cfg);
  cfg.iterations = 4;
  const auto tail = distill_loop(split, PoseSampler{}, m, default_schedule(), cfg);
  EXPECT_EQ(tail.front().iteration, 2);
  EXPECT_EQ(split.scene.params.value_hash(), whole.scene.params.value_hash());
  EXPECT_EQ(split.adapter->params().value_hash(), whole.adapter->params().value_hash());
  EXPECT_EQ(tail.back().report.eps_ism, full.back().report.eps_ism);
}

TEST(DistillLoop, UnknownLabelRejected) {
  const auto m = small_model<double>(17, 8);
  auto cfg = tiny_cfg(LossKind::sds);
  cfg.target_label = 5;
  auto session = start_session(tiny_scene(17), m, cfg);
  EXPECT_THROW(distill_loop(session, PoseSampler{}, m, default_schedule(), cfg), ContractViolation);
}

TEST(DistillLoop, NonFiniteSceneIsNumericError) {
  const auto m = small_model<double>(18, 8);
  const auto cfg = tiny_cfg(LossKind::sds);
  auto sc = tiny_scene(18);
  sc.color()[0] = std::numeric_limits<double>::infinity();
  auto session = start_session(sc, m, cfg);
  EXPECT_THROW(distill_loop(session, PoseSampler{}, m, default_schedule(), cfg), NumericError);
}
