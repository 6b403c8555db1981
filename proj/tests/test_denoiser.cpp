#include "test_util.hpp"

using namespace esm;
using esm::testing::default_schedule;
using esm::testing::small_model;

TEST(PredictEps, UnitGuidanceNullConditionIsSinglePass) {
  const auto m = small_model<double>(1);
  Rng rng(1);
  const auto x = esm::testing::randn<double>(rng, 4);
  EXPECT_EQ(predict_eps(m, x, 40, Condition::none(), 1.0), predict_eps(m, x, 40, Condition::none(), 7.5));
}

TEST(PredictEps, ZeroGuidanceEqualsNullBranch) {
  const auto m = small_model<double>(2);
  Rng rng(2);
  const auto x = esm::testing::randn<double>(rng, 4);
  EXPECT_LT(max_abs_diff(predict_eps(m, x, 40, Condition::label(1), 0.0), predict_eps(m, x, 40, Condition::none())),
            1e-15);
}

TEST(PredictEps, GuidanceIsAffine) {
  const auto m = small_model<double>(3);
  Rng rng(3);
  const auto x = esm::testing::randn<double>(rng, 4);
  const auto e0 = predict_eps(m, x, 600, Condition::label(0), 0.0);
  const auto e1 = predict_eps(m, x, 600, Condition::label(0), 1.0);
  for (double g : {-1.0, 0.25, 3.0})
    EXPECT_LT(max_abs_diff(predict_eps(m, x, 600, Condition::label(0), g), lincomb(1 - g, e0, g, e1)), 1e-12);
}

TEST(PredictEps, ZeroOutputLayerGivesZero) {
  const auto m = small_model<float>(4, 4, 2, true);
  Rng rng(4);
  const auto out = predict_eps(m, esm::testing::randn<float>(rng, 4), 999, Condition::label(0), 2.0);
  EXPECT_EQ(norm(out), 0.0);
}

TEST(PredictEps, GateScalesTheInput) {
  auto m = small_model<double>(4, 4, 2, true);
  m.params().value("gate.bias")[0] = 0.5;
  Rng rng(4);
  const auto x = esm::testing::randn<double>(rng, 4);
  EXPECT_LT(max_abs_diff(predict_eps(m, x, 321, Condition::label(1)), 0.5 * x), 1e-15);
}

TEST(PredictEps, GateIgnoresTheLatent) {
  // zero head, random gate: eps must be exactly linear in x
  auto m = small_model<double>(4, 4, 2, true);
  Rng rng(6);
  for (auto& v : m.params().value("gate.weight").data()) v = rng.normal();
  const auto x = esm::testing::randn<double>(rng, 4);
  const auto e1 = predict_eps(m, x, 77, Condition::label(0));
  const auto e3 = predict_eps(m, 3.0 * x, 77, Condition::label(0));
  EXPECT_GT(norm(e1), 0.0);
  EXPECT_LT(max_abs_diff(e3, 3.0 * e1), 1e-12);
}

TEST(PredictEps, Deterministic) {
  const auto m = small_model<float>(5);
  Rng rng(5);
  const auto x = esm::testing::randn<float>(rng, 4);
  EXPECT_EQ(predict_eps(m, x, 12, Condition::label(1), 1.5), predict_eps(m, x, 12, Condition::label(1), 1.5));
}

TEST(PredictEps, RejectsBadInputs) {
  const auto m = small_model<float>(6);
  EXPECT_THROW(predict_eps(m, Tensor<float>({4, 4}), 0, Condition::none()), ContractViolation);
  EXPECT_THROW(predict_eps(m, Tensor<float>({3, 3}), 5, Condition::none()), ContractViolation);
  EXPECT_THROW(predict_eps(m, Tensor<float>({4, 4}), 5, Condition::label(2)), ContractViolation);
}

TEST(Oracle, StandardNormalDataCollapses) {
  GaussianOracle<double> o{Tensor<double>({3}), 1.0};
  Rng rng(7);
  const auto x = rng.normal_tensor<double>({3});
  EXPECT_LT(max_abs_diff(oracle_eps(o, x, 250, default_schedule()),
                         std::sqrt(1 - default_schedule().alpha_bar(250)) * x),
            1e-15);
}

TEST(Oracle, CenteredInputGivesZero) {
  Rng rng(8);
  GaussianOracle<double> o{rng.normal_tensor<double>({5}), 0.3};
  const auto x = std::sqrt(default_schedule().alpha_bar(640)) * o.mu;
  EXPECT_LT(norm(oracle_eps(o, x, 640, default_schedule())), 1e-15);
}

TEST(Oracle, AffineInInput) {
  Rng rng(9);
  GaussianOracle<double> o{rng.normal_tensor<double>({6}), 0.2};
  const auto x1 = rng.normal_tensor<double>({6}), x2 = rng.normal_tensor<double>({6});
  for (double a : {-0.5, 0.3, 2.0})
    EXPECT_LT(max_abs_diff(oracle_eps(o, lincomb(a, x1, 1 - a, x2), 77, default_schedule()),
                           lincomb(a, oracle_eps(o, x1, 77, default_schedule()), 1 - a,
                                   oracle_eps(o, x2, 77, default_schedule()))),
              1e-10);
}

TEST(Oracle, MatchesMonteCarloPosteriorMean) {
  // Bin x_t near a probe point and average the noise that produced it.
  Rng rng(10);
  const auto& s = default_schedule();
  const int t = 500;
  const double mu = 0.3, var = 0.5, ab = s.alpha_bar(t);
  GaussianOracle<double> o{Tensor<double>({1}, mu), var};
  double sxx = 0, sx = 0, se = 0, sxe = 0;
  const int n = 100000;
  for (int k = 0; k < n; ++k) {
    const double x0 = mu + std::sqrt(var) * rng.normal(), e = rng.normal();
    const double xt = std::sqrt(ab) * x0 + std::sqrt(1 - ab) * e;
    sx += xt, se += e, sxx += xt * xt, sxe += xt * e;
  }
  const double slope = (sxe - sx * se / n) / (sxx - sx * sx / n), icpt = se / n - slope * sx / n;
  for (double probe : {-1.0, 0.5, 1.5}) {
    const double mc = icpt + slope * probe, exact = oracle_eps(o, Tensor<double>({1}, probe), t, s)[0];
    EXPECT_NEAR(mc, exact, 0.01 * std::abs(exact)) << "probe " << probe;
  }
}

TEST(Training, GradientMatchesCentralDifferences) {
  auto m = small_model<double>(11);
  Rng rng(11);
  for (auto& v : m.params().value("gate.weight").data()) v = 0.3 * rng.normal();
  DenoiserBatch<double> b;
  for (int k = 0; k < 4; ++k) {
    b.x0.push_back(esm::testing::randn<double>(rng, 4));
    b.noise.push_back(esm::testing::randn<double>(rng, 4));
    b.t.push_back(rng.uniform_int(1, 1000));
    b.cond.push_back(k % 2 ? Condition::none() : Condition::label(k / 2));
  }
  ParamStore<double> g = m.params();
  g.zero_grad();
  denoiser_loss_and_grad(m, b, default_schedule(), &g);
  auto f = [&] { return denoiser_loss_and_grad<double>(m, b, default_schedule(), nullptr); };
  EXPECT_LT(vec_rel_err(flat_grads(g), fd_gradient(m.params(), f, 1e-5)), 1e-4);
}

TEST(Training, ZeroStepsLeaveModel) {
  auto m = small_model<float>(12, 8, 4);
  Rng rng(12);
  const auto ds = make_shape_dataset<float>(8, 4, rng);
  const auto before = m.params().value_hash();
  TrainConfig cfg;
  cfg.steps = 0;
  EXPECT_TRUE(train_denoiser(m, ds, default_schedule(), cfg, rng).losses.empty());
  EXPECT_EQ(m.params().value_hash(), before);
}

TEST(Training, ConstantImageIsEasyToFit) {
  Rng rng(13);
  DenoiserModel<float> m(DenoiserSpec{8, 1, 64, 2, 16}, rng);
  Dataset<float> ds;
  ds.side = 8;
  ds.num_classes = 1;
  ds.class_names = {"const"};
  ds.images.push_back(to_latent(Tensor<float>({8, 8}, 0.8f)));
  ds.labels.push_back(0);
  TrainConfig cfg;
  cfg.steps = 2000;
  cfg.batch = 32;
  const auto res = train_denoiser(m, ds, default_schedule(), cfg, rng);
  const auto sm = smoothed(res.losses, 50);
  EXPECT_LT(sm.back(), 0.1 * sm.front()) << sm.front() << " -> " << sm.back();
}

TEST(Training, SeededRunsAreBitIdentical) {
  auto run = [] {
    Rng init(14), data_rng(15), train_rng(16);
    DenoiserModel<float> m(DenoiserSpec{8, 4, 16, 2, 8}, init);
    const auto ds = make_shape_dataset<float>(8, 4, data_rng);
    TrainConfig cfg;
    cfg.steps = 20;
    cfg.batch = 8;
    train_denoiser(m, ds, default_schedule(), cfg, train_rng);
    return m.params().value_hash();
  };
  EXPECT_EQ(run(), run());
}

TEST(Training, MismatchedSideRejected) {
  auto m = small_model<float>(17, 4, 4);
  Rng rng(17);
  const auto ds = make_shape_dataset<float>(8, 2, rng);
  EXPECT_THROW(train_denoiser(m, ds, default_schedule(), TrainConfig{}, rng), ContractViolation);
}

TEST(Dataset, LatentMappingRoundTrips) {
  Rng rng(18);
  const auto px = rng.uniform_tensor<double>({4, 4}, 0.0, 1.0);
  EXPECT_LT(max_abs_diff(from_latent(to_latent(px)), px), 1e-15);
  EXPECT_EQ(to_latent(Tensor<double>({1}, 0.0))[0], -1.0);
}

TEST(Dataset, ShapeClassesAreDistinct) {
  Rng rng(19);
  const auto ds = make_shape_dataset<float>(32, 8, rng);
  ASSERT_EQ(ds.num_classes, 4);
  EXPECT_EQ(ds.class_index("disk"), 0);
  for (int a = 0; a < 4; ++a)
    for (int b = a + 1; b < 4; ++b)
      EXPECT_GT(mean_squared_diff(class_mean_pixels(ds, a), class_mean_pixels(ds, b)), 1e-3);
}
