#include "test_util.hpp"

using namespace esm;
using esm::testing::default_schedule;

TEST(Schedule, FirstCumulativeProduct) { EXPECT_NEAR(default_schedule().alpha_bar(1), 0.9999, 1e-15); }

TEST(Schedule, LastCumulativeProductMatchesLongDouble) {
  long double prod = 1.0L;
  for (int t = 1; t <= 1000; ++t) prod *= 1.0L - (1e-4L + (2e-2L - 1e-4L) * (t - 1) / 999.0L);
  EXPECT_LT(std::abs((long double)default_schedule().alpha_bar(1000) - prod) / prod, 1e-6L);
}

TEST(Schedule, TwoStepProduct) { EXPECT_NEAR(build_schedule(2, 0.1, 0.2).alpha_bar(2), 0.72, 1e-15); }

TEST(Schedule, AlphaBarZeroIsOne) { EXPECT_EQ(default_schedule().alpha_bar(0), 1.0); }

TEST(Schedule, RejectsBadParameters) {
  EXPECT_ANY_THROW(build_schedule(0));
  EXPECT_ANY_THROW(build_schedule(10, 0.0, 0.1));
  EXPECT_ANY_THROW(build_schedule(10, 0.2, 1.0));
  EXPECT_ANY_THROW(default_schedule().alpha_bar(1001));
}

class ScheduleFamily : public ::testing::TestWithParam<std::tuple<int, double, double>> {};

TEST_P(ScheduleFamily, MonotoneAndSigmaIdentity) {
  const auto [steps, b0, b1] = GetParam();
  const auto s = build_schedule(steps, b0, b1);
  for (int t = 1; t <= steps; ++t) {
    ASSERT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
    ASSERT_GT(s.alpha_bar(t), 0.0);
    const double expect = (1 - s.alpha(t)) * (1 - s.alpha_bar(t - 1)) / (1 - s.alpha_bar(t));
    ASSERT_NEAR(s.sigma_ddpm_sq(t), expect, 1e-14);
  }
}

INSTANTIATE_TEST_SUITE_P(Grids, ScheduleFamily,
                         ::testing::Values(std::make_tuple(1000, 1e-4, 2e-2), std::make_tuple(2, 0.1, 0.2),
                                           std::make_tuple(50, 1e-3, 0.3), std::make_tuple(4000, 1e-5, 1e-2)));

TEST(QSample, ZeroNoiseScalesData) {
  Rng rng(1);
  const auto x0 = rng.normal_tensor<double>({8});
  const auto out = q_sample(x0, 300, Tensor<double>({8}), default_schedule());
  EXPECT_LT(max_abs_diff(out, std::sqrt(default_schedule().alpha_bar(300)) * x0), 1e-15);
}

TEST(QSample, ZeroDataScalesNoise) {
  Rng rng(2);
  const auto e = rng.normal_tensor<double>({8});
  const auto out = q_sample(Tensor<double>({8}), 300, e, default_schedule());
  EXPECT_LT(max_abs_diff(out, std::sqrt(1 - default_schedule().alpha_bar(300)) * e), 1e-15);
}

TEST(QSample, EmpiricalVarianceWithinFivePercent) {
  Rng rng(3);
  for (int t : {10, 250, 900}) {
    double sum = 0, sq = 0;
    const int n = 10000;
    for (int k = 0; k < n; ++k) {
      const double v = q_sample(Tensor<double>({1}, -0.4), t, rng.normal_tensor<double>({1}), default_schedule())[0];
      sum += v;
      sq += v * v;
    }
    const double var = (sq - sum * sum / n) / (n - 1);
    EXPECT_NEAR(var / (1 - default_schedule().alpha_bar(t)), 1.0, 0.05) << "t=" << t;
  }
}

TEST(Ddim, ZeroEpsRescales) {
  Rng rng(4);
  const auto& s = default_schedule();
  const auto x = rng.normal_tensor<double>({6});
  const Tensor<double> z({6});
  EXPECT_LT(max_abs_diff(ddim_generation_step(x, z, 700, 300, s), std::sqrt(s.alpha_bar(300) / s.alpha_bar(700)) * x),
            1e-14);
  EXPECT_LT(max_abs_diff(ddim_inversion_transition(x, z, 300, 700, s),
                         std::sqrt(s.alpha_bar(700) / s.alpha_bar(300)) * x),
            1e-14);
}

TEST(Ddim, EqualTimestepsForbidden) {
  const Tensor<double> x({2});
  EXPECT_THROW(ddim_generation_step(x, x, 5, 5, default_schedule()), ContractViolation);
  EXPECT_THROW(ddim_inversion_transition(x, x, 5, 5, default_schedule()), ContractViolation);
  EXPECT_THROW(ddim_inversion_transition(x, x, 6, 5, default_schedule()), ContractViolation);
}

TEST(Ddim, OneStepWithTrueNoiseMatchesQSample) {
  Rng rng(5);
  const auto& s = default_schedule();
  for (int t : {2, 100, 1000}) {
    const auto x0 = rng.normal_tensor<double>({5}), e = rng.normal_tensor<double>({5});
    EXPECT_LT(rel_err(ddim_generation_step(q_sample(x0, t, e, s), e, t, t - 1, s), q_sample(x0, t - 1, e, s)), 1e-12);
  }
}

TEST(Ddim, InversionFromZeroIsQSample) {
  Rng rng(6);
  const auto x = rng.normal_tensor<double>({5}), e = rng.normal_tensor<double>({5});
  EXPECT_LT(max_abs_diff(ddim_inversion_transition(x, e, 0, 420, default_schedule()),
                         q_sample(x, 420, e, default_schedule())),
            1e-14);
}

TEST(Ddim, GenerationUndoesInversionForFixedEps) {
  Rng rng(7);
  const auto& s = default_schedule();
  for (int k = 0; k < 500; ++k) {
    const int t = rng.uniform_int(1, 1000), from = rng.uniform_int(0, t - 1);
    const auto x = rng.normal_tensor<double>({4}), e = rng.normal_tensor<double>({4});
    ASSERT_LT(rel_err(ddim_generation_step(ddim_inversion_transition(x, e, from, t, s), e, t, from, s), x), 1e-10)
        << "s=" << from << " t=" << t;
  }
}

TEST(Ddim, FloatRoundTripWithinSinglePrecision) {
  Rng rng(8);
  const auto& s = default_schedule();
  const auto x = rng.normal_tensor<float>({64}), e = rng.normal_tensor<float>({64});
  EXPECT_LT(rel_err(ddim_generation_step(ddim_inversion_transition(x, e, 100, 900, s), e, 900, 100, s), x), 1e-5);
}
