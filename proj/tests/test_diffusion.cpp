#include <gtest/gtest.h>

#include <cmath>

#include "grad_check.hpp"
#include "lapig/diffusion.hpp"

using namespace lapig;
using lapig::testing::gradient_rel_error;

namespace {

// conv(1->4) + time bias -> silu -> conv(4->1): 97 parameters.
class TinyConvDenoiser final : public DenoiserNetwork<double> {
 public:
  explicit TinyConvDenoiser(std::uint64_t seed) {
    Rng rng(seed);
    c1_ = Conv2d<double>(ps_, "c1", 1, 4, 3, 1, 1, rng);
    t_ = Linear<double>(ps_, "t", 4, 4, rng);
    c2_ = Conv2d<double>(ps_, "c2", 4, 1, 3, 1, 1, rng);
  }
  ConditioningMode conditioning_mode() const override { return ConditioningMode::none; }
  ParameterSet<double>& parameters() override { return ps_; }
  const ParameterSet<double>& parameters() const override { return ps_; }
  Var<double> predict(const Var<double>& x, std::size_t t, const Conditioning<double>&) const override {
    Var<double> h = add_channel(c1_(x), t_(constant(timestep_embedding<double>(t, 4))));
    return c2_(silu(h));
  }

 private:
  ParameterSet<double> ps_;
  Conv2d<double> c1_, c2_;
  Linear<double> t_;
};

// Returns a fixed tensor regardless of input.
class StubDenoiser final : public DenoiserNetwork<double> {
 public:
  explicit StubDenoiser(Tensor<double> out) : out_(std::move(out)) {}
  ConditioningMode conditioning_mode() const override { return ConditioningMode::none; }
  ParameterSet<double>& parameters() override { return ps_; }
  const ParameterSet<double>& parameters() const override { return ps_; }
  Var<double> predict(const Var<double>& x, std::size_t, const Conditioning<double>&) const override {
    return out_.empty() ? constant(Tensor<double>(x.shape())) : constant(out_);
  }

 private:
  Tensor<double> out_;
  ParameterSet<double> ps_;
};

std::vector<Var<double>> leaves(ParameterSet<double>& ps) {
  std::vector<Var<double>> out;
  for (auto& [_, v] : ps.items()) out.push_back(v);
  return out;
}

}  // namespace

TEST(NoiseSchedule, SingleStep) {
  auto s = make_noise_schedule(1, 0.5, 0.5);
  ASSERT_EQ(s.alpha_bars().size(), 1u);
  EXPECT_DOUBLE_EQ(s.alpha_bar(1), 0.5);
}

TEST(NoiseSchedule, TwoSteps) {
  auto s = make_noise_schedule(2, 0.5, 0.5);
  EXPECT_DOUBLE_EQ(s.alpha_bar(1), 0.5);
  EXPECT_DOUBLE_EQ(s.alpha_bar(2), 0.25);
}

TEST(NoiseSchedule, MatchesExtendedPrecisionProduct) {
  auto s = make_noise_schedule(1000, 1e-4, 0.02);
  long double prod = 1.0L;
  for (int t = 1; t <= 1000; ++t) {
    const long double beta = 1e-4L + (0.02L - 1e-4L) * static_cast<long double>(t - 1) / 999.0L;
    prod *= 1.0L - beta;
  }
  const double rel = static_cast<double>(std::fabs((static_cast<long double>(s.alpha_bar(1000)) - prod) / prod));
  EXPECT_LT(rel, 1e-10);
  EXPECT_DOUBLE_EQ(s.beta(1), 1e-4);
  EXPECT_DOUBLE_EQ(s.beta(1000), 0.02);
}

TEST(NoiseSchedule, Invariants) {
  auto s = make_noise_schedule(50, 1e-3, 0.3);
  for (std::size_t t = 1; t <= 50; ++t) {
    EXPECT_GT(s.alpha_bar(t), 0.0);
    EXPECT_LE(s.alpha_bar(t), 1.0);
    EXPECT_DOUBLE_EQ(s.alpha(t), 1.0 - s.beta(t));
    if (t > 1) {
      EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
      EXPECT_EQ(s.alpha_bar(t), s.alpha_bar(t - 1) * (1.0 - s.beta(t)));
    }
  }
}

TEST(NoiseSchedule, RejectsBadArguments) {
  EXPECT_THROW(make_noise_schedule(0, 1e-4, 0.02), std::invalid_argument);
  EXPECT_THROW(make_noise_schedule(10, 0.0, 0.02), std::invalid_argument);
  EXPECT_THROW(make_noise_schedule(10, 0.1, 0.05), std::invalid_argument);
  EXPECT_THROW(make_noise_schedule(10, 0.1, 1.0), std::invalid_argument);
  auto s = make_noise_schedule(10, 1e-3, 0.1);
  EXPECT_THROW(s.alpha_bar(0), std::out_of_range);
  EXPECT_THROW(s.alpha_bar(11), std::out_of_range);
}

TEST(ForwardDiffuse, ZeroNoiseAndZeroSignal) {
  auto s = make_noise_schedule(20, 1e-3, 0.2);
  Rng rng(7);
  auto z0 = randn<double>({2, 3, 3}, rng), eps = randn<double>({2, 3, 3}, rng);
  Tensor<double> zeros({2, 3, 3});
  const std::size_t t = 13;
  auto a = forward_diffuse(z0, t, zeros, s);
  auto b = forward_diffuse(zeros, t, eps, s);
  for (std::size_t i = 0; i < z0.size(); ++i) {
    EXPECT_DOUBLE_EQ(a[i], std::sqrt(s.alpha_bar(t)) * z0[i]);
    EXPECT_DOUBLE_EQ(b[i], std::sqrt(1 - s.alpha_bar(t)) * eps[i]);
  }
}

TEST(ForwardDiffuse, ScalarArithmetic) {
  // Two steps of beta 0.5 give abar_2 = 0.25.
  auto s = make_noise_schedule(2, 0.5, 0.5);
  auto out = forward_diffuse(Tensor<double>({1}, 2.0), 2, Tensor<double>({1}, 1.0), s);
  EXPECT_NEAR(out[0], 1.8660254037844386, 1e-15);
}

TEST(ForwardDiffuse, RejectsMismatchAndBadTimestep) {
  auto s = make_noise_schedule(5, 1e-3, 0.1);
  EXPECT_THROW(forward_diffuse(Tensor<double>({2}), 1, Tensor<double>({3}), s), ShapeError);
  EXPECT_THROW(forward_diffuse(Tensor<double>({2}), 6, Tensor<double>({2}), s), std::out_of_range);
}

TEST(ForwardDiffuse, LinearInSignalAndNoise) {
  auto s = make_noise_schedule(30, 1e-3, 0.2);
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    auto z1 = randn<double>({3, 4, 4}, rng), z2 = randn<double>({3, 4, 4}, rng);
    auto e1 = randn<double>({3, 4, 4}, rng), e2 = randn<double>({3, 4, 4}, rng);
    const double a = 1.7, b = -0.6;
    const std::size_t t = 1 + trial;
    auto lhs = forward_diffuse(z1 * a + z2 * b, t, e1 * a + e2 * b, s);
    auto rhs = forward_diffuse(z1, t, e1, s) * a + forward_diffuse(z2, t, e2, s) * b;
    EXPECT_LT(max_abs_diff(lhs, rhs), 1e-12);
  }
}

TEST(ForwardDiffuse, VarianceLawOverTenThousandDraws) {
  auto s = make_noise_schedule(50, 1e-3, 0.2);
  Rng rng(9);
  const Tensor<double> z0({1}, 0.8);
  const int n = 10000;
  for (std::size_t t : {1u, 10u, 25u, 50u}) {
    double m = 0, m2 = 0;
    for (int i = 0; i < n; ++i) {
      const double v = forward_diffuse(z0, t, randn<double>({1}, rng), s)[0];
      m += v;
      m2 += v * v;
    }
    m /= n;
    const double var = (m2 - n * m * m) / (n - 1);
    const double expect = 1 - s.alpha_bar(t);
    const double sigma = expect * std::sqrt(2.0 / (n - 1));
    EXPECT_NEAR(var, expect, 3 * sigma) << "t=" << t;
  }
}

TEST(DiffusionLoss, PerfectPredictorIsZero) {
  auto s = make_noise_schedule(10, 1e-3, 0.1);
  Rng rng(10);
  auto eps = randn<double>({1, 4, 4}, rng);
  StubDenoiser net(eps);
  EXPECT_EQ(diffusion_loss<double>(net, randn<double>({1, 4, 4}, rng), {}, 4, eps, s).item(), 0.0);
}

TEST(DiffusionLoss, ZeroPredictorGivesMeanSquareOfNoise) {
  auto s = make_noise_schedule(10, 1e-3, 0.1);
  Tensor<double> eps({1, 2, 2}, std::vector<double>{1, -1, 1, -1});
  StubDenoiser net({});
  EXPECT_DOUBLE_EQ(diffusion_loss<double>(net, Tensor<double>({1, 2, 2}), {}, 3, eps, s).item(), 1.0);
}

TEST(DiffusionLoss, NonNegative) {
  auto s = make_noise_schedule(10, 1e-3, 0.1);
  TinyConvDenoiser net(11);
  Rng rng(12);
  for (std::size_t t = 1; t <= 10; ++t)
    EXPECT_GE(diffusion_loss<double>(net, randn<double>({1, 4, 4}, rng), {}, t, randn<double>({1, 4, 4}, rng), s).item(), 0.0);
}

TEST(DiffusionLoss, TinyNetGradientMatchesFiniteDifferences) {
  auto s = make_noise_schedule(10, 1e-3, 0.1);
  TinyConvDenoiser net(13);
  ASSERT_LE(net.parameters().scalar_count(), 200u);
  Rng rng(14);
  auto z0 = randn<double>({1, 4, 4}, rng), eps = randn<double>({1, 4, 4}, rng);
  auto f = [&] { return diffusion_loss<double>(net, z0, {}, 6, eps, s); };
  EXPECT_LT(gradient_rel_error(f, leaves(net.parameters()), 1e-3), 1e-4);
}

TEST(DiffusionLoss, UNetGradientMatchesFiniteDifferencesInAllModes) {
  auto s = make_noise_schedule(10, 1e-3, 0.1);
  Rng rng(15);
  for (auto mode : {ConditioningMode::none, ConditioningMode::cross_attention, ConditioningMode::channel_concat,
                    ConditioningMode::both}) {
    UNetConfig cfg;
    const bool cat = mode == ConditioningMode::channel_concat || mode == ConditioningMode::both;
    const bool ctx = mode == ConditioningMode::cross_attention || mode == ConditioningMode::both;
    cfg.in_channels = cat ? 4 : 2;
    cfg.out_channels = 2;
    cfg.base_channels = 4;
    cfg.channel_mults = {1, 2};
    cfg.attention_levels = {false, true};
    cfg.time_dim = 4;
    cfg.time_hidden = 4;
    cfg.context_dim = ctx ? 3 : 0;
    cfg.attn_dim = 4;
    cfg.groups = 2;
    cfg.mode = mode;
    UNet<double> net(cfg, 16);
    Conditioning<double> cond;
    if (ctx) cond.context = constant(randn<double>({5, 3}, rng));
    if (cat) cond.concat = constant(randn<double>({2, 4, 4}, rng));
    auto z0 = randn<double>({2, 4, 4}, rng), eps = randn<double>({2, 4, 4}, rng);
    auto f = [&] { return diffusion_loss<double>(net, z0, cond, 7, eps, s); };
    EXPECT_LT(gradient_rel_error(f, leaves(net.parameters()), 1e-4), 1e-4) << to_string(mode);
  }
}

TEST(DiffusionLoss, RejectsMismatchedConditioning) {
  auto s = make_noise_schedule(10, 1e-3, 0.1);
  UNetConfig cfg;
  cfg.in_channels = 2;
  cfg.out_channels = 1;
  cfg.base_channels = 4;
  cfg.groups = 2;
  cfg.time_dim = cfg.time_hidden = 4;
  cfg.mode = ConditioningMode::channel_concat;
  UNet<double> net(cfg, 1);
  Tensor<double> z({1, 4, 4});
  EXPECT_THROW(diffusion_loss<double>(net, z, {}, 1, z, s), std::invalid_argument);
  Conditioning<double> wrong_channels{{}, constant(Tensor<double>({3, 4, 4}))};
  EXPECT_THROW(diffusion_loss<double>(net, z, wrong_channels, 1, z, s), ShapeError);
}

TEST(DdpmSample, DeterministicForSeed) {
  auto s = make_noise_schedule(8, 1e-3, 0.2);
  TinyConvDenoiser net(17);
  auto a = ddpm_sample<double>(net, {}, {1, 4, 4}, s, 99);
  auto b = ddpm_sample<double>(net, {}, {1, 4, 4}, s, 99);
  auto c = ddpm_sample<double>(net, {}, {1, 4, 4}, s, 100);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST(DdpmSample, SingleStepClosedForm) {
  // With eps_pred = 0 and T = 1 the only update is x_0 = x_1 / sqrt(alpha_1).
  auto s = make_noise_schedule(1, 0.3, 0.3);
  StubDenoiser net({});
  auto out = ddpm_sample<double>(net, {}, {1, 2, 3}, s, 5);
  Rng rng(5);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], nd(rng) / std::sqrt(0.7), 1e-15);
}

TEST(TimestepEmbedding, ShapeAndRange) {
  auto e = timestep_embedding<double>(17, 128);
  ASSERT_EQ(e.size(), 128u);
  for (double v : e.values()) EXPECT_LE(std::abs(v), 1.0);
  EXPECT_NE(timestep_embedding<double>(3, 8), timestep_embedding<double>(4, 8));
  EXPECT_THROW(timestep_embedding<double>(1, 7), std::invalid_argument);
}
