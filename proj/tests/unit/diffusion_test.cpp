#include <gtest/gtest.h>

#include <cmath>

#include "pdae/diffusion.hpp"
#include "pdae/errors.hpp"
#include "pdae/oracle.hpp"
#include "pdae/rng.hpp"

using namespace pdae;

namespace {

const NoiseSchedule& linear1000() {
    static const NoiseSchedule s = make_linear_schedule(1000);
    return s;
}

torch::Tensor randn(Rng& rng, std::initializer_list<int64_t> shape) {
    return rng.normal(shape, torch::kFloat64);
}

double max_rel_diff(const torch::Tensor& a, const torch::Tensor& b) {
    return ((a - b).abs() / b.abs().clamp_min(1.0)).max().item<double>();
}

}  // namespace

TEST(QSample, NoiselessCase) {
    Rng rng(1);
    const auto x0 = randn(rng, {3, 1, 4, 4});
    const auto& s = linear1000();
    const auto out = q_sample(x0, 250, torch::zeros_like(x0), s);
    EXPECT_TRUE(torch::allclose(out, std::sqrt(s.alpha_bar(250)) * x0, 0.0, 1e-15));
}

TEST(QSample, PureNoiseLimit) {
    Rng rng(2);
    const auto s = make_constant_schedule(200, 0.5);  // alpha_bar_T = 2^-200
    const auto x0 = randn(rng, {2, 1, 3, 3});
    const auto eps = randn(rng, {2, 1, 3, 3});
    EXPECT_LT((q_sample(x0, 200, eps, s) - eps).abs().max().item<double>(), 1e-12);
}

TEST(QSample, MonteCarloMoments) {
    Rng rng(3);
    const auto& s = linear1000();
    const int t = 400;
    const int64_t n = 10000;
    const auto x0 = torch::full({n, 1}, 0.7, torch::kFloat64);
    const auto xt = q_sample(x0, t, randn(rng, {n, 1}), s);
    const double mean = xt.mean().item<double>();
    const double var = xt.var().item<double>();
    const double expected_mean = std::sqrt(s.alpha_bar(t)) * 0.7;
    const double expected_var = 1.0 - s.alpha_bar(t);
    EXPECT_NEAR(mean, expected_mean, 3.0 * std::sqrt(expected_var / n));
    // standard error of a Gaussian sample variance: var * sqrt(2 / (n - 1))
    EXPECT_NEAR(var, expected_var, 3.0 * expected_var * std::sqrt(2.0 / (n - 1)));
}

TEST(QSample, PerSampleTimestepsMatchScalar) {
    Rng rng(4);
    const auto& s = linear1000();
    const auto x0 = randn(rng, {4, 2, 3, 3});
    const auto eps = randn(rng, {4, 2, 3, 3});
    const auto t = torch::tensor({1, 10, 500, 1000}, torch::kLong);
    const auto batched = q_sample(x0, t, eps, s);
    for (int i = 0; i < 4; ++i) {
        const auto single = q_sample(x0.slice(0, i, i + 1), static_cast<int>(t[i].item<int64_t>()),
                                     eps.slice(0, i, i + 1), s);
        EXPECT_TRUE(torch::allclose(batched.slice(0, i, i + 1), single, 0.0, 1e-15));
    }
    EXPECT_THROW(q_sample(x0, t, eps.slice(0, 0, 3), s), ValidationError);
    EXPECT_THROW(q_sample(x0, torch::tensor({0, 1, 2, 3}, torch::kLong), eps, s), ValidationError);
}

TEST(TruePosteriorMean, FirstStepReturnsX0) {
    Rng rng(5);
    const auto x0 = randn(rng, {2, 1, 4, 4});
    const auto xt = randn(rng, {2, 1, 4, 4});
    EXPECT_TRUE(torch::equal(true_posterior_mean(x0, xt, 1, linear1000()), x0));
}

TEST(TruePosteriorMean, VanishingBetaReturnsXt) {
    Rng rng(6);
    const auto s = make_schedule_from_betas({0.5, 1e-13}, ScheduleKind::Linear, 0.5, 1e-13);
    const auto x0 = randn(rng, {2, 1, 4, 4});
    const auto xt = randn(rng, {2, 1, 4, 4});
    EXPECT_LT((true_posterior_mean(x0, xt, 2, s) - xt).abs().max().item<double>(), 1e-12);
}

TEST(TruePosteriorMean, MatchesNoiseForm) {
    Rng rng(7);
    const auto& s = linear1000();
    for (int t : {2, 17, 300, 999, 1000}) {
        const auto x0 = randn(rng, {3, 1, 5, 5});
        const auto eps = randn(rng, {3, 1, 5, 5});
        const auto xt = q_sample(x0, t, eps, s);
        const auto noise_form =
            (xt - (s.beta(t) / std::sqrt(1.0 - s.alpha_bar(t))) * eps) / std::sqrt(s.alpha(t));
        EXPECT_LT(max_rel_diff(true_posterior_mean(x0, xt, t, s), noise_form), 1e-10) << "t=" << t;
        EXPECT_LT(max_rel_diff(predicted_mean_from_eps(xt, t, eps, s), true_posterior_mean(x0, xt, t, s)),
                  1e-10);
    }
}

TEST(PredictedMean, ZeroNoise) {
    Rng rng(8);
    const auto xt = randn(rng, {2, 1, 3, 3});
    const auto& s = linear1000();
    EXPECT_TRUE(torch::allclose(predicted_mean_from_eps(xt, 40, torch::zeros_like(xt), s),
                                xt / std::sqrt(s.alpha(40)), 0.0, 1e-15));
}

TEST(PredictedMean, ScalarLoopOracle) {
    Rng rng(9);
    const auto& s = linear1000();
    const auto xt = randn(rng, {2, 3, 2, 2});
    const auto eps = randn(rng, {2, 3, 2, 2});
    const auto t = torch::tensor({123, 877}, torch::kLong);
    const auto out = predicted_mean_from_eps(xt, t, eps, s).contiguous();
    const auto* px = xt.contiguous().data_ptr<double>();
    const auto* pe = eps.contiguous().data_ptr<double>();
    const auto* po = out.data_ptr<double>();
    for (int b = 0; b < 2; ++b) {
        const int ti = b == 0 ? 123 : 877;
        for (int k = 0; k < 12; ++k) {
            const int i = b * 12 + k;
            const double expected =
                (px[i] - s.beta(ti) / std::sqrt(1.0 - s.alpha_bar(ti)) * pe[i]) / std::sqrt(1.0 - s.beta(ti));
            EXPECT_NEAR(po[i], expected, 1e-12 * std::max(1.0, std::abs(expected)));
        }
    }
}

TEST(DdpmStep, UnguidedFinalStepIsPredictedMean) {
    Rng rng(10);
    const auto xt = randn(rng, {2, 1, 4, 4});
    const auto eps = randn(rng, {2, 1, 4, 4});
    const auto& s = linear1000();
    const auto out = ddpm_step(xt, 1, eps, {randn(rng, {2, 1, 4, 4}), 0.0}, torch::zeros_like(xt), s);
    EXPECT_TRUE(torch::equal(out, predicted_mean_from_eps(xt, 1, eps, s)));
}

TEST(DdpmStep, GuidanceIsLinear) {
    Rng rng(11);
    const auto xt = randn(rng, {2, 1, 4, 4});
    const auto eps = randn(rng, {2, 1, 4, 4});
    const auto grad = randn(rng, {2, 1, 4, 4});
    const auto noise = randn(rng, {2, 1, 4, 4});
    const auto& s = linear1000();
    const auto guided = ddpm_step(xt, 500, eps, {grad, 1.0}, noise, s);
    const auto plain = ddpm_step(xt, 500, eps, {grad, 0.0}, noise, s);
    EXPECT_TRUE(torch::allclose(guided - plain, s.posterior_var(500) * grad, 0.0, 1e-14));
    EXPECT_TRUE(torch::equal(plain, ddpm_step(xt, 500, eps, GuidanceShift::none(), noise, s)));
}

TEST(DdpmStep, RejectsNoiseAtFirstStep) {
    Rng rng(12);
    const auto xt = randn(rng, {1, 1, 2, 2});
    EXPECT_THROW(ddpm_step(xt, 1, xt, GuidanceShift::none(), torch::ones_like(xt), linear1000()),
                 ValidationError);
}

TEST(DdpmStep, OracleSamplingConvergesToSinglePoint) {
    Rng rng(13);
    const auto& s = linear1000();
    const auto point = torch::linspace(-0.9, 0.9, 16, torch::kFloat64).reshape({1, 1, 4, 4});
    const MixtureOracle oracle(point, std::nullopt, s);
    auto x = randn(rng, {8, 1, 4, 4});
    for (int t = s.steps(); t >= 1; --t) {
        const auto eps_hat = oracle.optimal_eps(x, t);
        const auto noise = t > 1 ? rng.normal_like(x) : torch::zeros_like(x);
        x = ddpm_step(x, t, eps_hat, GuidanceShift::none(), noise, s);
    }
    const double mse = (x - point.expand_as(x)).pow(2).mean().item<double>();
    EXPECT_LT(mse, 1e-2);
}

TEST(DdimStep, DegenerateStrideIsIdentity) {
    Rng rng(14);
    const auto xt = randn(rng, {2, 1, 3, 3});
    EXPECT_TRUE(torch::equal(ddim_step(xt, 300, 300, randn(rng, {2, 1, 3, 3}), 0.0, {}, linear1000()), xt));
}

TEST(DdimStep, StaysOnSinglePointTrajectory) {
    Rng rng(15);
    const auto& s = linear1000();
    const auto point = torch::linspace(-1.0, 1.0, 9, torch::kFloat64).reshape({1, 1, 3, 3});
    const MixtureOracle oracle(point, std::nullopt, s);
    const auto xt = q_sample(point.expand({4, 1, 3, 3}), 700, randn(rng, {4, 1, 3, 3}), s);
    const auto eps_opt = oracle.optimal_eps(xt, 700);
    const auto out = ddim_step(xt, 700, 250, eps_opt, 0.0, {}, s);
    const auto expected = std::sqrt(s.alpha_bar(250)) * point.expand({4, 1, 3, 3}) +
                          std::sqrt(1.0 - s.alpha_bar(250)) * eps_opt;
    EXPECT_LT((out - expected).abs().max().item<double>(), 1e-12);
}

TEST(DdimStep, DeterministicStrides) {
    Rng rng(16);
    const auto& s = linear1000();
    const auto xt = randn(rng, {2, 1, 3, 3});
    const auto eps = randn(rng, {2, 1, 3, 3});
    const auto a = ddim_step(ddim_step(xt, 900, 450, eps, 0.0, {}, s), 450, 0, eps, 0.0, {}, s);
    const auto b = ddim_step(ddim_step(xt.clone(), 900, 450, eps.clone(), 0.0, {}, s), 450, 0, eps.clone(), 0.0, {}, s);
    EXPECT_TRUE(torch::equal(a, b));
}

TEST(DdimStep, ValidatesArguments) {
    Rng rng(17);
    const auto& s = linear1000();
    const auto xt = randn(rng, {1, 1, 2, 2});
    EXPECT_THROW(ddim_step(xt, 10, 20, xt, 0.0, {}, s), ValidationError);
    EXPECT_THROW(ddim_step(xt, 20, 10, xt, -0.1, xt, s), ValidationError);
    EXPECT_THROW(ddim_step(xt, 20, 10, xt, 2.0, xt, s), ValidationError);
    EXPECT_THROW(ddim_step(xt, 20, 10, xt, 0.01, {}, s), ValidationError);
}

TEST(DdimStep, StochasticStridesStayFinite) {
    Rng rng(18);
    const auto& s = linear1000();
    auto x = randn(rng, {4, 1, 3, 3});
    for (int t = s.steps(); t >= 1; --t) {
        const double sigma = ddim_sigma(s, t, t - 1, 1.0);
        EXPECT_NEAR(sigma * sigma, s.posterior_var(t), 1e-12);
        x = ddim_step(x, t, t - 1, rng.normal_like(x), sigma, rng.normal_like(x), s);
        ASSERT_TRUE(torch::isfinite(x).all().item<bool>()) << "t=" << t;
    }
}

TEST(GuidedEps, ZeroGradientAndLinearity) {
    Rng rng(19);
    const auto& s = linear1000();
    const auto eps = randn(rng, {2, 1, 3, 3});
    const auto grad = randn(rng, {2, 1, 3, 3});
    EXPECT_TRUE(torch::equal(guided_eps(eps, 77, {torch::zeros_like(eps), 1.0}, s), eps));
    const auto once = guided_eps(eps, 77, {grad, 1.0}, s) - eps;
    const auto twice = guided_eps(eps, 77, {grad, 2.0}, s) - eps;
    EXPECT_TRUE(torch::allclose(twice, 2.0 * once, 0.0, 1e-14));
    EXPECT_TRUE(torch::allclose(once, -std::sqrt(1.0 - s.alpha_bar(77)) * grad, 1e-13, 1e-15));
}

TEST(GuidedEps, OracleClassGuidanceReachesTargetBasin) {
    Rng rng(20);
    const auto s = make_linear_schedule(1000);
    auto points = torch::stack({torch::full({1, 4, 4}, 0.8, torch::kFloat64),
                                torch::full({1, 4, 4}, -0.8, torch::kFloat64)});
    const MixtureOracle oracle(points, torch::tensor({0, 1}, torch::kLong), s);
    const int runs = 200;
    int hits = 0;
    for (int64_t target : {0, 1}) {
        auto x = randn(rng, {runs / 2, 1, 4, 4});
        for (int t = 1000; t >= 20; t -= 20) {
            const auto eps = guided_eps(oracle.optimal_eps(x, t), t, {oracle.class_gradient(x, t, target), 1.0}, s);
            x = ddim_step(x, t, t - 20, eps, 0.0, {}, s);
        }
        hits += (oracle.nearest_label(x) == target).sum().item<int>();
    }
    EXPECT_GE(hits, static_cast<int>(0.95 * runs));
}

TEST(DdimInvert, MutualInverseForConstantEps) {
    Rng rng(21);
    const auto& s = linear1000();
    const auto xt = randn(rng, {3, 1, 4, 4});
    const auto eps = randn(rng, {3, 1, 4, 4});
    for (auto [lo, hi] : {std::pair{0, 10}, std::pair{10, 400}, std::pair{400, 1000}}) {
        const auto up = ddim_invert_step(xt, lo, hi, eps, s);
        const auto back = ddim_step(up, hi, lo, eps, 0.0, {}, s);
        EXPECT_LT(max_rel_diff(back, xt), 1e-6);
    }
}

TEST(DdimInvert, FromCleanImageIsForwardSample) {
    Rng rng(22);
    const auto& s = linear1000();
    const auto x0 = randn(rng, {2, 1, 4, 4});
    const auto eps = randn(rng, {2, 1, 4, 4});
    EXPECT_TRUE(torch::equal(ddim_invert_step(x0, 0, 321, eps, s), q_sample(x0, 321, eps, s)));
    EXPECT_THROW(ddim_invert_step(x0, 321, 321, eps, s), ValidationError);
    EXPECT_THROW(ddim_invert_step(x0, 400, 321, eps, s), ValidationError);
}

TEST(OneStepX0, InvertsForwardSample) {
    Rng rng(23);
    const auto& s = linear1000();
    const auto x0 = randn(rng, {2, 1, 4, 4});
    const auto eps = randn(rng, {2, 1, 4, 4});
    for (int t : {1, 100, 999}) {
        EXPECT_LT((one_step_x0(q_sample(x0, t, eps, s), t, eps, s) - x0).abs().max().item<double>(), 1e-9);
    }
    const auto xt = randn(rng, {2, 1, 4, 4});
    EXPECT_TRUE(torch::allclose(one_step_x0(xt, 55, torch::zeros_like(xt), s),
                                xt / std::sqrt(s.alpha_bar(55)), 0.0, 1e-14));
}

TEST(OneStepX0, OracleEpsGivesPosteriorMean) {
    Rng rng(24);
    const auto& s = linear1000();
    const auto points = randn(rng, {5, 1, 3, 3}).clamp(-1, 1);
    const MixtureOracle oracle(points, std::nullopt, s);
    const auto xt = randn(rng, {6, 1, 3, 3});
    for (int t : {50, 500, 900}) {
        const auto x0_hat = one_step_x0(xt, t, oracle.optimal_eps(xt, t), s);
        EXPECT_LT((x0_hat - oracle.posterior_x0_mean(xt, t)).abs().max().item<double>(), 1e-10);
    }
}

TEST(SimpleLoss, Values) {
    Rng rng(25);
    const auto eps = randn(rng, {3, 1, 4, 4});
    EXPECT_EQ(simple_loss(eps, eps).item<double>(), 0.0);
    EXPECT_NEAR(simple_loss(eps, eps + 0.3).item<double>(), 0.09, 1e-15);
    const auto other = randn(rng, {3, 1, 4, 4});
    double acc = 0.0;
    const auto* a = eps.contiguous().data_ptr<double>();
    const auto* b = other.contiguous().data_ptr<double>();
    for (int i = 0; i < 48; ++i) {
        acc += (a[i] - b[i]) * (a[i] - b[i]);
    }
    EXPECT_NEAR(simple_loss(eps, other).item<double>(), acc / 48.0, 1e-14);
    EXPECT_THROW(simple_loss(eps, other.slice(0, 0, 2)), ValidationError);
}

TEST(PdaeLoss, ZeroGradientReducesToWeightedSimpleLoss) {
    Rng rng(26);
    const auto& s = linear1000();
    const auto eps = randn(rng, {4, 1, 3, 3});
    const auto eps_hat = randn(rng, {4, 1, 3, 3});
    const double lambda = loss_weight(WeightScheme::pdae(), s, 333);
    EXPECT_NEAR(pdae_loss(eps, eps_hat, torch::zeros_like(eps), 333, s, WeightScheme::pdae()).item<double>(),
                lambda * simple_loss(eps, eps_hat).item<double>(), 1e-14);
    EXPECT_NEAR(pdae_loss(eps, eps_hat, torch::zeros_like(eps), 333, s, WeightScheme::simple()).item<double>(),
                simple_loss(eps, eps_hat).item<double>(), 1e-14);
}

TEST(PdaeLoss, PerfectFillIsZero) {
    Rng rng(27);
    const auto& s = linear1000();
    const auto eps = randn(rng, {4, 1, 3, 3});
    const auto eps_hat = randn(rng, {4, 1, 3, 3});
    for (int t : {2, 250, 1000}) {
        const double coeff = s.beta(t) / (std::sqrt(s.alpha(t)) * std::sqrt(1.0 - s.alpha_bar(t)) * s.posterior_var(t));
        const auto g = coeff * (eps_hat - eps);
        EXPECT_LT(pdae_loss(eps, eps_hat, g, t, s, WeightScheme::pdae()).item<double>(), 1e-20);
    }
}

TEST(PdaeLoss, GapMatchingIdentity) {
    Rng rng(28);
    const auto& s = linear1000();
    for (int trial = 0; trial < 50; ++trial) {
        const int t = static_cast<int>(rng.randint(2, 1001, 1).item<int64_t>());
        const auto x0 = randn(rng, {1, 1, 4, 4});
        const auto eps = randn(rng, {1, 1, 4, 4});
        const auto eps_hat = randn(rng, {1, 1, 4, 4});
        const auto g = randn(rng, {1, 1, 4, 4});
        const auto xt = q_sample(x0, t, eps, s);
        const double weighted = pdae_loss(eps, eps_hat, g, t, s, WeightScheme::pdae()).item<double>();
        const double lambda = loss_weight(WeightScheme::pdae(), s, t);
        const double rescaled = weighted / lambda * (s.beta(t) * s.beta(t) / (s.alpha(t) * (1.0 - s.alpha_bar(t))));
        const auto gap = true_posterior_mean(x0, xt, t, s) - predicted_mean_from_eps(xt, t, eps_hat, s);
        const double direct = (s.posterior_var(t) * g - gap).pow(2).mean().item<double>();
        EXPECT_NEAR(rescaled / direct, 1.0, 1e-8) << "t=" << t;
    }
}

TEST(PdaeLoss, PerSampleTimesteps) {
    Rng rng(29);
    const auto& s = linear1000();
    const auto eps = randn(rng, {3, 1, 2, 2});
    const auto eps_hat = randn(rng, {3, 1, 2, 2});
    const auto g = randn(rng, {3, 1, 2, 2});
    const auto t = torch::tensor({5, 500, 995}, torch::kLong);
    double expected = 0.0;
    for (int i = 0; i < 3; ++i) {
        expected += pdae_loss(eps.slice(0, i, i + 1), eps_hat.slice(0, i, i + 1), g.slice(0, i, i + 1),
                              static_cast<int>(t[i].item<int64_t>()), s, WeightScheme::pdae())
                        .item<double>();
    }
    EXPECT_NEAR(pdae_loss(eps, eps_hat, g, t, s, WeightScheme::pdae()).item<double>(), expected / 3.0, 1e-14);
}
