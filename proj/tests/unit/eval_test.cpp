#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "pdae/errors.hpp"
#include "pdae/eval.hpp"

using namespace pdae;

namespace {

EpsNetSpec tiny_eps() {
    EpsNetSpec s;
    s.image_size = 4;
    s.base_channels = 8;
    s.channel_multipliers = {1, 2};
    s.attention_resolutions = {};
    s.time_embed_dim = 16;
    s.groupnorm_groups = 4;
    return s;
}

ModelBundle tiny_bundle() {
    torch::manual_seed(11);
    ModelBundle b;
    b.schedule = make_linear_schedule(50);
    b.eps = EpsNet(tiny_eps());
    EncoderSpec es;
    es.image_size = 4;
    es.base_channels = 8;
    es.channel_multipliers = {1, 2};
    es.groupnorm_groups = 4;
    es.z_dim = 3;
    b.encoder = Encoder(es);
    GradientEstimatorSpec gs;
    gs.z_dim = 3;
    b.estimator = GradientEstimator(b.eps, gs);
    return b;
}

Dataset tiny_data() {
    Rng rng(12);
    MixtureSpec m;
    m.points = 6;
    m.classes = 2;
    m.image_size = 4;
    return make_synthetic_mixture(m, rng);
}

}  // namespace

TEST(Ssim, IdenticalImagesScoreOne) {
    Rng rng(1);
    const auto a = rng.normal({3, 1, 8, 8}).clamp(-1, 1);
    const auto v = ssim_per_image(a, a);
    EXPECT_TRUE(torch::allclose(v, torch::ones({3}, torch::kFloat64), 0.0, 1e-9));
    const auto m = recon_metrics(a, a);
    EXPECT_DOUBLE_EQ(m.mse, 0.0);
    EXPECT_NEAR(m.ssim, 1.0, 1e-9);
}

TEST(Ssim, NegatedImageScoresBelowZero) {
    Rng rng(2);
    const auto a = rng.normal({2, 1, 8, 8}).clamp(-1, 1);
    EXPECT_LT(ssim_per_image(a, -a).max().item<double>(), 0.0);
}

TEST(Ssim, HandComputedTwoByTwo) {
    // A 2x2 image leaves a single window: the truncated Gaussian over 2x2 is uniform.
    const auto a = torch::tensor({-1.0f, 0.0f, 0.0f, 1.0f}).view({1, 1, 2, 2});
    const auto b = torch::tensor({-1.0f, -1.0f, 1.0f, 1.0f}).view({1, 1, 2, 2});
    const std::vector<double> x{0.0, 0.5, 0.5, 1.0}, y{0.0, 0.0, 1.0, 1.0};
    double mx = 0, my = 0;
    for (int i = 0; i < 4; ++i) {
        mx += x[i] / 4;
        my += y[i] / 4;
    }
    double vx = 0, vy = 0, cxy = 0;
    for (int i = 0; i < 4; ++i) {
        vx += (x[i] - mx) * (x[i] - mx) / 4;
        vy += (y[i] - my) * (y[i] - my) / 4;
        cxy += (x[i] - mx) * (y[i] - my) / 4;
    }
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    const double expected = (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    EXPECT_NEAR(ssim_per_image(a, b)[0].item<double>(), expected, 1e-6);
    // MSE on the [0, 1] scale
    EXPECT_NEAR(recon_metrics(a, b).mse, (0.25 + 0.25) / 4, 1e-7);
}

TEST(Ssim, ShapeMismatch) {
    EXPECT_THROW(ssim_per_image(torch::zeros({1, 1, 4, 4}), torch::zeros({1, 1, 4, 5})), ValidationError);
}

TEST(GapCurve, Bins) {
    EXPECT_EQ(default_gap_stride(1000), 10);
    EXPECT_EQ(default_gap_stride(50), 1);
    const auto bins = gap_bins(1000, 10);
    EXPECT_EQ(bins.size(), 100u);
    EXPECT_EQ(bins.front(), 10);
    EXPECT_EQ(bins.back(), 1000);
}

TEST(GapCurve, IndependentOfBatching) {
    const auto b = tiny_bundle();
    const auto data = tiny_data();
    const auto a = measure_gap_curve(b, data, 20, 10, 5, 256);
    const auto c = measure_gap_curve(b, data, 20, 10, 5, 7);
    ASSERT_EQ(a.size(), 5u);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_NEAR(a.gap_pre[i], c.gap_pre[i], 1e-6 * std::max(1.0, a.gap_pre[i]));
        EXPECT_NEAR(a.gap_shift[i], c.gap_shift[i], 1e-6 * std::max(1.0, a.gap_shift[i]));
        EXPECT_GE(a.gap_pre[i], 0.0);
    }
    std::ostringstream out;
    write_gap_csv(out, a);
    EXPECT_EQ(out.str().substr(0, 20), "t,gap_pre,gap_shift\n");
}

TEST(OneStep, GridShapes) {
    const auto b = tiny_bundle();
    const auto data = tiny_data();
    const auto g = one_step_grid(b, data.images.narrow(0, 0, 2), {}, {5, 25, 50}, 3);
    EXPECT_EQ(g.pretrained.sizes(), (std::vector<int64_t>{2, 3, 1, 4, 4}));
    EXPECT_EQ(g.mse_shifted.size(), 3u);
    EXPECT_EQ(g.tiles().size(0), 12);
}

TEST(W2, KnownValues) {
    const auto a = torch::tensor({{0.0, 0.0}, {1.0, 0.0}}, torch::kFloat64);
    const auto b = torch::tensor({{1.0, 1.0}, {0.0, 1.0}}, torch::kFloat64);
    // the optimal pairing is (0,0)-(0,1) and (1,0)-(1,1)
    EXPECT_NEAR(empirical_w2(a, b), 1.0, 1e-12);
    EXPECT_NEAR(empirical_w2(a, a.flip(0)), 0.0, 1e-12);
    Rng rng(4);
    const auto x = rng.normal({30, 3}, torch::kFloat64);
    EXPECT_NEAR(empirical_w2(x, x + 0.5), 0.75, 1e-9);
}

TEST(BayesLoss, ConditionalNotAboveUnconditional) {
    Rng rng(5);
    MixtureSpec m;
    m.points = 6;
    m.classes = 3;
    m.image_size = 4;
    const auto data = make_synthetic_mixture(m, rng);
    const auto oracle = MixtureOracle(data.images.to(torch::kFloat64), data.labels, make_linear_schedule(100));
    const auto s = make_linear_schedule(100);
    const auto draws = make_eval_draws(data.size(), {1, 4, 4}, s.steps(), 2000, 6);
    const double u = bayes_eps_loss(oracle, data, s, draws, false);
    const double c = bayes_eps_loss(oracle, data, s, draws, true);
    EXPECT_LE(c, u + 1e-12);
    EXPECT_GT(u, 0.0);
}
