#include <gtest/gtest.h>

#include <cmath>

#include "pdae/errors.hpp"
#include "pdae/training.hpp"

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

EncoderSpec tiny_encoder() {
    EncoderSpec s;
    s.image_size = 4;
    s.base_channels = 8;
    s.channel_multipliers = {1, 2};
    s.groupnorm_groups = 4;
    s.z_dim = 4;
    return s;
}

Dataset tiny_data() {
    Rng rng(1);
    MixtureSpec m;
    m.points = 8;
    m.classes = 2;
    m.image_size = 4;
    return make_synthetic_mixture(m, rng);
}

TrainConfig tiny_config() {
    TrainConfig c;
    c.batch_size = 8;
    c.total_images = 48;
    c.learning_rate = 1e-3;
    c.ema_decay = 0.9;
    c.log_every = 2;
    c.seed = 7;
    return c;
}

}  // namespace

TEST(Ema, Recurrence) {
    const auto raw = torch::tensor({1.0, 2.0}, torch::kFloat64);
    auto ema = torch::zeros({2}, torch::kFloat64);
    for (int k = 1; k <= 5; ++k) {
        ema_update({raw}, {ema}, 0.9);
        // closed form after k updates from zero: (1 - d^k) raw
        EXPECT_TRUE(torch::allclose(ema, (1.0 - std::pow(0.9, k)) * raw, 0.0, 1e-15));
    }
    EXPECT_THROW(ema_update({raw}, {}, 0.9), ValidationError);
    EXPECT_THROW(ema_update({raw}, {torch::zeros({3}, torch::kFloat64)}, 0.9), ValidationError);
}

TEST(Pretrain, DeterministicFromSeed) {
    const auto data = tiny_data();
    const auto s = make_linear_schedule(100);
    const auto a = pretrain_ddpm(data, tiny_eps(), s, tiny_config());
    const auto b = pretrain_ddpm(data, tiny_eps(), s, tiny_config());
    EXPECT_EQ(parameter_checksum(*a.model), parameter_checksum(*b.model));
    EXPECT_EQ(parameter_checksum(*a.ema), parameter_checksum(*b.ema));
    EXPECT_NE(parameter_checksum(*a.model), parameter_checksum(*a.ema));
    ASSERT_EQ(a.log.size(), 3u);
    EXPECT_EQ(a.log.back().images, 48);
    auto cfg = tiny_config();
    cfg.seed = 8;
    EXPECT_NE(parameter_checksum(*pretrain_ddpm(data, tiny_eps(), s, cfg).model), parameter_checksum(*a.model));
}

TEST(Pretrain, RejectsMismatchedData) {
    auto spec = tiny_eps();
    spec.image_size = 8;
    EXPECT_THROW(pretrain_ddpm(tiny_data(), spec, make_linear_schedule(100), tiny_config()), ConfigError);
    auto cfg = tiny_config();
    cfg.batch_size = 0;
    EXPECT_THROW(cfg.validate(), ValidationError);
}

TEST(TrainPdae, KeepsPretrainedFrozenAndIsDeterministic) {
    const auto data = tiny_data();
    const auto s = make_linear_schedule(100);
    auto pre = pretrain_ddpm(data, tiny_eps(), s, tiny_config());
    const uint32_t frozen = parameter_checksum(*pre.ema);
    GradientEstimatorSpec gs;
    gs.z_dim = 4;
    const auto a = train_pdae(data, pre.ema, tiny_encoder(), gs, s, tiny_config());
    EXPECT_EQ(parameter_checksum(*pre.ema), frozen);
    EXPECT_EQ(a.frozen_checksum, frozen);
    const auto b = train_pdae(data, pre.ema, tiny_encoder(), gs, s, tiny_config());
    EXPECT_EQ(parameter_checksum(*a.estimator), parameter_checksum(*b.estimator));
    EXPECT_EQ(parameter_checksum(*a.encoder), parameter_checksum(*b.encoder));
}

TEST(TrainPdae, LabelHeadBuildsNoEncoder) {
    const auto data = tiny_data();
    const auto s = make_linear_schedule(100);
    auto pre = pretrain_ddpm(data, tiny_eps(), s, tiny_config());
    GradientEstimatorSpec gs;
    gs.num_classes = 2;
    const auto r = train_pdae(data, pre.ema, tiny_encoder(), gs, s, tiny_config());
    EXPECT_TRUE(r.encoder.is_empty());
    EXPECT_FALSE(r.estimator.is_empty());
}

TEST(EvalDraws, Reproducible) {
    const auto a = make_eval_draws(10, {1, 4, 4}, 100, 32, 3);
    const auto b = make_eval_draws(10, {1, 4, 4}, 100, 32, 3);
    EXPECT_TRUE(torch::equal(a.eps, b.eps));
    EXPECT_TRUE(torch::equal(a.t, b.t));
    EXPECT_GE(a.t.min().item<int64_t>(), 1);
    EXPECT_LE(a.t.max().item<int64_t>(), 100);
}

TEST(LatentStats, NormalizeAndFloor) {
    const auto codes = torch::tensor({{1.0, 5.0}, {3.0, 5.0}}, torch::kFloat64);
    const auto st = compute_latent_stats(codes, 1e-6);
    EXPECT_EQ(st.degenerate_dims, 1);
    EXPECT_TRUE(torch::allclose(st.denormalize(st.normalize(codes)), codes, 0.0, 1e-12));
    EXPECT_TRUE(torch::allclose(st.normalize(codes).select(1, 1), torch::zeros({2}, torch::kFloat64)));
}

TEST(Classifier, OversampledBatchIsHalfPositive) {
    auto labels = torch::zeros({100}, torch::kInt64);
    labels.narrow(0, 0, 3).fill_(1);
    Rng rng(4);
    const auto idx = oversampled_batch(labels, 1, 64, rng);
    EXPECT_EQ(labels.index_select(0, idx).eq(1).sum().item<int64_t>(), 32);
    EXPECT_THROW(oversampled_batch(torch::zeros({5}, torch::kInt64), 1, 8, rng), ValidationError);
}

TEST(Classifier, SeparatesLinearData) {
    Rng rng(9);
    const auto z = rng.normal({400, 3}, torch::kFloat64);
    const auto y = (z.select(1, 0) + 0.5 * z.select(1, 2) > 0).to(torch::kInt64);
    ClassifierConfig cfg;
    cfg.steps = 400;
    const auto clf = train_latent_classifier(z, y, cfg);
    EXPECT_GT(clf.predict(z).eq(y).to(torch::kFloat64).mean().item<double>(), 0.95);
    const auto d = clf.direction(1, 0);
    EXPECT_NEAR(d.norm().item<double>(), 1.0, 1e-12);
    EXPECT_GT(d[0].item<double>(), 0.0);
    const auto p = clf.probabilities(z);
    EXPECT_TRUE(torch::allclose(p.sum(1), torch::ones({400}, torch::kFloat64)));
    EXPECT_THROW(train_latent_classifier(z, torch::zeros({400}, torch::kInt64), cfg), ValidationError);
}

TEST(Classifier, OversamplingRecoversRarePositives) {
    Rng rng(10);
    const auto z = rng.normal({500, 2}, torch::kFloat64);
    const auto y = (z.select(1, 0) > 1.8).to(torch::kInt64);  // a few percent positives
    ClassifierConfig cfg;
    cfg.steps = 400;
    cfg.oversample_positive = true;
    const auto clf = train_latent_classifier(z, y, cfg);
    const auto pos = y.eq(1);
    const double recall = clf.predict(z).masked_select(pos).eq(1).to(torch::kFloat64).mean().item<double>();
    EXPECT_GT(recall, 0.9);
}
