#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <vector>

#include <torch/torch.h>

#include "pdae/data.hpp"
#include "pdae/networks.hpp"
#include "pdae/rng.hpp"
#include "pdae/schedule.hpp"

namespace pdae {

struct TrainConfig {
    int64_t batch_size = 64;
    double learning_rate = 1e-4;
    int64_t total_images = 1'000'000;
    double ema_decay = 0.9999;
    WeightScheme weight = WeightScheme::pdae(0.1);
    uint64_t seed = 0;
    double grad_clip = 1.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    // Loss is averaged over this many steps per logged point.
    int64_t log_every = 50;
    int64_t checksum_every = 200;

    int64_t steps() const { return (total_images + batch_size - 1) / batch_size; }
    void validate() const;
};

struct LossPoint {
    int64_t step;
    int64_t images;
    double loss;
};
using LossLog = std::vector<LossPoint>;

void write_loss_csv(std::ostream& out, const LossLog& log);

/// Called every `every` steps (and after the last one) with the step count and images seen.
struct TrainHook {
    int64_t every = 0;
    std::function<void(int64_t step, int64_t images)> fn;
};

/// ema <- decay * ema + (1 - decay) * raw, elementwise and in place.
void ema_update(const std::vector<torch::Tensor>& raw, const std::vector<torch::Tensor>& ema, double decay);
void copy_parameters(const torch::nn::Module& src, torch::nn::Module& dst);

/// Fixed (index, t, eps) triples so several models can be scored on identical draws.
struct EvalDraws {
    torch::Tensor index;
    torch::Tensor t;
    torch::Tensor eps;
};
EvalDraws make_eval_draws(int64_t dataset_size, at::IntArrayRef item_shape, int steps, int64_t samples,
                          uint64_t seed);

struct PretrainResult {
    EpsNet model{nullptr};
    EpsNet ema{nullptr};
    LossLog log;
};

/// DDPM noise-prediction training. A spec with num_classes > 0 trains the label-conditioned
/// variant and requires labels.
PretrainResult pretrain_ddpm(const Dataset& data, const EpsNetSpec& spec, const NoiseSchedule& s,
                             const TrainConfig& cfg, const TrainHook& hook = {});

/// Mean simple loss of `net` over the draws (labels used iff the net is conditional).
double eval_eps_loss(EpsNet& net, const Dataset& data, const NoiseSchedule& s, const EvalDraws& draws);

struct PdaeResult {
    Encoder encoder{nullptr};
    Encoder ema_encoder{nullptr};
    GradientEstimator estimator{nullptr};
    GradientEstimator ema_estimator{nullptr};
    LossLog log;
    uint32_t frozen_checksum = 0;
};

/// Gap-filling training on top of a frozen eps-network. For an estimator spec with classes the
/// dataset labels replace the encoder and no encoder is built.
PdaeResult train_pdae(const Dataset& data, EpsNet pretrained, const EncoderSpec& enc_spec,
                      const GradientEstimatorSpec& g_spec, const NoiseSchedule& s, const TrainConfig& cfg,
                      const TrainHook& hook = {});

/// One optimisation step of the gap objective; returns the loss. Exposed for tests.
double pdae_step(EpsNet& eps, Encoder& encoder, GradientEstimator& g, torch::optim::Optimizer& opt,
                 const torch::Tensor& x0, const torch::Tensor& labels, const torch::Tensor& t,
                 const torch::Tensor& noise, const NoiseSchedule& s, const WeightScheme& w, double grad_clip);

/// Gap objective with weighting `w` over fixed draws (encoder may be null for a label head).
double eval_pdae_objective(EpsNet& eps, Encoder& encoder, GradientEstimator& g, const Dataset& data,
                           const NoiseSchedule& s, const WeightScheme& w, const EvalDraws& draws);

struct LatentStats {
    torch::Tensor mean;
    torch::Tensor std;
    int64_t degenerate_dims = 0;

    torch::Tensor normalize(const torch::Tensor& z) const;
    torch::Tensor denormalize(const torch::Tensor& zn) const;
};

/// Per-dimension statistics; standard deviations below `floor` are raised to it and counted.
LatentStats compute_latent_stats(const torch::Tensor& codes, double floor = 1e-6);

/// Encodes the whole dataset in batches (eval mode, no grad).
torch::Tensor encode_dataset(Encoder& encoder, const Dataset& data, int64_t batch = 256);

struct LatentResult {
    LatentDenoiser model{nullptr};
    LatentDenoiser ema{nullptr};
    LatentStats stats;
    LossLog log;
};

/// Noise-prediction training with an L1 loss on normalized codes.
LatentResult train_latent_dpm(const torch::Tensor& codes, const LatentDenoiserSpec& spec, const NoiseSchedule& s,
                              const TrainConfig& cfg);

torch::Tensor latent_l1_loss(const torch::Tensor& eps, const torch::Tensor& eps_hat);

struct LinearClassifier {
    torch::Tensor weight;  // [K, D]
    torch::Tensor bias;    // [K]

    int64_t num_classes() const { return weight.size(0); }
    torch::Tensor logits(const torch::Tensor& z) const;
    torch::Tensor probabilities(const torch::Tensor& z) const;
    torch::Tensor predict(const torch::Tensor& z) const;
    /// Unit vector along which the logit of `positive` grows fastest relative to `negative`.
    torch::Tensor direction(int64_t positive = 1, int64_t negative = 0) const;
};

struct ClassifierConfig {
    int64_t steps = 1000;
    double learning_rate = 0.05;
    int64_t batch_size = 64;
    // Positive-unlabelled setting: half of each batch is drawn from `positive_label`.
    bool oversample_positive = false;
    int64_t positive_label = 1;
    uint64_t seed = 0;
};

/// Logistic-loss linear classifier on (normalized) codes.
LinearClassifier train_latent_classifier(const torch::Tensor& codes, const torch::Tensor& labels,
                                         const ClassifierConfig& cfg);

/// Batch indices with half drawn (with replacement) from the positives and half from the rest.
torch::Tensor oversampled_batch(const torch::Tensor& labels, int64_t positive_label, int64_t batch, Rng& rng);

}  // namespace pdae
