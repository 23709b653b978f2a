#include "pdae/training.hpp"

#include <cmath>
#include <ostream>

#include <fmt/format.h>
#include <fmt/ostream.h>

#include "pdae/diffusion.hpp"
#include "pdae/errors.hpp"

namespace pdae {

namespace {

enum Stream : uint64_t { kInit = 1, kData = 2, kTime = 3, kNoise = 4 };

torch::optim::Adam make_adam(std::vector<torch::Tensor> params, const TrainConfig& cfg) {
    return torch::optim::Adam(std::move(params), torch::optim::AdamOptions(cfg.learning_rate)
                                                     .betas({cfg.adam_beta1, cfg.adam_beta2})
                                                     .eps(cfg.adam_eps)
                                                     .weight_decay(0.0));
}

void clip(const std::vector<torch::Tensor>& params, double max_norm) {
    if (max_norm > 0.0) {
        torch::nn::utils::clip_grad_norm_(params, max_norm);
    }
}

// Accumulates per-step losses into logged means.
class LossAccumulator {
public:
    LossAccumulator(LossLog& log, int64_t every, int64_t batch) : log_(log), every_(every), batch_(batch) {}
    void add(int64_t step, double loss) {
        sum_ += loss;
        ++count_;
        if (count_ == every_) {
            flush(step);
        }
    }
    void flush(int64_t step) {
        if (count_ > 0) {
            log_.push_back({step, step * batch_, sum_ / static_cast<double>(count_)});
            sum_ = 0.0;
            count_ = 0;
        }
    }

private:
    LossLog& log_;
    int64_t every_;
    int64_t batch_;
    double sum_ = 0.0;
    int64_t count_ = 0;
};

void run_hook(const TrainHook& hook, int64_t step, int64_t total_steps, int64_t batch) {
    if (hook.fn && hook.every > 0 && (step % hook.every == 0 || step == total_steps)) {
        hook.fn(step, step * batch);
    }
}

}  // namespace

void TrainConfig::validate() const {
    if (batch_size < 1 || total_images < 1) {
        throw ValidationError("training budget and batch size must be positive");
    }
    if (!(ema_decay > 0.0 && ema_decay < 1.0)) {
        throw ValidationError(fmt::format("ema_decay {} outside (0, 1)", ema_decay));
    }
    if (!(learning_rate > 0.0) || grad_clip < 0.0 || log_every < 1 || checksum_every < 1) {
        throw ValidationError("learning rate must be positive, grad_clip non-negative, intervals >= 1");
    }
}

void write_loss_csv(std::ostream& out, const LossLog& log) {
    out << "step,images,loss\n";
    for (const auto& p : log) {
        fmt::print(out, "{},{},{:.9g}\n", p.step, p.images, p.loss);
    }
}

void ema_update(const std::vector<torch::Tensor>& raw, const std::vector<torch::Tensor>& ema, double decay) {
    if (raw.size() != ema.size()) {
        throw ValidationError(fmt::format("EMA topology mismatch: {} raw vs {} ema tensors", raw.size(), ema.size()));
    }
    torch::NoGradGuard guard;
    for (std::size_t i = 0; i < raw.size(); ++i) {
        if (raw[i].sizes() != ema[i].sizes()) {
            throw ValidationError(fmt::format("EMA topology mismatch at tensor {}", i));
        }
        ema[i].mul_(decay).add_(raw[i].detach(), 1.0 - decay);
    }
}

void copy_parameters(const torch::nn::Module& src, torch::nn::Module& dst) {
    const auto a = src.parameters(true);
    const auto b = dst.parameters(true);
    if (a.size() != b.size()) {
        throw ValidationError("parameter topology mismatch");
    }
    torch::NoGradGuard guard;
    for (std::size_t i = 0; i < a.size(); ++i) {
        b[i].copy_(a[i]);
    }
}

EvalDraws make_eval_draws(int64_t dataset_size, at::IntArrayRef item_shape, int steps, int64_t samples,
                          uint64_t seed) {
    if (dataset_size < 1 || samples < 1) {
        throw ValidationError("evaluation needs a nonempty dataset and at least one sample");
    }
    Rng rng(seed);
    EvalDraws d;
    d.index = rng.randint(0, dataset_size, samples);
    d.t = rng.randint(1, steps + 1, samples);
    std::vector<int64_t> shape{samples};
    shape.insert(shape.end(), item_shape.begin(), item_shape.end());
    d.eps = rng.normal(shape);
    return d;
}

PretrainResult pretrain_ddpm(const Dataset& data, const EpsNetSpec& spec, const NoiseSchedule& s,
                             const TrainConfig& cfg, const TrainHook& hook) {
    data.validate();
    cfg.validate();
    if (data.channels() != spec.image_channels || data.image_size() != spec.image_size) {
        throw ConfigError(fmt::format("dataset images are {}x{}x{}, eps-net expects {}x{}x{}", data.channels(),
                                      data.image_size(), data.image_size(), spec.image_channels, spec.image_size,
                                      spec.image_size));
    }
    const bool conditional = spec.num_classes > 0;
    if (conditional && (!data.has_labels() || data.num_classes() > spec.num_classes)) {
        throw ConfigError("label-conditioned pretraining needs labels within the spec's class count");
    }
    Rng root(cfg.seed);
    torch::manual_seed(mix_seed(cfg.seed, kInit));
    PretrainResult r;
    r.model = EpsNet(spec);
    r.ema = EpsNet(spec);
    copy_parameters(*r.model, *r.ema);
    set_requires_grad(*r.ema, false);
    r.model->train();
    auto params = r.model->parameters();
    auto ema_params = r.ema->parameters();
    auto opt = make_adam(params, cfg);
    Rng data_rng = root.fork(kData), time_rng = root.fork(kTime), noise_rng = root.fork(kNoise);
    LossAccumulator acc(r.log, cfg.log_every, cfg.batch_size);
    const int64_t total = cfg.steps();
    for (int64_t step = 1; step <= total; ++step) {
        const auto idx = data_rng.randint(0, data.size(), cfg.batch_size);
        const auto x0 = data.images.index_select(0, idx);
        const auto t = time_rng.randint(1, s.steps() + 1, cfg.batch_size);
        const auto eps = noise_rng.normal_like(x0);
        const auto xt = q_sample(x0, t, eps, s);
        const auto labels = conditional ? data.labels.index_select(0, idx) : torch::Tensor();
        auto loss = simple_loss(eps, r.model->forward(xt, t, labels));
        opt.zero_grad();
        loss.backward();
        clip(params, cfg.grad_clip);
        opt.step();
        ema_update(params, ema_params, cfg.ema_decay);
        acc.add(step, loss.item<double>());
        run_hook(hook, step, total, cfg.batch_size);
    }
    acc.flush(total);
    r.model->eval();
    r.ema->eval();
    return r;
}

double eval_eps_loss(EpsNet& net, const Dataset& data, const NoiseSchedule& s, const EvalDraws& draws) {
    torch::NoGradGuard guard;
    const bool conditional = net->spec().num_classes > 0;
    const int64_t n = draws.index.size(0);
    double total = 0.0;
    for (int64_t start = 0; start < n; start += 256) {
        const int64_t len = std::min<int64_t>(256, n - start);
        const auto idx = draws.index.narrow(0, start, len);
        const auto t = draws.t.narrow(0, start, len);
        const auto eps = draws.eps.narrow(0, start, len);
        const auto xt = q_sample(data.images.index_select(0, idx), t, eps, s);
        const auto labels = conditional ? data.labels.index_select(0, idx) : torch::Tensor();
        const auto pred = net->forward(xt, t, labels);
        total += (pred - eps).pow(2).flatten(1).mean(1).sum().item<double>();
    }
    return total / static_cast<double>(n);
}

double pdae_step(EpsNet& eps, Encoder& encoder, GradientEstimator& g, torch::optim::Optimizer& opt,
                 const torch::Tensor& x0, const torch::Tensor& labels, const torch::Tensor& t,
                 const torch::Tensor& noise, const NoiseSchedule& s, const WeightScheme& w, double grad_clip) {
    const auto xt = q_sample(x0, t, noise, s);
    DownFeatures feats;
    torch::Tensor eps_hat;
    {
        torch::NoGradGuard guard;
        feats = eps->encode_features(xt, t);
        eps_hat = eps->decode(feats);
    }
    const auto cond = encoder ? encoder->forward(x0) : labels;
    const auto shift = g->forward_features(feats, cond);
    auto loss = pdae_loss(noise, eps_hat, shift, t, s, w);
    opt.zero_grad();
    loss.backward();
    std::vector<torch::Tensor> params = g->parameters();
    if (encoder) {
        for (auto& p : encoder->parameters()) {
            params.push_back(p);
        }
    }
    clip(params, grad_clip);
    opt.step();
    return loss.item<double>();
}

PdaeResult train_pdae(const Dataset& data, EpsNet pretrained, const EncoderSpec& enc_spec,
                      const GradientEstimatorSpec& g_spec, const NoiseSchedule& s, const TrainConfig& cfg,
                      const TrainHook& hook) {
    data.validate();
    cfg.validate();
    if (!pretrained) {
        throw ConfigError("PDAE training needs a pretrained eps-network");
    }
    const auto& es = pretrained->spec();
    if (es.num_classes > 0) {
        throw ConfigError("PDAE training expects an unconditional pretrained eps-network");
    }
    if (data.channels() != es.image_channels || data.image_size() != es.image_size) {
        throw ConfigError(fmt::format("pretrained model expects {}x{}x{} images, dataset has {}x{}x{}",
                                      es.image_channels, es.image_size, es.image_size, data.channels(),
                                      data.image_size(), data.image_size()));
    }
    const bool label_head = g_spec.num_classes > 0;
    if (label_head && (!data.has_labels() || data.num_classes() > g_spec.num_classes)) {
        throw ConfigError("label-head training needs labels within the estimator's class count");
    }
    if (!label_head && enc_spec.z_dim != g_spec.z_dim) {
        throw ConfigError(fmt::format("encoder z_dim {} differs from estimator z_dim {}", enc_spec.z_dim, g_spec.z_dim));
    }
    if (!label_head && (enc_spec.image_channels != es.image_channels || enc_spec.image_size != es.image_size)) {
        throw ConfigError("encoder input shape differs from the pretrained model's");
    }
    pretrained->eval();
    set_requires_grad(*pretrained, false);
    const uint32_t checksum = parameter_checksum(*pretrained);
    const auto verify = [&](int64_t step) {
        const uint32_t now = parameter_checksum(*pretrained);
        if (now != checksum) {
            throw IntegrityError(fmt::format("frozen eps-network changed at step {} (checksum {:08x} -> {:08x})",
                                             step, checksum, now));
        }
    };

    Rng root(cfg.seed);
    torch::manual_seed(mix_seed(cfg.seed, kInit));
    PdaeResult r;
    r.frozen_checksum = checksum;
    if (!label_head) {
        r.encoder = Encoder(enc_spec);
        r.ema_encoder = Encoder(enc_spec);
    }
    r.estimator = GradientEstimator(pretrained, g_spec);
    r.ema_estimator = GradientEstimator(pretrained, g_spec);
    std::vector<torch::Tensor> params = r.estimator->parameters();
    std::vector<torch::Tensor> ema_params = r.ema_estimator->parameters();
    if (!label_head) {
        for (auto& p : r.encoder->parameters()) params.push_back(p);
        for (auto& p : r.ema_encoder->parameters()) ema_params.push_back(p);
        copy_parameters(*r.encoder, *r.ema_encoder);
        set_requires_grad(*r.ema_encoder, false);
        r.encoder->train();
    }
    copy_parameters(*r.estimator, *r.ema_estimator);
    set_requires_grad(*r.ema_estimator, false);
    r.estimator->train();
    auto opt = make_adam(params, cfg);
    Rng data_rng = root.fork(kData), time_rng = root.fork(kTime), noise_rng = root.fork(kNoise);
    LossAccumulator acc(r.log, cfg.log_every, cfg.batch_size);
    const int64_t total = cfg.steps();
    for (int64_t step = 1; step <= total; ++step) {
        const auto idx = data_rng.randint(0, data.size(), cfg.batch_size);
        const auto x0 = data.images.index_select(0, idx);
        const auto labels = label_head ? data.labels.index_select(0, idx) : torch::Tensor();
        const auto t = time_rng.randint(1, s.steps() + 1, cfg.batch_size);
        const auto noise = noise_rng.normal_like(x0);
        const double loss =
            pdae_step(pretrained, r.encoder, r.estimator, opt, x0, labels, t, noise, s, cfg.weight, cfg.grad_clip);
        ema_update(params, ema_params, cfg.ema_decay);
        acc.add(step, loss);
        if (step % cfg.checksum_every == 0) {
            verify(step);
        }
        run_hook(hook, step, total, cfg.batch_size);
    }
    acc.flush(total);
    verify(total);
    if (r.encoder) {
        r.encoder->eval();
        r.ema_encoder->eval();
    }
    r.estimator->eval();
    r.ema_estimator->eval();
    return r;
}

double eval_pdae_objective(EpsNet& eps, Encoder& encoder, GradientEstimator& g, const Dataset& data,
                           const NoiseSchedule& s, const WeightScheme& w, const EvalDraws& draws) {
    torch::NoGradGuard guard;
    const int64_t n = draws.index.size(0);
    double total = 0.0;
    for (int64_t start = 0; start < n; start += 256) {
        const int64_t len = std::min<int64_t>(256, n - start);
        const auto idx = draws.index.narrow(0, start, len);
        const auto t = draws.t.narrow(0, start, len);
        const auto noise = draws.eps.narrow(0, start, len);
        const auto x0 = data.images.index_select(0, idx);
        const auto xt = q_sample(x0, t, noise, s);
        const auto feats = eps->encode_features(xt, t);
        const auto eps_hat = eps->decode(feats);
        const auto cond = encoder ? encoder->forward(x0) : data.labels.index_select(0, idx);
        const auto shift = g->forward_features(feats, cond);
        total += pdae_loss(noise, eps_hat, shift, t, s, w).item<double>() * static_cast<double>(len);
    }
    return total / static_cast<double>(n);
}

torch::Tensor LatentStats::normalize(const torch::Tensor& z) const { return (z - mean) / std; }
torch::Tensor LatentStats::denormalize(const torch::Tensor& zn) const { return zn * std + mean; }

LatentStats compute_latent_stats(const torch::Tensor& codes, double floor) {
    if (codes.dim() != 2 || codes.size(0) < 2) {
        throw ValidationError("latent statistics need at least two codes of shape [N, D]");
    }
    LatentStats st;
    st.mean = codes.mean(0);
    auto sd = codes.std(0, false);
    const auto low = sd < floor;
    st.degenerate_dims = low.sum().item<int64_t>();
    st.std = torch::where(low, torch::full_like(sd, floor), sd);
    return st;
}

torch::Tensor encode_dataset(Encoder& encoder, const Dataset& data, int64_t batch) {
    torch::NoGradGuard guard;
    encoder->eval();
    std::vector<torch::Tensor> out;
    for (int64_t start = 0; start < data.size(); start += batch) {
        const int64_t len = std::min(batch, data.size() - start);
        out.push_back(encoder->forward(data.images.narrow(0, start, len)));
    }
    return torch::cat(out, 0);
}

torch::Tensor latent_l1_loss(const torch::Tensor& eps, const torch::Tensor& eps_hat) {
    check_same_shape(eps, eps_hat, "l1_loss");
    return (eps - eps_hat).abs().flatten(1).mean(1).mean();
}

LatentResult train_latent_dpm(const torch::Tensor& codes, const LatentDenoiserSpec& spec, const NoiseSchedule& s,
                              const TrainConfig& cfg) {
    cfg.validate();
    if (codes.dim() != 2 || codes.size(1) != spec.z_dim) {
        throw ValidationError(fmt::format("codes must be [N, {}]", spec.z_dim));
    }
    LatentResult r;
    r.stats = compute_latent_stats(codes);
    if (r.stats.degenerate_dims > 0) {
        fmt::print(stderr, "warning: {} latent dimensions have near-zero variance; std floored\n",
                   r.stats.degenerate_dims);
    }
    const auto normed = r.stats.normalize(codes).to(torch::kFloat32);
    Rng root(cfg.seed);
    torch::manual_seed(mix_seed(cfg.seed, kInit));
    r.model = LatentDenoiser(spec);
    r.ema = LatentDenoiser(spec);
    copy_parameters(*r.model, *r.ema);
    set_requires_grad(*r.ema, false);
    auto params = r.model->parameters();
    auto ema_params = r.ema->parameters();
    auto opt = make_adam(params, cfg);
    Rng data_rng = root.fork(kData), time_rng = root.fork(kTime), noise_rng = root.fork(kNoise);
    LossAccumulator acc(r.log, cfg.log_every, cfg.batch_size);
    const int64_t total = cfg.steps();
    for (int64_t step = 1; step <= total; ++step) {
        const auto z0 = normed.index_select(0, data_rng.randint(0, normed.size(0), cfg.batch_size));
        const auto t = time_rng.randint(1, s.steps() + 1, cfg.batch_size);
        const auto eps = noise_rng.normal_like(z0);
        auto loss = latent_l1_loss(eps, r.model->forward(q_sample(z0, t, eps, s), t));
        opt.zero_grad();
        loss.backward();
        clip(params, cfg.grad_clip);
        opt.step();
        ema_update(params, ema_params, cfg.ema_decay);
        acc.add(step, loss.item<double>());
    }
    acc.flush(total);
    r.model->eval();
    r.ema->eval();
    return r;
}

torch::Tensor LinearClassifier::logits(const torch::Tensor& z) const {
    return torch::addmm(bias, z.to(weight.scalar_type()), weight.t());
}

torch::Tensor LinearClassifier::probabilities(const torch::Tensor& z) const { return torch::softmax(logits(z), 1); }

torch::Tensor LinearClassifier::predict(const torch::Tensor& z) const { return logits(z).argmax(1); }

torch::Tensor LinearClassifier::direction(int64_t positive, int64_t negative) const {
    if (positive < 0 || negative < 0 || positive >= num_classes() || negative >= num_classes() || positive == negative) {
        throw ValidationError("direction needs two distinct valid classes");
    }
    const auto d = weight[positive] - weight[negative];
    return d / d.norm();
}

torch::Tensor oversampled_batch(const torch::Tensor& labels, int64_t positive_label, int64_t batch, Rng& rng) {
    const auto pos = torch::nonzero(labels == positive_label).flatten();
    const auto rest = torch::nonzero(labels != positive_label).flatten();
    if (pos.numel() == 0 || rest.numel() == 0) {
        throw ValidationError("oversampling needs both positive and other samples");
    }
    const int64_t half = batch / 2;
    const auto a = pos.index_select(0, rng.randint(0, pos.numel(), half));
    const auto b = rest.index_select(0, rng.randint(0, rest.numel(), batch - half));
    return torch::cat({a, b});
}

LinearClassifier train_latent_classifier(const torch::Tensor& codes, const torch::Tensor& labels,
                                         const ClassifierConfig& cfg) {
    if (codes.dim() != 2 || labels.dim() != 1 || labels.size(0) != codes.size(0)) {
        throw ValidationError("classifier needs codes [N, D] and labels [N]");
    }
    const int64_t k = labels.max().item<int64_t>() + 1;
    if (std::get<0>(at::_unique(labels)).numel() < 2) {
        throw ValidationError("classifier needs at least two classes");
    }
    if (cfg.steps < 1 || cfg.batch_size < 2 || !(cfg.learning_rate > 0.0)) {
        throw ValidationError("classifier config needs positive steps, batch >= 2 and learning rate");
    }
    const auto z = codes.to(torch::kFloat64);
    Rng rng(cfg.seed);
    LinearClassifier clf;
    clf.weight = torch::zeros({k, z.size(1)}, torch::kFloat64).requires_grad_(true);
    clf.bias = torch::zeros({k}, torch::kFloat64).requires_grad_(true);
    torch::optim::Adam opt({clf.weight, clf.bias}, torch::optim::AdamOptions(cfg.learning_rate));
    for (int64_t step = 0; step < cfg.steps; ++step) {
        const auto idx = cfg.oversample_positive ? oversampled_batch(labels, cfg.positive_label, cfg.batch_size, rng)
                                                 : rng.randint(0, z.size(0), cfg.batch_size);
        auto loss = torch::nn::functional::cross_entropy(clf.logits(z.index_select(0, idx)),
                                                          labels.index_select(0, idx));
        opt.zero_grad();
        loss.backward();
        opt.step();
    }
    clf.weight = clf.weight.detach();
    clf.bias = clf.bias.detach();
    return clf;
}

}  // namespace pdae
