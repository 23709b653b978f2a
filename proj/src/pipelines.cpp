#include "pdae/pipelines.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "pdae/errors.hpp"

namespace pdae {

namespace {

constexpr uint64_t kLatentStream = 1;
constexpr uint64_t kAcceptStream = 2;

bool wants_guidance(const GradModel& grad, const SamplerPlan& plan, int64_t step, Timestep t_from, int total,
                    const GuideGate& gate) {
    if (!grad || plan.guidance_scale == 0.0 || !plan.guided_at(step, t_from, total)) {
        return false;
    }
    return !gate || gate(step, t_from);
}

void require_ddim(const SamplerPlan& plan, const char* what) {
    if (plan.method != SamplerMethod::DDIM) {
        throw ValidationError(fmt::format("{} needs a DDIM plan", what));
    }
}

torch::Tensor image_noise(const ModelBundle& b, int64_t count, Rng& rng) {
    if (!b.eps) {
        throw ConfigError("model bundle has no eps-network");
    }
    if (count < 1) {
        throw ValidationError("sample count must be positive");
    }
    const auto& sp = b.eps->spec();
    return rng.normal({count, sp.image_channels, sp.image_size, sp.image_size});
}

}  // namespace

bool SamplerPlan::guided_at(int64_t step, Timestep t_from, int total_steps) const {
    if (fraction_mode == FractionMode::Steps) {
        const auto guided = static_cast<int64_t>(std::llround(guided_fraction * static_cast<double>(steps())));
        return step < guided;
    }
    return static_cast<double>(t_from) > (1.0 - guided_fraction) * total_steps;
}

void SamplerPlan::validate(const NoiseSchedule& s) const {
    if (sequence.size() < 2 || sequence.front() != 0 || sequence.back() != s.steps()) {
        throw ValidationError(fmt::format("sampling sequence must run from 0 to {}", s.steps()));
    }
    for (std::size_t i = 1; i < sequence.size(); ++i) {
        if (sequence[i] <= sequence[i - 1]) {
            throw ValidationError("sampling sequence must be strictly increasing");
        }
    }
    if (method == SamplerMethod::DDPM && steps() != s.steps()) {
        throw ValidationError("DDPM plans use every timestep");
    }
    if (!(eta >= 0.0) || !std::isfinite(guidance_scale)) {
        throw ValidationError("eta must be >= 0 and the guidance scale finite");
    }
    if (!(guided_fraction >= 0.0 && guided_fraction <= 1.0)) {
        throw ValidationError("guided_fraction must lie in [0, 1]");
    }
}

std::vector<Timestep> uniform_subsequence(int total_steps, int k) {
    if (k < 1 || k > total_steps) {
        throw ValidationError(fmt::format("step count {} must lie in [1, {}]", k, total_steps));
    }
    std::vector<Timestep> seq(static_cast<std::size_t>(k) + 1);
    for (int i = 0; i <= k; ++i) {
        seq[static_cast<std::size_t>(i)] =
            static_cast<Timestep>(std::llround(static_cast<double>(i) * total_steps / k));
    }
    return seq;
}

SamplerPlan make_plan(SamplerMethod method, int k, const NoiseSchedule& s, double eta) {
    SamplerPlan p;
    p.method = method;
    p.sequence = uniform_subsequence(s.steps(), method == SamplerMethod::DDPM ? s.steps() : k);
    p.eta = eta;
    p.validate(s);
    return p;
}

void StageSplit::validate(int total_steps) const {
    if (t1 < 0 || t1 > t2 || t2 > total_steps) {
        throw ValidationError(fmt::format("stage ({}, {}] must satisfy 0 <= t1 <= t2 <= {}", t1, t2, total_steps));
    }
}

torch::Tensor run_sampler(const EpsModel& eps, const GradModel& grad, const torch::Tensor& x_T,
                          const SamplerPlan& plan, const NoiseSchedule& s, Rng& rng, const GuideGate& gate) {
    return run_sampler_range(eps, grad, x_T, plan, s, rng, gate, plan.steps(), 0);
}

torch::Tensor run_sampler_range(const EpsModel& eps, const GradModel& grad, const torch::Tensor& x_start,
                                const SamplerPlan& plan, const NoiseSchedule& s, Rng& rng, const GuideGate& gate,
                                int64_t i_begin, int64_t i_end) {
    plan.validate(s);
    const int64_t k = plan.steps();
    if (i_end < 0 || i_begin > k || i_end > i_begin) {
        throw ValidationError(fmt::format("sampler range [{}, {}] invalid for {} steps", i_end, i_begin, k));
    }
    torch::NoGradGuard ng;
    const int64_t batch = x_start.size(0);
    auto x = x_start;
    for (int64_t i = i_begin; i > i_end; --i) {
        const Timestep t_from = plan.sequence[static_cast<std::size_t>(i)];
        const Timestep t_to = plan.sequence[static_cast<std::size_t>(i - 1)];
        const int64_t step = k - i;
        const auto tt = timestep_tensor(t_from, batch);
        const auto eps_hat = eps(x, tt);
        GuidanceShift shift = GuidanceShift::none();
        if (wants_guidance(grad, plan, step, t_from, s.steps(), gate)) {
            shift = {grad(x, tt), plan.guidance_scale};
        }
        if (plan.method == SamplerMethod::DDPM) {
            const auto noise = t_from > 1 ? rng.normal_like(x) : torch::Tensor();
            x = ddpm_step(x, t_from, eps_hat, shift, noise, s);
        } else {
            const double sigma = ddim_sigma(s, t_from, t_to, plan.eta);
            const auto noise = sigma > 0.0 ? rng.normal_like(x) : torch::Tensor();
            x = ddim_step(x, t_from, t_to, guided_eps(eps_hat, t_from, shift, s), sigma, noise, s);
        }
    }
    return x;
}

torch::Tensor run_inversion(const EpsModel& eps, const GradModel& grad, const torch::Tensor& x0,
                            const SamplerPlan& plan, const NoiseSchedule& s) {
    plan.validate(s);
    require_ddim(plan, "inversion");
    torch::NoGradGuard ng;
    const int64_t batch = x0.size(0);
    const int64_t k = plan.steps();
    auto x = x0;
    for (int64_t i = 0; i < k; ++i) {
        const Timestep t_from = plan.sequence[static_cast<std::size_t>(i)];
        const Timestep t_to = plan.sequence[static_cast<std::size_t>(i + 1)];
        const Timestep t_eval = std::max<Timestep>(t_from, 1);
        const auto tt = timestep_tensor(t_eval, batch);
        const auto eps_hat = eps(x, tt);
        GuidanceShift shift = GuidanceShift::none();
        // Mirrors the generative update that leaves t_to.
        if (wants_guidance(grad, plan, k - 1 - i, t_to, s.steps(), {})) {
            shift = {grad(x, tt), plan.guidance_scale};
        }
        x = ddim_invert_step(x, t_from, t_to, guided_eps(eps_hat, t_eval, shift, s), s);
    }
    return x;
}

torch::Tensor slerp(const torch::Tensor& a, const torch::Tensor& b, double lambda) {
    check_same_shape(a, b, "slerp");
    if (!(lambda >= 0.0 && lambda <= 1.0)) {
        throw ValidationError(fmt::format("interpolation weight {} outside [0, 1]", lambda));
    }
    const int64_t n = a.size(0);
    const auto fa = a.reshape({n, -1}).to(torch::kFloat64);
    const auto fb = b.reshape({n, -1}).to(torch::kFloat64);
    const auto cosv = ((fa * fb).sum(1) / (fa.norm(2, 1) * fb.norm(2, 1))).clamp(-1.0, 1.0);
    auto out = torch::empty_like(fa);
    for (int64_t i = 0; i < n; ++i) {
        const double theta = std::acos(cosv[i].item<double>());
        if (!std::isfinite(theta) || std::sin(theta) < 1e-8) {
            out[i] = torch::lerp(fa[i], fb[i], lambda);
            continue;
        }
        const double st = std::sin(theta);
        out[i] = std::sin((1.0 - lambda) * theta) / st * fa[i] + std::sin(lambda * theta) / st * fb[i];
    }
    return out.to(a.scalar_type()).reshape(a.sizes());
}

EpsModel ModelBundle::eps_model() const {
    if (!eps) {
        throw ConfigError("model bundle has no eps-network");
    }
    EpsNet net = eps;
    net->eval();
    return [net](const torch::Tensor& xt, const torch::Tensor& t) mutable {
        torch::NoGradGuard ng;
        return net->forward(xt, t);
    };
}

GradModel ModelBundle::estimator_model(const torch::Tensor& cond) const {
    if (!estimator) {
        throw ConfigError("model bundle has no gradient estimator");
    }
    GradientEstimator g = estimator;
    g->eval();
    return [g, cond](const torch::Tensor& xt, const torch::Tensor& t) mutable {
        torch::NoGradGuard ng;
        return g->forward(xt, t, cond);
    };
}

torch::Tensor ModelBundle::encode(const torch::Tensor& x0) const {
    require_autoencoder();
    Encoder e = encoder;
    e->eval();
    torch::NoGradGuard ng;
    return e->forward(x0);
}

void ModelBundle::require_autoencoder() const {
    if (!eps || !encoder || !estimator) {
        throw ConfigError("autoencoding needs an eps-network, an encoder and a gradient estimator");
    }
    if (estimator->spec().num_classes > 0) {
        throw ConfigError("the gradient estimator is label-conditioned, not an autoencoder");
    }
}

torch::Tensor infer_xT(const ModelBundle& b, const torch::Tensor& x0, const SamplerPlan& plan) {
    require_ddim(plan, "x_T inference");
    const auto z = b.encode(x0);
    return run_inversion(b.eps_model(), b.estimator_model(z), x0, plan, b.schedule);
}

torch::Tensor decode_latent(const ModelBundle& b, const torch::Tensor& z, const torch::Tensor& x_T,
                            const SamplerPlan& plan, Rng& rng) {
    b.require_autoencoder();
    if (z.dim() != 2 || z.size(0) != x_T.size(0) || z.size(1) != b.estimator->spec().z_dim) {
        throw ValidationError("latent codes must be [B, z_dim] with B matching x_T");
    }
    return run_sampler(b.eps_model(), b.estimator_model(z), x_T, plan, b.schedule, rng);
}

torch::Tensor autoencode(const ModelBundle& b, const torch::Tensor& x0, const SamplerPlan& plan, bool use_inferred_xT,
                         Rng& rng) {
    b.require_autoencoder();
    if (use_inferred_xT) {
        require_ddim(plan, "autoencoding with inferred x_T");
    }
    const auto x_T = use_inferred_xT ? infer_xT(b, x0, plan) : rng.normal_like(x0);
    return decode_latent(b, b.encode(x0), x_T, plan, rng);
}

torch::Tensor interpolate(const ModelBundle& b, const torch::Tensor& xa, const torch::Tensor& xb, double lambda,
                          InterpolationMode mode, const SamplerPlan& plan) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) {
        throw ValidationError(fmt::format("interpolation weight {} outside [0, 1]", lambda));
    }
    check_same_shape(xa, xb, "interpolate");
    require_ddim(plan, "interpolation");
    const auto x_T = slerp(infer_xT(b, xa, plan), infer_xT(b, xb, plan), lambda);
    const auto za = b.encode(xa);
    const auto zb = b.encode(xb);
    Rng rng(0);
    if (mode == InterpolationMode::LatentLerp) {
        return decode_latent(b, torch::lerp(za, zb, lambda), x_T, plan, rng);
    }
    const auto ga = b.estimator_model(za);
    const auto gb = b.estimator_model(zb);
    const GradModel mixed = [ga, gb, lambda](const torch::Tensor& xt, const torch::Tensor& t) {
        return torch::lerp(ga(xt, t), gb(xt, t), lambda);
    };
    return run_sampler(b.eps_model(), mixed, x_T, plan, b.schedule, rng);
}

torch::Tensor manipulate(const ModelBundle& b, const torch::Tensor& x0, const torch::Tensor& direction, double scale,
                         const SamplerPlan& plan) {
    b.require_autoencoder();
    if (!b.latent_stats) {
        throw ConfigError("manipulation needs latent normalisation statistics");
    }
    const int64_t d = b.estimator->spec().z_dim;
    if (direction.dim() != 1 || direction.size(0) != d) {
        throw ValidationError(fmt::format("direction must have {} entries", d));
    }
    const auto x_T = infer_xT(b, x0, plan);
    auto z = b.encode(x0);
    if (scale != 0.0) {
        const auto& st = *b.latent_stats;
        const auto moved = st.normalize(z.to(st.mean.scalar_type())) + scale * direction.to(st.mean.scalar_type());
        z = st.denormalize(moved).to(z.scalar_type());
    }
    Rng rng(0);
    return decode_latent(b, z, x_T, plan, rng);
}

torch::Tensor sample_unconditional(const ModelBundle& b, const SamplerPlan& plan, int64_t count, Rng& rng) {
    const auto x_T = image_noise(b, count, rng);
    return run_sampler(b.eps_model(), {}, x_T, plan, b.schedule, rng);
}

torch::Tensor truncation_sample(const ModelBundle& b, int64_t label, double scale, const SamplerPlan& plan,
                                int64_t count, Rng& rng) {
    if (!b.estimator || b.estimator->spec().num_classes <= 0) {
        throw ConfigError("truncation sampling needs a label-conditioned gradient estimator");
    }
    const int64_t k = b.estimator->spec().num_classes;
    if (label < 0 || label >= k) {
        throw ValidationError(fmt::format("label {} outside [0, {})", label, k));
    }
    const auto x_T = image_noise(b, count, rng);
    SamplerPlan p = plan;
    p.guidance_scale = scale;
    const auto labels = torch::full({count}, label, torch::kInt64);
    return run_sampler(b.eps_model(), b.estimator_model(labels), x_T, p, b.schedule, rng);
}

torch::Tensor mixed_stage_sample(const EpsModel& eps, const GradModel& grad, const StageSplit& split,
                                 const SamplerPlan& plan, const NoiseSchedule& s, const torch::Tensor& x_T, Rng& rng) {
    split.validate(s.steps());
    return run_sampler(eps, grad, x_T, plan, s, rng,
                       [split](int64_t, Timestep t_from) { return split.contains(t_from); });
}

torch::Tensor sample_latent(const ModelBundle& b, int64_t count, Rng& rng) {
    if (!b.latent) {
        throw ConfigError("model bundle has no latent denoiser");
    }
    if (count < 1) {
        throw ValidationError("sample count must be positive");
    }
    const auto& ls = b.latent_schedule;
    LatentDenoiser net = b.latent;
    net->eval();
    torch::NoGradGuard ng;
    auto z = rng.normal({count, net->spec().z_dim});
    for (Timestep t = ls.steps(); t >= 1; --t) {
        const auto eps_hat = net->forward(z, timestep_tensor(t, count));
        const auto noise = t > 1 ? rng.normal_like(z) : torch::Tensor();
        z = ddpm_step(z, t, eps_hat, GuidanceShift::none(), noise, ls);
    }
    return z;
}

torch::Tensor improved_unconditional(const ModelBundle& b, const SamplerPlan& plan, int64_t count, Rng& rng) {
    b.require_autoencoder();
    if (!b.latent || !b.latent_stats) {
        throw ConfigError("improved sampling needs a latent denoiser with its statistics");
    }
    const auto x_T = image_noise(b, count, rng);
    Rng latent_rng = rng.fork(kLatentStream);
    const auto& st = *b.latent_stats;
    const auto z = st.denormalize(sample_latent(b, count, latent_rng).to(st.mean.scalar_type())).to(torch::kFloat32);
    return run_sampler(b.eps_model(), b.estimator_model(z), x_T, plan, b.schedule, rng);
}

bool accept_code(double p, double u) { return p >= 0.5 && u < p; }

double FewShotResult::acceptance_rate() const {
    return proposed > 0 ? static_cast<double>(codes.defined() ? codes.size(0) : 0) / static_cast<double>(proposed)
                        : 0.0;
}

FewShotResult fewshot_conditional(const ModelBundle& b, const LinearClassifier& clf, int64_t y, int64_t count,
                                  const SamplerPlan& plan, Rng& rng, double acceptance_floor, int64_t proposal_batch) {
    b.require_autoencoder();
    if (!b.latent || !b.latent_stats) {
        throw ConfigError("few-shot sampling needs a latent denoiser with its statistics");
    }
    if (y < 0 || y >= clf.num_classes()) {
        throw ValidationError(fmt::format("class {} outside [0, {})", y, clf.num_classes()));
    }
    if (count < 1 || proposal_batch < 1 || !(acceptance_floor >= 0.0 && acceptance_floor < 1.0)) {
        throw ValidationError("few-shot sampling needs count >= 1, batch >= 1 and a floor in [0, 1)");
    }
    Rng latent_rng = rng.fork(kLatentStream);
    Rng accept_rng = rng.fork(kAcceptStream);
    const auto min_trials = static_cast<int64_t>(std::ceil(1.0 / std::max(acceptance_floor, 1e-12)));
    FewShotResult r;
    std::vector<torch::Tensor> kept;
    int64_t accepted = 0;
    while (accepted < count) {
        const auto zn = sample_latent(b, proposal_batch, latent_rng);
        const auto p = clf.probabilities(zn).select(1, y).to(torch::kFloat64).contiguous();
        const auto u = accept_rng.uniform(proposal_batch).contiguous();
        const auto* pp = p.data_ptr<double>();
        const auto* up = u.data_ptr<double>();
        for (int64_t i = 0; i < proposal_batch && accepted < count; ++i) {
            ++r.proposed;
            if (accept_code(pp[i], up[i])) {
                kept.push_back(zn[i]);
                ++accepted;
            }
        }
        const double rate = static_cast<double>(accepted) / static_cast<double>(r.proposed);
        if (accepted < count && r.proposed >= min_trials && rate < acceptance_floor) {
            throw FewShotAbort(fmt::format(
                "few-shot acceptance rate {:.3g} below floor {:.3g} after {} proposals ({} accepted, class {})", rate,
                acceptance_floor, r.proposed, accepted, y));
        }
    }
    r.codes = torch::stack(kept);
    const auto& st = *b.latent_stats;
    const auto z = st.denormalize(r.codes.to(st.mean.scalar_type())).to(torch::kFloat32);
    const auto x_T = image_noise(b, count, rng);
    r.images = run_sampler(b.eps_model(), b.estimator_model(z), x_T, plan, b.schedule, rng);
    return r;
}

}  // namespace pdae
