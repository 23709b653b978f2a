#include "pdae/diffusion.hpp"

#include <cmath>

#include <fmt/format.h>

#include "pdae/errors.hpp"

namespace pdae {

namespace {

std::vector<int64_t> broadcast_shape(const torch::Tensor& like) {
    std::vector<int64_t> shape(static_cast<std::size_t>(like.dim()), 1);
    shape[0] = like.size(0);
    return shape;
}

void check_timesteps(const torch::Tensor& t, const torch::Tensor& like, const NoiseSchedule& s,
                     int lowest = 1) {
    if (t.dim() != 1 || t.size(0) != like.size(0)) {
        throw ValidationError(fmt::format("timestep tensor must have shape [{}]", like.size(0)));
    }
    if (t.numel() == 0) {
        return;
    }
    const auto lo = t.min().item<int64_t>();
    const auto hi = t.max().item<int64_t>();
    if (lo < lowest || hi > s.steps()) {
        throw ValidationError(
            fmt::format("timesteps [{}, {}] outside [{}, {}]", lo, hi, lowest, s.steps()));
    }
}

template <typename F>
std::vector<double> table_of(const NoiseSchedule& s, F&& f) {
    std::vector<double> out(static_cast<std::size_t>(s.steps()) + 1, 0.0);
    for (int t = 1; t <= s.steps(); ++t) {
        out[static_cast<std::size_t>(t)] = f(t);
    }
    return out;
}

}  // namespace

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
    if (!a.defined() || !b.defined() || a.sizes() != b.sizes()) {
        throw ValidationError(fmt::format("{}: shape mismatch", what));
    }
}

torch::Tensor timestep_tensor(Timestep t, int64_t batch) {
    return torch::full({batch}, static_cast<int64_t>(t), torch::kLong);
}

torch::Tensor gather_per_sample(const std::vector<double>& table, const torch::Tensor& t,
                                const torch::Tensor& like) {
    auto values = torch::tensor(table, torch::kFloat64).index_select(0, t.to(torch::kLong));
    return values.to(like.scalar_type()).reshape(broadcast_shape(like));
}

torch::Tensor q_sample(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& eps,
                       const NoiseSchedule& s) {
    check_same_shape(x0, eps, "q_sample");
    check_timesteps(t, x0, s);
    const auto a = gather_per_sample(table_of(s, [&](int i) { return std::sqrt(s.alpha_bar(i)); }), t, x0);
    const auto b =
        gather_per_sample(table_of(s, [&](int i) { return std::sqrt(s.one_minus_alpha_bar(i)); }), t, x0);
    return a * x0 + b * eps;
}

torch::Tensor q_sample(const torch::Tensor& x0, Timestep t, const torch::Tensor& eps,
                       const NoiseSchedule& s) {
    check_same_shape(x0, eps, "q_sample");
    s.check_step(t);
    return std::sqrt(s.alpha_bar(t)) * x0 + std::sqrt(s.one_minus_alpha_bar(t)) * eps;
}

torch::Tensor true_posterior_mean(const torch::Tensor& x0, const torch::Tensor& xt,
                                  const torch::Tensor& t, const NoiseSchedule& s) {
    check_same_shape(x0, xt, "true_posterior_mean");
    check_timesteps(t, xt, s);
    const auto c0 = gather_per_sample(table_of(s, [&](int i) { return posterior_coefficients(s, i).coef_x0; }), t, xt);
    const auto ct = gather_per_sample(table_of(s, [&](int i) { return posterior_coefficients(s, i).coef_xt; }), t, xt);
    return c0 * x0 + ct * xt;
}

torch::Tensor true_posterior_mean(const torch::Tensor& x0, const torch::Tensor& xt, Timestep t,
                                  const NoiseSchedule& s) {
    check_same_shape(x0, xt, "true_posterior_mean");
    const auto c = posterior_coefficients(s, t);
    return c.coef_x0 * x0 + c.coef_xt * xt;
}

torch::Tensor predicted_mean_from_eps(const torch::Tensor& xt, const torch::Tensor& t,
                                      const torch::Tensor& eps_hat, const NoiseSchedule& s) {
    check_same_shape(xt, eps_hat, "predicted_mean_from_eps");
    check_timesteps(t, xt, s);
    const auto inv = gather_per_sample(table_of(s, [&](int i) { return 1.0 / std::sqrt(s.alpha(i)); }), t, xt);
    const auto k = gather_per_sample(
        table_of(s, [&](int i) { return s.beta(i) / std::sqrt(s.one_minus_alpha_bar(i)); }), t, xt);
    return inv * (xt - k * eps_hat);
}

torch::Tensor predicted_mean_from_eps(const torch::Tensor& xt, Timestep t,
                                      const torch::Tensor& eps_hat, const NoiseSchedule& s) {
    check_same_shape(xt, eps_hat, "predicted_mean_from_eps");
    s.check_step(t);
    const double k = s.beta(t) / std::sqrt(s.one_minus_alpha_bar(t));
    return (1.0 / std::sqrt(s.alpha(t))) * (xt - k * eps_hat);
}

torch::Tensor ddpm_step(const torch::Tensor& xt, Timestep t, const torch::Tensor& eps_hat,
                        const GuidanceShift& shift, const torch::Tensor& noise,
                        const NoiseSchedule& s) {
    auto out = predicted_mean_from_eps(xt, t, eps_hat, s);
    const double var = s.posterior_var(t);
    if (shift.active()) {
        check_same_shape(xt, shift.grad, "ddpm_step guidance");
        out = out + (var * shift.scale) * shift.grad;
    }
    if (noise.defined()) {
        check_same_shape(xt, noise, "ddpm_step noise");
        if (t == 1) {
            if (noise.abs().max().item<double>() != 0.0) {
                throw ValidationError("ddpm_step: noise must be zero at t = 1");
            }
        } else {
            out = out + std::sqrt(var) * noise;
        }
    }
    return out;
}

double ddim_sigma(const NoiseSchedule& s, Timestep t_from, Timestep t_to, double eta) {
    s.check_index(t_from);
    s.check_index(t_to);
    if (eta == 0.0 || t_to >= t_from) {
        return 0.0;
    }
    const double ab_from = s.alpha_bar(t_from);
    const double ab_to = s.alpha_bar(t_to);
    const double om_from = s.one_minus_alpha_bar(t_from);
    const double om_to = s.one_minus_alpha_bar(t_to);
    return eta * std::sqrt(om_to / om_from) * std::sqrt(1.0 - ab_from / ab_to);
}

torch::Tensor ddim_step(const torch::Tensor& xt, Timestep t_from, Timestep t_to,
                        const torch::Tensor& eps_mod, double sigma, const torch::Tensor& noise,
                        const NoiseSchedule& s) {
    check_same_shape(xt, eps_mod, "ddim_step");
    s.check_index(t_from);
    s.check_index(t_to);
    if (t_to > t_from) {
        throw ValidationError(fmt::format("ddim_step: t_to {} must not exceed t_from {}", t_to, t_from));
    }
    const double ab_from = s.alpha_bar(t_from);
    const double ab_to = s.alpha_bar(t_to);
    const double om_from = s.one_minus_alpha_bar(t_from);
    const double om_to = s.one_minus_alpha_bar(t_to);
    if (!(sigma >= 0.0) || sigma * sigma > om_to * (1.0 + 1e-12)) {
        throw ValidationError(fmt::format("ddim_step: sigma {} outside [0, sqrt(1 - alpha_bar)]", sigma));
    }
    if (t_to == t_from && sigma == 0.0) {
        return xt.clone();
    }
    const auto x0_hat = (xt - std::sqrt(om_from) * eps_mod) / std::sqrt(ab_from);
    auto out = std::sqrt(ab_to) * x0_hat + std::sqrt(std::max(0.0, om_to - sigma * sigma)) * eps_mod;
    if (sigma > 0.0) {
        check_same_shape(xt, noise, "ddim_step noise");
        out = out + sigma * noise;
    }
    return out;
}

torch::Tensor guided_eps(const torch::Tensor& eps_hat, Timestep t, const GuidanceShift& shift,
                         const NoiseSchedule& s) {
    s.check_step(t);
    if (!shift.active()) {
        return eps_hat;
    }
    check_same_shape(eps_hat, shift.grad, "guided_eps");
    return eps_hat - (std::sqrt(s.one_minus_alpha_bar(t)) * shift.scale) * shift.grad;
}

torch::Tensor ddim_invert_step(const torch::Tensor& xt, Timestep t_from, Timestep t_to,
                               const torch::Tensor& eps_mod, const NoiseSchedule& s) {
    check_same_shape(xt, eps_mod, "ddim_invert_step");
    s.check_index(t_from);
    s.check_index(t_to);
    if (t_to <= t_from) {
        throw ValidationError(
            fmt::format("ddim_invert_step: t_to {} must exceed t_from {}", t_to, t_from));
    }
    const double ab_from = s.alpha_bar(t_from);
    const double ab_to = s.alpha_bar(t_to);
    const double om_from = s.one_minus_alpha_bar(t_from);
    const double om_to = s.one_minus_alpha_bar(t_to);
    const auto x0_hat = (xt - std::sqrt(om_from) * eps_mod) / std::sqrt(ab_from);
    return std::sqrt(ab_to) * x0_hat + std::sqrt(om_to) * eps_mod;
}

torch::Tensor one_step_x0(const torch::Tensor& xt, const torch::Tensor& t,
                          const torch::Tensor& eps_hat, const NoiseSchedule& s) {
    check_same_shape(xt, eps_hat, "one_step_x0");
    check_timesteps(t, xt, s);
    const auto a = gather_per_sample(table_of(s, [&](int i) { return std::sqrt(s.alpha_bar(i)); }), t, xt);
    const auto b =
        gather_per_sample(table_of(s, [&](int i) { return std::sqrt(s.one_minus_alpha_bar(i)); }), t, xt);
    return (xt - b * eps_hat) / a;
}

torch::Tensor one_step_x0(const torch::Tensor& xt, Timestep t, const torch::Tensor& eps_hat,
                          const NoiseSchedule& s) {
    check_same_shape(xt, eps_hat, "one_step_x0");
    s.check_step(t);
    return (xt - std::sqrt(s.one_minus_alpha_bar(t)) * eps_hat) / std::sqrt(s.alpha_bar(t));
}

torch::Tensor per_sample_sq_norm(const torch::Tensor& x) {
    return x.pow(2).reshape({x.size(0), -1}).sum(1);
}

torch::Tensor simple_loss(const torch::Tensor& eps, const torch::Tensor& eps_hat) {
    check_same_shape(eps, eps_hat, "simple_loss");
    return (eps - eps_hat).pow(2).reshape({eps.size(0), -1}).mean(1).mean();
}

double gap_fill_factor(const NoiseSchedule& s, Timestep t) {
    s.check_step(t);
    return std::sqrt(s.alpha(t)) * std::sqrt(s.one_minus_alpha_bar(t)) / s.beta(t) * s.posterior_var(t);
}

torch::Tensor loss_weights(const WeightScheme& w, const NoiseSchedule& s, const torch::Tensor& t,
                           const torch::Tensor& like) {
    auto table = table_of(s, [&](int i) { return loss_weight(w, s, i); });
    return torch::tensor(table, torch::kFloat64)
        .index_select(0, t.to(torch::kLong))
        .to(like.scalar_type());
}

torch::Tensor pdae_loss(const torch::Tensor& eps, const torch::Tensor& eps_hat,
                        const torch::Tensor& g, const torch::Tensor& t, const NoiseSchedule& s,
                        const WeightScheme& w) {
    check_same_shape(eps, eps_hat, "pdae_loss");
    check_same_shape(eps, g, "pdae_loss gradient");
    check_timesteps(t, eps, s);
    const auto k = gather_per_sample(table_of(s, [&](int i) { return gap_fill_factor(s, i); }), t, eps);
    const auto residual = eps - eps_hat + k * g;
    const auto per_sample = residual.pow(2).reshape({eps.size(0), -1}).mean(1);
    return (loss_weights(w, s, t, eps) * per_sample).mean();
}

torch::Tensor pdae_loss(const torch::Tensor& eps, const torch::Tensor& eps_hat,
                        const torch::Tensor& g, Timestep t, const NoiseSchedule& s,
                        const WeightScheme& w) {
    return pdae_loss(eps, eps_hat, g, timestep_tensor(t, eps.size(0)), s, w);
}

}  // namespace pdae
