#include "pdae/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include <fmt/format.h>
#include <fmt/ostream.h>

#include "pdae/errors.hpp"

namespace pdae {

void NoiseSchedule::check_step(Timestep t) const {
    if (t < 1 || t > steps()) {
        throw ValidationError(fmt::format("timestep {} outside [1, {}]", t, steps()));
    }
}

void NoiseSchedule::check_index(Timestep t) const {
    if (t < 0 || t > steps()) {
        throw ValidationError(fmt::format("timestep {} outside [0, {}]", t, steps()));
    }
}

double NoiseSchedule::beta(Timestep t) const {
    check_step(t);
    return beta_[t];
}

double NoiseSchedule::alpha(Timestep t) const {
    check_step(t);
    return alpha_[t];
}

double NoiseSchedule::alpha_bar(Timestep t) const {
    check_index(t);
    return alpha_bar_[t];
}

double NoiseSchedule::one_minus_alpha_bar(Timestep t) const {
    check_index(t);
    return one_minus_alpha_bar_[t];
}

double NoiseSchedule::posterior_var(Timestep t) const {
    check_step(t);
    return posterior_var_[t];
}

NoiseSchedule make_schedule_from_betas(std::vector<double> betas, ScheduleKind kind,
                                       double beta_start, double beta_end) {
    if (betas.empty()) {
        throw ValidationError("schedule needs at least one step");
    }
    for (double b : betas) {
        if (!(b > 0.0 && b < 1.0)) {
            throw ValidationError(fmt::format("beta {} outside (0, 1)", b));
        }
    }
    NoiseSchedule s;
    s.kind_ = kind;
    s.beta_start_ = beta_start;
    s.beta_end_ = beta_end;
    const std::size_t n = betas.size();
    s.beta_.assign(n + 1, 0.0);
    s.alpha_.assign(n + 1, 1.0);
    s.alpha_bar_.assign(n + 1, 1.0);
    s.one_minus_alpha_bar_.assign(n + 1, 0.0);
    s.posterior_var_.assign(n + 1, 0.0);
    for (std::size_t t = 1; t <= n; ++t) {
        s.beta_[t] = betas[t - 1];
        s.alpha_[t] = 1.0 - s.beta_[t];
        s.alpha_bar_[t] = s.alpha_bar_[t - 1] * s.alpha_[t];
        s.one_minus_alpha_bar_[t] = s.one_minus_alpha_bar_[t - 1] + s.alpha_bar_[t - 1] * s.beta_[t];
        s.posterior_var_[t] = s.one_minus_alpha_bar_[t - 1] / s.one_minus_alpha_bar_[t] * s.beta_[t];
    }
    return s;
}

NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end) {
    if (steps < 1) {
        throw ValidationError(fmt::format("schedule steps must be >= 1, got {}", steps));
    }
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
        throw ValidationError(fmt::format(
            "linear schedule needs 0 < beta_start <= beta_end < 1, got [{}, {}]", beta_start, beta_end));
    }
    std::vector<double> betas(static_cast<std::size_t>(steps));
    for (int i = 0; i < steps; ++i) {
        const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
        betas[static_cast<std::size_t>(i)] = beta_start + (beta_end - beta_start) * frac;
    }
    return make_schedule_from_betas(std::move(betas), ScheduleKind::Linear, beta_start, beta_end);
}

NoiseSchedule make_constant_schedule(int steps, double beta) {
    if (steps < 1) {
        throw ValidationError(fmt::format("schedule steps must be >= 1, got {}", steps));
    }
    return make_schedule_from_betas(std::vector<double>(static_cast<std::size_t>(steps), beta),
                                    ScheduleKind::Constant, beta, beta);
}

double snr(const NoiseSchedule& s, Timestep t) {
    s.check_step(t);
    return s.alpha_bar(t) / s.one_minus_alpha_bar(t);
}

double pdae_weight_from_snr(double snr_value, double gamma) {
    if (!(gamma > 0.0 && gamma < 1.0)) {
        throw ValidationError(fmt::format("gamma {} outside (0, 1)", gamma));
    }
    if (!(snr_value >= 0.0)) {
        throw ValidationError(fmt::format("snr {} must be non-negative", snr_value));
    }
    const double denom = 1.0 + snr_value;
    return std::pow(1.0 / denom, 1.0 - gamma) * std::pow(snr_value / denom, gamma);
}

double loss_weight(const WeightScheme& w, const NoiseSchedule& s, Timestep t) {
    s.check_step(t);
    if (w.kind == WeightKind::Simple) {
        return 1.0;
    }
    return pdae_weight_from_snr(snr(s, t), w.gamma);
}

PosteriorCoefficients posterior_coefficients(const NoiseSchedule& s, Timestep t) {
    s.check_step(t);
    const double om = s.one_minus_alpha_bar(t);
    const double om_prev = s.one_minus_alpha_bar(t - 1);
    const double beta = s.beta(t);
    return {
        std::sqrt(s.alpha_bar(t - 1)) * beta / om,
        std::sqrt(s.alpha(t)) * om_prev / om,
        s.posterior_var(t),
    };
}

void write_schedule_csv(std::ostream& out, const NoiseSchedule& s, double gamma) {
    const auto pdae = WeightScheme::pdae(gamma);
    double max_w = 0.0;
    for (int t = 1; t <= s.steps(); ++t) {
        max_w = std::max(max_w, loss_weight(pdae, s, t));
    }
    out << "t,beta,alpha_bar,snr,weight_simple,weight_pdae,weight_pdae_normalized\n";
    for (int t = 1; t <= s.steps(); ++t) {
        const double w = loss_weight(pdae, s, t);
        fmt::print(out, "{},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g}\n", t, s.beta(t),
                   s.alpha_bar(t), snr(s, t), 1.0, w, w / max_w);
    }
}

}  // namespace pdae
