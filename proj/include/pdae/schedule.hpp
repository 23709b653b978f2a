#pragma once

#include <iosfwd>
#include <vector>

namespace pdae {

using Timestep = int;

enum class ScheduleKind { Linear, Constant };

/// Per-timestep constants of the forward process. Arrays are indexed by t directly:
/// index 0 of beta/alpha/posterior_var is unused (set to 0 / 1 / 0), alpha_bar[0] == 1.
class NoiseSchedule {
public:
    NoiseSchedule() = default;

    int steps() const { return static_cast<int>(beta_.size()) - 1; }
    ScheduleKind kind() const { return kind_; }
    double beta_start() const { return beta_start_; }
    double beta_end() const { return beta_end_; }

    double beta(Timestep t) const;
    double alpha(Timestep t) const;
    double alpha_bar(Timestep t) const;  // valid for 0 <= t <= T
    /// 1 - alpha_bar_t, accumulated as (1 - abar_{t-1}) + abar_{t-1} * beta_t so that it is exact
    /// at t = 1 and keeps full relative precision for small t.
    double one_minus_alpha_bar(Timestep t) const;
    double posterior_var(Timestep t) const;

    const std::vector<double>& betas() const { return beta_; }
    const std::vector<double>& alpha_bars() const { return alpha_bar_; }

    void check_step(Timestep t) const;  // 1 <= t <= T
    void check_index(Timestep t) const; // 0 <= t <= T

    friend NoiseSchedule make_schedule_from_betas(std::vector<double> betas, ScheduleKind kind,
                                                  double beta_start, double beta_end);

private:
    ScheduleKind kind_ = ScheduleKind::Linear;
    double beta_start_ = 0.0;
    double beta_end_ = 0.0;
    std::vector<double> beta_;
    std::vector<double> alpha_;
    std::vector<double> alpha_bar_;
    std::vector<double> one_minus_alpha_bar_;
    std::vector<double> posterior_var_;
};

inline constexpr double kDefaultBetaStart = 1e-4;
inline constexpr double kDefaultBetaEnd = 0.02;
inline constexpr int kDefaultSteps = 1000;
inline constexpr double kLatentConstantBeta = 0.008;

/// Builds a schedule from beta_1..beta_T (betas[0] corresponds to t = 1).
NoiseSchedule make_schedule_from_betas(std::vector<double> betas, ScheduleKind kind,
                                       double beta_start, double beta_end);

/// beta linearly spaced from beta_start to beta_end, both endpoints included.
NoiseSchedule make_linear_schedule(int steps, double beta_start = kDefaultBetaStart,
                                   double beta_end = kDefaultBetaEnd);

/// beta_t = beta for every t (the latent denoiser's schedule).
NoiseSchedule make_constant_schedule(int steps, double beta = kLatentConstantBeta);

/// alpha_bar_t / (1 - alpha_bar_t). t = 0 is rejected.
double snr(const NoiseSchedule& s, Timestep t);

enum class WeightKind { Simple, PDAE };

struct WeightScheme {
    WeightKind kind = WeightKind::PDAE;
    double gamma = 0.1;

    static WeightScheme simple() { return {WeightKind::Simple, 0.1}; }
    static WeightScheme pdae(double gamma = 0.1) { return {WeightKind::PDAE, gamma}; }
};

/// (1/(1+snr))^(1-gamma) * (snr/(1+snr))^gamma, computed from a raw SNR value.
double pdae_weight_from_snr(double snr_value, double gamma);

double loss_weight(const WeightScheme& w, const NoiseSchedule& s, Timestep t);

struct PosteriorCoefficients {
    double coef_x0;
    double coef_xt;
    double var;
};

/// Coefficients of the forward-process posterior mean: coef_x0 * x0 + coef_xt * xt.
PosteriorCoefficients posterior_coefficients(const NoiseSchedule& s, Timestep t);

/// CSV with columns t,beta,alpha_bar,snr,weight_simple,weight_pdae,weight_pdae_normalized.
void write_schedule_csv(std::ostream& out, const NoiseSchedule& s, double gamma);

}  // namespace pdae
