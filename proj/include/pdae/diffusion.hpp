#pragma once

#include <torch/torch.h>

#include "pdae/schedule.hpp"

namespace pdae {

/// Additive guidance term. `grad` estimates a log-likelihood gradient w.r.t. x_t;
/// scale == 0 makes every guided operation return exactly its unguided result.
struct GuidanceShift {
    torch::Tensor grad;
    double scale = 1.0;

    static GuidanceShift none() { return {torch::Tensor(), 0.0}; }
    bool active() const { return scale != 0.0 && grad.defined(); }
};

/// Timesteps are either one value for the whole batch or an int64 tensor of shape [B].
/// Per-sample tables are broadcast to [B, 1, ..., 1] in the dtype of `like`.
torch::Tensor timestep_tensor(Timestep t, int64_t batch);
torch::Tensor gather_per_sample(const std::vector<double>& table, const torch::Tensor& t,
                                const torch::Tensor& like);

torch::Tensor q_sample(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& eps,
                       const NoiseSchedule& s);
torch::Tensor q_sample(const torch::Tensor& x0, Timestep t, const torch::Tensor& eps,
                       const NoiseSchedule& s);

/// Mean of q(x_{t-1} | x_t, x_0).
torch::Tensor true_posterior_mean(const torch::Tensor& x0, const torch::Tensor& xt,
                                  const torch::Tensor& t, const NoiseSchedule& s);
torch::Tensor true_posterior_mean(const torch::Tensor& x0, const torch::Tensor& xt, Timestep t,
                                  const NoiseSchedule& s);

/// (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)
torch::Tensor predicted_mean_from_eps(const torch::Tensor& xt, const torch::Tensor& t,
                                      const torch::Tensor& eps_hat, const NoiseSchedule& s);
torch::Tensor predicted_mean_from_eps(const torch::Tensor& xt, Timestep t,
                                      const torch::Tensor& eps_hat, const NoiseSchedule& s);

/// Ancestral step with mean shift posterior_var * scale * grad. `noise` must be zero
/// (or undefined) for samples at t == 1.
torch::Tensor ddpm_step(const torch::Tensor& xt, Timestep t, const torch::Tensor& eps_hat,
                        const GuidanceShift& shift, const torch::Tensor& noise,
                        const NoiseSchedule& s);

/// Generalized DDIM update from t_from down to t_to (t_to == t_from is allowed and is the identity
/// when sigma == 0). `noise` may be undefined when sigma == 0.
torch::Tensor ddim_step(const torch::Tensor& xt, Timestep t_from, Timestep t_to,
                        const torch::Tensor& eps_mod, double sigma, const torch::Tensor& noise,
                        const NoiseSchedule& s);

/// DDIM noise level for a sub-sequence step with stochasticity eta.
double ddim_sigma(const NoiseSchedule& s, Timestep t_from, Timestep t_to, double eta);

/// eps_hat - sqrt(1 - alpha_bar_t) * scale * grad
torch::Tensor guided_eps(const torch::Tensor& eps_hat, Timestep t, const GuidanceShift& shift,
                         const NoiseSchedule& s);

/// Deterministic DDIM run in reverse, from t_from up to t_to (t_from may be 0).
torch::Tensor ddim_invert_step(const torch::Tensor& xt, Timestep t_from, Timestep t_to,
                               const torch::Tensor& eps_mod, const NoiseSchedule& s);

/// (x_t - sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_bar_t)
torch::Tensor one_step_x0(const torch::Tensor& xt, const torch::Tensor& t,
                          const torch::Tensor& eps_hat, const NoiseSchedule& s);
torch::Tensor one_step_x0(const torch::Tensor& xt, Timestep t, const torch::Tensor& eps_hat,
                          const NoiseSchedule& s);

/// Mean over elements of each sample, then mean over the batch. Returns a 0-dim tensor that
/// carries autograd history.
torch::Tensor simple_loss(const torch::Tensor& eps, const torch::Tensor& eps_hat);

/// Factor sqrt(alpha_t) * sqrt(1 - alpha_bar_t) / beta_t * posterior_var_t that maps a gradient
/// estimate into eps space.
double gap_fill_factor(const NoiseSchedule& s, Timestep t);

/// Per-sample weighted gap-filling objective, reduced like simple_loss.
torch::Tensor pdae_loss(const torch::Tensor& eps, const torch::Tensor& eps_hat,
                        const torch::Tensor& g, const torch::Tensor& t, const NoiseSchedule& s,
                        const WeightScheme& w);
torch::Tensor pdae_loss(const torch::Tensor& eps, const torch::Tensor& eps_hat,
                        const torch::Tensor& g, Timestep t, const NoiseSchedule& s,
                        const WeightScheme& w);

/// Per-sample loss weights lambda_t as a [B] tensor of `like`'s dtype.
torch::Tensor loss_weights(const WeightScheme& w, const NoiseSchedule& s, const torch::Tensor& t,
                           const torch::Tensor& like);

/// Squared L2 norm per sample, shape [B].
torch::Tensor per_sample_sq_norm(const torch::Tensor& x);

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what);

}  // namespace pdae
