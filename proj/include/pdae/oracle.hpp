#pragma once

#include <functional>
#include <optional>
#include <vector>

#include <torch/torch.h>

#include "pdae/rng.hpp"
#include "pdae/schedule.hpp"

namespace pdae {

/// A finite dataset viewed through the forward process: at every t the marginal of x_t is the
/// uniform mixture (1/N) sum_i N(sqrt(abar_t) x_i, (1 - abar_t) I), so posteriors over the
/// source point, optimal noise predictions and Bayes classifier gradients are all closed-form.
///
/// Densities are accumulated in long double. Datasets larger than kMaxPoints are refused.
class MixtureOracle {
public:
    static constexpr int64_t kMaxPoints = 1024;

    /// points: [N, ...] tensor; labels: optional int64 [N].
    MixtureOracle(const torch::Tensor& points, std::optional<torch::Tensor> labels,
                  NoiseSchedule schedule);

    int64_t size() const { return count_; }
    int64_t dim() const { return dim_; }
    bool has_labels() const { return !labels_.empty(); }
    const NoiseSchedule& schedule() const { return schedule_; }
    const std::vector<int64_t>& labels() const { return labels_; }
    torch::Tensor points() const;  // [N, ...] float64

    /// Posterior over source points given x_t, shape [B, N] (float64).
    torch::Tensor responsibilities(const torch::Tensor& xt, Timestep t) const;

    /// E[x_0 | x_t], shaped like xt (float64).
    torch::Tensor posterior_x0_mean(const torch::Tensor& xt, Timestep t) const;

    /// E[||x_0 - E[x_0|x_t]||^2 | x_t], summed over elements, shape [B].
    torch::Tensor posterior_x0_spread(const torch::Tensor& xt, Timestep t) const;

    /// Minimizer of the noise-prediction loss: (x_t - sqrt(abar) E[x_0|x_t]) / sqrt(1 - abar).
    torch::Tensor optimal_eps(const torch::Tensor& xt, Timestep t) const;

    /// Bayes-optimal one-step mean E[mu_tilde | x_t] = coef_xt x_t + coef_x0 E[x_0|x_t].
    torch::Tensor exact_posterior_mean(const torch::Tensor& xt, Timestep t) const;

    /// Gradient of log p(y | x_t) for the exact classifier p(y|x_t) = sum_{i: y_i = y} w_i.
    torch::Tensor class_gradient(const torch::Tensor& xt, Timestep t, int64_t y) const;

    /// p(y | x_t) for every class, shape [B, num_classes].
    torch::Tensor class_probabilities(const torch::Tensor& xt, Timestep t) const;
    int64_t num_classes() const { return num_classes_; }

    /// log q(x_t) for each sample, shape [B].
    torch::Tensor log_density(const torch::Tensor& xt, Timestep t) const;

    /// Oracle restricted to points with label y (the class-conditional mixture).
    MixtureOracle restrict_to_class(int64_t y) const;

    /// Label of the nearest point under Euclidean distance, shape [B] (int64).
    torch::Tensor nearest_label(const torch::Tensor& x) const;

    /// Index of the nearest point, shape [B] (int64).
    torch::Tensor nearest_index(const torch::Tensor& x) const;

private:
    // Log-weights [B, N] in long double, normalized with log-sum-exp.
    std::vector<long double> log_weights(const torch::Tensor& xt, Timestep t,
                                         std::vector<long double>* log_norm = nullptr) const;
    std::vector<double> flat_batch(const torch::Tensor& xt) const;

    int64_t count_ = 0;
    int64_t dim_ = 0;
    std::vector<int64_t> point_shape_;
    std::vector<double> points_;  // [N * D]
    std::vector<int64_t> labels_;
    int64_t num_classes_ = 0;
    NoiseSchedule schedule_;
};

/// eps-network under test: (x_t, t) -> predicted noise.
using EpsFn = std::function<torch::Tensor(const torch::Tensor& xt, Timestep t)>;

/// Gradient estimate G(x_t, z(x_0), t). The gap measurement applies posterior_var_t * G as the
/// mean shift.
using ShiftFn =
    std::function<torch::Tensor(const torch::Tensor& xt, const torch::Tensor& x0, Timestep t)>;

struct GapEstimate {
    double gap = 0.0;          // mean over draws of per-element ||mu_tilde - mu_theta||^2
    double gap_shifted = 0.0;  // same with mu_theta + posterior_var * G (equals gap without G)
    double bayes_floor = 0.0;  // E ||mu_tilde - E[mu_tilde|x_t]||^2 on the same draws
    int64_t samples = 0;
};

/// Monte-Carlo posterior mean gap at one timestep. Draws x_0 uniformly from the oracle's points and
/// eps from N(0, I) using `rng`, evaluated in batches of at most `batch`.
GapEstimate exact_gap(const MixtureOracle& oracle, const EpsFn& eps_fn, Timestep t,
                      int64_t sample_count, Rng& rng, const ShiftFn& shift_fn = {},
                      int64_t batch = 256);

/// Irreducible gap E||mu_tilde - E[mu_tilde | x_t]||^2 (per element) at t, Monte-Carlo over x_t.
double bayes_gap(const MixtureOracle& oracle, Timestep t, int64_t sample_count, Rng& rng);

/// Same quantity when the label is known. Consumes `rng` exactly like bayes_gap, so equal seeds give
/// the same x_t and a per-draw comparison.
double class_conditional_bayes_gap(const MixtureOracle& oracle, Timestep t, int64_t sample_count,
                                   Rng& rng, int64_t batch = 256);

}  // namespace pdae
