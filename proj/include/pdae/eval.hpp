#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <vector>

#include <torch/torch.h>

#include "pdae/data.hpp"
#include "pdae/oracle.hpp"
#include "pdae/pipelines.hpp"
#include "pdae/training.hpp"

namespace pdae {

/// Per-element posterior mean gaps, before and after the mean shift, at each measured t.
struct GapCurve {
    std::vector<Timestep> t;
    std::vector<double> gap_pre;
    std::vector<double> gap_shift;
    int64_t samples = 0;

    std::size_t size() const { return t.size(); }
};

/// Default bin stride max(1, T / 100) and the bins stride, 2 * stride, ..., <= T.
int default_gap_stride(int total_steps);
std::vector<Timestep> gap_bins(int total_steps, int stride);

/// Draws (x0 index, eps) per t from a stream seeded by (seed, t), so the result does not depend on
/// `batch`. The shift uses G conditioned on the encoder's code, or on the labels for a label head.
GapCurve measure_gap_curve(const ModelBundle& b, const Dataset& data, int64_t samples, int stride, uint64_t seed,
                           int64_t batch = 256);
void write_gap_csv(std::ostream& out, const GapCurve& c);

struct OneStepGrid {
    std::vector<Timestep> t;
    torch::Tensor pretrained;  // [N, |t|, C, H, W]
    torch::Tensor shifted;     // [N, |t|, C, H, W]
    std::vector<double> mse_pretrained;
    std::vector<double> mse_shifted;

    /// Rows alternate pretrained / shifted per image, one column per t, for make_grid with nrow = |t|.
    torch::Tensor tiles() const;
};

/// One-step x0 predictions from x_t = q_sample(x0, t, eps) with and without the gap shift.
OneStepGrid one_step_grid(const ModelBundle& b, const torch::Tensor& x0, const torch::Tensor& labels,
                          const std::vector<Timestep>& ts, uint64_t seed);

struct ReconMetrics {
    double mse = 0.0;
    double ssim = 0.0;
};

/// Both on images rescaled from [-1, 1] to [0, 1]: mean per-image MSE and single-scale SSIM with a
/// 7x7 Gaussian window (sigma 1.5, truncated to the image size) and valid borders.
ReconMetrics recon_metrics(const torch::Tensor& a, const torch::Tensor& b);
/// Per-image SSIM, shape [N] float64.
torch::Tensor ssim_per_image(const torch::Tensor& a, const torch::Tensor& b);

struct StageResult {
    StageSplit split;
    double accuracy = 0.0;
};

struct StageSearch {
    std::optional<StageSplit> best;
    std::optional<double> best_accuracy;
    std::vector<StageResult> table;
};

using StageAccuracy = std::function<double(const StageSplit&)>;

/// Candidates on the grid 0, stride, ..., T, shortest first and then by t1; the first reaching
/// `threshold` wins. With `exhaustive` every pair is scored for the table.
StageSearch grid_search_critical_stage(const StageAccuracy& accuracy, int total_steps, int stride, double threshold,
                                       bool exhaustive = false);

/// Accuracy of mixed-stage samples under a probe, reusing the unguided trajectory above each t2.
/// The plan's sequence must contain every grid point. Stochastic plans draw from `rng`, and each
/// evaluation matches mixed_stage_sample started from x_T with a fresh copy of it.
class StageEvaluator {
public:
    using Probe = std::function<double(const torch::Tensor& x0)>;

    StageEvaluator(EpsModel eps, GradModel grad, SamplerPlan plan, NoiseSchedule s, torch::Tensor x_T, Probe probe,
                   const Rng& rng = Rng(0));

    double operator()(const StageSplit& split);
    int64_t evaluations() const { return evaluations_; }

private:
    int64_t index_of(Timestep t) const;
    torch::Tensor unguided_state(int64_t i);

    EpsModel eps_;
    GradModel grad_;
    SamplerPlan plan_;
    NoiseSchedule s_;
    Probe probe_;
    std::vector<torch::Tensor> cache_;  // unguided state at sequence[i]
    std::vector<std::optional<Rng>> rng_cache_;  // generator right after reaching it
    int64_t evaluations_ = 0;
};

void write_stage_csv(std::ostream& out, const StageSearch& r);

/// Evaluation loss against images seen, recorded during training.
struct EvalCurve {
    std::vector<int64_t> images;
    std::vector<double> loss;
};
void write_curve_csv(std::ostream& out, const EvalCurve& c);

struct LossComparison {
    double unconditional = 0.0;
    double conditional = 0.0;
    double bayes_unconditional = 0.0;
    double bayes_conditional = 0.0;
};

/// Final evaluation losses of two eps-networks on shared draws, with the oracle's Bayes losses on the
/// same draws. Schedules must agree.
LossComparison loss_comparison(EpsNet& uncond, EpsNet& cond, const Dataset& data, const NoiseSchedule& s,
                               const EvalDraws& draws, const MixtureOracle* oracle);

/// Mean per-element loss of the optimal noise prediction over the draws. With `conditional` each
/// draw is scored against the mixture of its own class.
double bayes_eps_loss(const MixtureOracle& oracle, const Dataset& data, const NoiseSchedule& s,
                      const EvalDraws& draws, bool conditional);

/// Squared 2-Wasserstein distance between two equal-size point sets (exact assignment).
double empirical_w2(const torch::Tensor& a, const torch::Tensor& b);

}  // namespace pdae
