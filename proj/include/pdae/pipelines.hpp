#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "pdae/diffusion.hpp"
#include "pdae/networks.hpp"
#include "pdae/rng.hpp"
#include "pdae/schedule.hpp"
#include "pdae/training.hpp"

namespace pdae {

enum class SamplerMethod { DDPM, DDIM };
/// How guided_fraction is read: as a share of the plan's steps, or of the t range [0, T].
enum class FractionMode { Steps, TRange };

struct SamplerPlan {
    SamplerMethod method = SamplerMethod::DDIM;
    // Increasing, starting at 0 and ending at T. DDPM plans use every timestep.
    std::vector<Timestep> sequence;
    double eta = 0.0;
    double guidance_scale = 1.0;
    // Guidance is applied during the first guided_fraction of sampling and dropped afterwards.
    double guided_fraction = 1.0;
    FractionMode fraction_mode = FractionMode::Steps;

    int64_t steps() const { return static_cast<int64_t>(sequence.size()) - 1; }
    /// Whether the update leaving sequence[i + 1] (the step with index `step` counted from T) is guided.
    bool guided_at(int64_t step, Timestep t_from, int total_steps) const;
    void validate(const NoiseSchedule& s) const;
};

/// 0 = t_0 < t_1 < ... < t_k = T spaced as evenly as integer rounding allows.
std::vector<Timestep> uniform_subsequence(int total_steps, int k);
SamplerPlan make_plan(SamplerMethod method, int k, const NoiseSchedule& s, double eta = 0.0);

/// Guidance only inside (t1, t2].
struct StageSplit {
    Timestep t1 = 0;
    Timestep t2 = 0;
    bool contains(Timestep t) const { return t > t1 && t <= t2; }
    void validate(int total_steps) const;
};

/// Noise prediction and guidance gradient as functions of (x_t, t) with t an int64 [B] tensor.
using EpsModel = std::function<torch::Tensor(const torch::Tensor& xt, const torch::Tensor& t)>;
using GradModel = std::function<torch::Tensor(const torch::Tensor& xt, const torch::Tensor& t)>;
/// Extra gate on guidance per update, given (step index from T, t_from).
using GuideGate = std::function<bool(int64_t step, Timestep t_from)>;

/// Runs the reverse process from x_T along the plan. Guidance applies where the plan and `gate`
/// agree, the scale is nonzero and `grad` is set; elsewhere the update is bitwise the unguided one.
/// Noise is drawn from `rng` for every stochastic update regardless of guidance.
torch::Tensor run_sampler(const EpsModel& eps, const GradModel& grad, const torch::Tensor& x_T,
                          const SamplerPlan& plan, const NoiseSchedule& s, Rng& rng, const GuideGate& gate = {});

/// The updates of run_sampler that lead from sequence[i_begin] down to sequence[i_end].
torch::Tensor run_sampler_range(const EpsModel& eps, const GradModel& grad, const torch::Tensor& x,
                                const SamplerPlan& plan, const NoiseSchedule& s, Rng& rng, const GuideGate& gate,
                                int64_t i_begin, int64_t i_end);

/// Deterministic DDIM in reverse from x_0 to x_T along the plan (with the same guidance rule).
torch::Tensor run_inversion(const EpsModel& eps, const GradModel& grad, const torch::Tensor& x0,
                            const SamplerPlan& plan, const NoiseSchedule& s);

torch::Tensor slerp(const torch::Tensor& a, const torch::Tensor& b, double lambda);

/// Trained components. Unused pieces stay empty.
struct ModelBundle {
    NoiseSchedule schedule;
    EpsNet eps{nullptr};
    Encoder encoder{nullptr};
    GradientEstimator estimator{nullptr};
    LatentDenoiser latent{nullptr};
    NoiseSchedule latent_schedule;
    std::optional<LatentStats> latent_stats;

    EpsModel eps_model() const;
    /// G(x_t, cond, t) with cond fixed to z [B, z_dim] or labels [B].
    GradModel estimator_model(const torch::Tensor& cond) const;
    torch::Tensor encode(const torch::Tensor& x0) const;
    void require_autoencoder() const;
};

torch::Tensor infer_xT(const ModelBundle& b, const torch::Tensor& x0, const SamplerPlan& plan);
torch::Tensor autoencode(const ModelBundle& b, const torch::Tensor& x0, const SamplerPlan& plan, bool use_inferred_xT,
                         Rng& rng);
/// Decodes explicit latent codes from the given x_T.
torch::Tensor decode_latent(const ModelBundle& b, const torch::Tensor& z, const torch::Tensor& x_T,
                            const SamplerPlan& plan, Rng& rng);

enum class InterpolationMode { LatentLerp, DirectionLerp };
torch::Tensor interpolate(const ModelBundle& b, const torch::Tensor& xa, const torch::Tensor& xb, double lambda,
                          InterpolationMode mode, const SamplerPlan& plan);

/// Moves normalized codes along `direction` by `scale` and decodes with x_T inferred from x0.
torch::Tensor manipulate(const ModelBundle& b, const torch::Tensor& x0, const torch::Tensor& direction, double scale,
                         const SamplerPlan& plan);

/// Plain pretrained sampling from fresh x_T; draws x_T first, then the sampler noise.
torch::Tensor sample_unconditional(const ModelBundle& b, const SamplerPlan& plan, int64_t count, Rng& rng);

/// Samples guided by scale * G(x_t, label, t) from a label-head estimator.
torch::Tensor truncation_sample(const ModelBundle& b, int64_t label, double scale, const SamplerPlan& plan,
                                int64_t count, Rng& rng);

torch::Tensor mixed_stage_sample(const EpsModel& eps, const GradModel& grad, const StageSplit& split,
                                 const SamplerPlan& plan, const NoiseSchedule& s, const torch::Tensor& x_T, Rng& rng);

/// Ancestral sampling of normalized codes from the latent denoiser.
torch::Tensor sample_latent(const ModelBundle& b, int64_t count, Rng& rng);

/// Codes from the latent model, guided by G for the plan's guided fraction and unguided afterwards.
torch::Tensor improved_unconditional(const ModelBundle& b, const SamplerPlan& plan, int64_t count, Rng& rng);

/// Few-shot acceptance: reject when p < 0.5, otherwise accept when u < p.
bool accept_code(double p, double u);

struct FewShotResult {
    torch::Tensor images;
    torch::Tensor codes;  // normalized
    int64_t proposed = 0;
    double acceptance_rate() const;
};

class FewShotAbort : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Rejection-samples `count` codes with p(y | z) from `clf` and decodes them. Aborts with
/// FewShotAbort when the running acceptance rate stays below `acceptance_floor`.
FewShotResult fewshot_conditional(const ModelBundle& b, const LinearClassifier& clf, int64_t y, int64_t count,
                                  const SamplerPlan& plan, Rng& rng, double acceptance_floor = 1e-3,
                                  int64_t proposal_batch = 256);

}  // namespace pdae
