// Sampling criteria: critical stage search, DDIM determinism and inversion, guidance degeneracy.

#include <fstream>

#include <fmt/ranges.h>

#include "toy.hpp"
#include "pdae/eval.hpp"

namespace pdae::acceptance {

namespace {

constexpr int kGridStride = 50;
constexpr double kStageThreshold = 0.9;
constexpr double kComplementCeiling = 0.5;
constexpr int64_t kStageSamples = 200;
constexpr int64_t kStageSteps = 100;
constexpr double kStageEta = 1.0;
constexpr double kStageScale = 1.0;

constexpr double kInversionRatio = 10.0;
constexpr int64_t kReconImages = 32;

constexpr int64_t kTruncationSamples = 200;
constexpr int64_t kBernoulliTrials = 10'000;

bool same(const torch::Tensor& a, const torch::Tensor& b) { return torch::equal(a, b); }

double mean_pairwise_distance(const torch::Tensor& x) {
    const auto f = x.reshape({x.size(0), -1}).to(torch::kFloat64);
    const int64_t n = f.size(0);
    return torch::cdist(f, f).sum().item<double>() / static_cast<double>(n * (n - 1));
}

}  // namespace

Outcome criterion5(const Options& o) {
    const auto data = ten_class_set();
    const auto oracle = oracle_for(data);
    const auto s = toy_schedule();
    auto b = ten_class_label_head(o);
    auto plan = make_plan(SamplerMethod::DDIM, kStageSteps, s, kStageEta);
    plan.guidance_scale = kStageScale;
    Rng rng(81);
    const auto x_T = rng.normal({kStageSamples, 1, 8, 8});
    const auto targets = torch::arange(kStageSamples, torch::kInt64) % oracle.num_classes();
    const auto grad = b.estimator_model(targets);
    StageEvaluator ev(b.eps_model(), grad, plan, s, x_T,
                      [&](const torch::Tensor& x) { return nearest_label_accuracy(oracle, x, targets); }, rng);

    const auto search = grid_search_critical_stage(std::ref(ev), s.steps(), kGridStride, kStageThreshold);
    {
        std::ofstream out(o.cache / "critical_stage_search.csv");
        write_stage_csv(out, search);
    }
    const double unguided = ev({0, 0});
    const double full = ev({0, s.steps()});
    if (!search.best) {
        return {false, fmt::format("no stage reached {} accuracy (full guidance {:.3f}, none {:.3f})", kStageThreshold,
                                   full, unguided)};
    }
    const auto best = *search.best;
    auto noise = rng.clone();
    const auto complement = run_sampler(b.eps_model(), grad, x_T, plan, s, noise,
                                        [best](int64_t, Timestep t) { return !best.contains(t); });
    const double comp = nearest_label_accuracy(oracle, complement, targets);
    const double below = ev({0, best.t1});
    const double above = ev({best.t2, s.steps()});
    const bool pass = *search.best_accuracy >= kStageThreshold && comp < kComplementCeiling;
    return {pass, fmt::format("critical stage ({}, {}] with accuracy {:.3f} (need >= {}); complement {:.3f} (need < {}; "
                              "(0,{}] alone {:.3f}, ({},{}] alone {:.3f}); full guidance {:.3f}, none {:.3f}; "
                              "{} stage evaluations",
                              best.t1, best.t2, *search.best_accuracy, kStageThreshold, comp, kComplementCeiling,
                              best.t1, below, best.t2, s.steps(), above, full, unguided, ev.evaluations())};
}

Outcome criterion7(const Options& o) {
    const auto s = toy_schedule();
    const auto data = two_class_set();
    auto bundle = two_class_autoencoder(o, WeightScheme::pdae(0.1));

    // Bitwise reproducibility of deterministic sampling, plain and guided.
    const auto plan = make_plan(SamplerMethod::DDIM, 50, s);
    Rng a(91), b(91);
    const bool plain = same(sample_unconditional(bundle, plan, 16, a), sample_unconditional(bundle, plan, 16, b));
    const auto x0 = data.images.narrow(0, 0, kReconImages);
    Rng c(92), d(92);
    const bool guided = same(autoencode(bundle, x0, plan, false, c), autoencode(bundle, x0, plan, false, d));

    std::vector<double> inferred, random;
    for (const int k : {10, 50, 100}) {
        const auto p = make_plan(SamplerMethod::DDIM, k, s);
        Rng r1(93), r2(93);
        inferred.push_back(recon_metrics(autoencode(bundle, x0, p, true, r1), x0).mse);
        random.push_back(recon_metrics(autoencode(bundle, x0, p, false, r2), x0).mse);
    }
    bool ratios = true;
    for (std::size_t i = 0; i < inferred.size(); ++i) {
        ratios = ratios && inferred[i] * kInversionRatio <= random[i];
    }
    const bool monotone = inferred[0] > inferred[1] && inferred[1] > inferred[2];
    return {plain && guided && ratios && monotone,
            fmt::format("bitwise repeat: plain {}, guided {}; MSE inferred x_T at 10/50/100 steps {:.3g} / {:.3g} / "
                        "{:.3g} ({}), random x_T {:.3g} / {:.3g} / {:.3g}; ratios {:.1f} / {:.1f} / {:.1f} (need >= {})",
                        plain ? "yes" : "NO", guided ? "yes" : "NO", inferred[0], inferred[1], inferred[2],
                        monotone ? "decreasing" : "NOT decreasing", random[0], random[1], random[2],
                        random[0] / inferred[0], random[1] / inferred[1], random[2] / inferred[2], kInversionRatio)};
}

Outcome criterion8(const Options& o) {
    const auto s = toy_schedule();
    const auto data = two_class_set();
    const auto oracle = oracle_for(data);
    auto ae = two_class_autoencoder(o, WeightScheme::pdae(0.1));
    attach_two_class_latent(o, ae);
    auto labelled = two_class_label_head(o);
    const auto eps = ae.eps_model();

    std::vector<std::string> broken;
    int checks = 0;
    const auto expect = [&](bool ok, const std::string& what) {
        ++checks;
        if (!ok) {
            broken.push_back(what);
        }
    };
    auto ddim = make_plan(SamplerMethod::DDIM, 20, s, 0.5);
    ddim.guidance_scale = 0.0;
    auto ddpm = make_plan(SamplerMethod::DDPM, 0, s);
    ddpm.guidance_scale = 0.0;
    auto det = make_plan(SamplerMethod::DDIM, 20, s);
    det.guidance_scale = 0.0;
    const auto xa = data.images.narrow(0, 0, 8);
    const auto xb = data.images.narrow(0, 8, 8);

    for (const auto* plan : {&ddim, &ddpm}) {
        const auto tag = plan->method == SamplerMethod::DDPM ? "DDPM" : "DDIM";
        Rng r1(101), r2(101), r3(101);
        const auto ref = [&] {
            const auto x_T = r3.normal_like(xa);
            return run_sampler(eps, {}, x_T, *plan, s, r3);
        }();
        const auto out_a = autoencode(ae, xa, *plan, false, r1);
        const auto out_b = autoencode(ae, xb, *plan, false, r2);
        expect(same(out_a, ref), fmt::format("autoencode {} vs unguided", tag));
        expect(same(out_a, out_b), fmt::format("autoencode {} independent of z", tag));
        Rng r4(102), r5(102);
        expect(same(truncation_sample(labelled, 1, 0.0, *plan, 8, r4), sample_unconditional(labelled, *plan, 8, r5)),
               fmt::format("truncation {} scale 0", tag));
    }
    {
        const auto inv = run_inversion(eps, {}, xa, det, s);
        Rng r1(103), r2(103);
        expect(same(infer_xT(ae, xa, det), inv), "inversion scale 0");
        expect(same(autoencode(ae, xa, det, true, r1), run_sampler(eps, {}, inv, det, s, r2)), "inferred autoencode");
        const auto mid = slerp(inv, run_inversion(eps, {}, xb, det, s), 0.5);
        Rng r3(0);
        const auto ref = run_sampler(eps, {}, mid, det, s, r3);
        expect(same(interpolate(ae, xa, xb, 0.5, InterpolationMode::LatentLerp, det), ref), "interpolate latent");
        expect(same(interpolate(ae, xa, xb, 0.5, InterpolationMode::DirectionLerp, det), ref), "interpolate direction");
        const auto dir = torch::ones({ae.estimator->spec().z_dim}) / std::sqrt(static_cast<double>(ae.estimator->spec().z_dim));
        Rng r4(0);
        expect(same(manipulate(ae, xa, dir, 2.0, det), run_sampler(eps, {}, inv, det, s, r4)), "manipulate");
    }
    {
        Rng r1(104), r2(104), r3(104);
        const auto x1 = r1.normal_like(xa);
        const auto x2 = r2.normal_like(xa);
        const auto unguided = run_sampler(eps, {}, x1, ddim, s, r1);
        auto scaled = ddim;
        scaled.guidance_scale = 1.0;
        const auto z = ae.encode(xa);
        expect(same(mixed_stage_sample(eps, ae.estimator_model(z), {0, s.steps()}, ddim, s, x2, r2), unguided),
               "mixed stage scale 0");
        expect(same(mixed_stage_sample(eps, ae.estimator_model(z), {300, 300}, scaled, s, r3.normal_like(xa), r3),
                    unguided),
               "mixed stage empty split");
        Rng r5(105), r6(105), r7(105), r8(105);
        expect(same(improved_unconditional(ae, ddim, 8, r5), sample_unconditional(ae, ddim, 8, r6)),
               "improved sampling scale 0");
        auto none = scaled;
        none.guided_fraction = 0.0;
        expect(same(improved_unconditional(ae, none, 8, r7), sample_unconditional(ae, ddim, 8, r8)),
               "improved sampling fraction 0");
    }
    {
        Rng r1(106), r2(106);
        const auto codes = encode_dataset(ae.encoder, data);
        ClassifierConfig cc;
        cc.steps = 200;
        const auto clf = train_latent_classifier(ae.latent_stats->normalize(codes), data.labels, cc);
        const auto fs = fewshot_conditional(ae, clf, 1, 8, ddim, r1);
        expect(same(fs.images, sample_unconditional(ae, ddim, 8, r2)), "few-shot decode scale 0");
    }

    // Truncation sweep on the label head.
    auto sweep_plan = make_plan(SamplerMethod::DDIM, 50, s);
    std::vector<double> acc, div;
    for (const double scale : {0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0}) {
        double hits = 0.0, spread = 0.0;
        for (const int64_t y : {0, 1}) {
            Rng r(mix_seed(107, static_cast<uint64_t>(y)));
            const auto x = truncation_sample(labelled, y, scale, sweep_plan, kTruncationSamples, r);
            hits += nearest_label_accuracy(oracle, x, torch::full({kTruncationSamples}, y, torch::kInt64));
            spread += mean_pairwise_distance(x);
        }
        acc.push_back(hits / 2.0);
        div.push_back(spread / 2.0);
    }
    bool monotone = acc.back() > acc.front();
    for (std::size_t i = 1; i < acc.size(); ++i) {
        monotone = monotone && acc[i] >= acc[i - 1];
    }

    // Few-shot acceptance rule.
    Rng u(108);
    const auto draws = u.uniform(kBernoulliTrials);
    int64_t rej = 0, acc_one = 0, acc_p = 0;
    for (int64_t i = 0; i < kBernoulliTrials; ++i) {
        const double v = draws[i].item<double>();
        rej += accept_code(0.4, v) ? 0 : 1;
        acc_one += accept_code(1.0, v) ? 1 : 0;
        acc_p += accept_code(0.7, v) ? 1 : 0;
    }
    const double rate = static_cast<double>(acc_p) / kBernoulliTrials;
    const double se = std::sqrt(0.7 * 0.3 / kBernoulliTrials);
    const bool rule = rej == kBernoulliTrials && acc_one == kBernoulliTrials && std::abs(rate - 0.7) <= 3 * se &&
                      !accept_code(0.4999999, 0.0) && accept_code(0.5, 0.0);

    const bool pass = broken.empty() && monotone && rule;
    return {pass, fmt::format("scale-0 identities {}/{} hold{}{}; truncation accuracy [{:.3f}] {} with diversity "
                              "[{:.3f}]; few-shot rule: p=0.4 rejected {}/{}, p=1 accepted {}/{}, p=0.7 rate {:.4f} "
                              "(0.7 +- {:.4f}) {}",
                              checks - static_cast<int>(broken.size()), checks, broken.empty() ? "" : "; broken: ",
                              fmt::join(broken, ", "), fmt::join(acc, ", "), monotone ? "monotone" : "NOT monotone",
                              fmt::join(div, ", "), rej, kBernoulliTrials, acc_one, kBernoulliTrials, rate, 3 * se,
                              rule ? "ok" : "BAD")};
}

}  // namespace pdae::acceptance
