// Loss weighting: exact properties of lambda and a paired Simple-vs-PDAE training run.

#include <cmath>

#include "toy.hpp"

namespace pdae::acceptance {

namespace {

constexpr double kGamma = 0.1;
constexpr int64_t kEvalDraws = 4096;

}  // namespace

Outcome criterion6(const Options& o) {
    const auto s = toy_schedule();
    // Range over every step of the schedule.
    double lo = 1.0, hi = 0.0;
    for (Timestep t = 1; t <= s.steps(); ++t) {
        const double w = loss_weight(WeightScheme::pdae(kGamma), s, t);
        lo = std::min(lo, w);
        hi = std::max(hi, w);
    }
    const bool in_range = lo > 0.0 && hi < 1.0;
    // Peak: closed-form value at SNR = gamma / (1 - gamma) and strictly lower on either side.
    const double peak_snr = kGamma / (1.0 - kGamma);
    const double peak = pdae_weight_from_snr(peak_snr, kGamma);
    const double peak_closed = std::pow(1.0 - kGamma, 1.0 - kGamma) * std::pow(kGamma, kGamma);
    bool peak_ok = std::abs(peak - peak_closed) <= 1e-15;
    for (const double f : {0.5, 0.9, 0.999, 1.001, 1.1, 2.0}) {
        peak_ok = peak_ok && pdae_weight_from_snr(peak_snr * f, kGamma) < peak;
    }
    const double at_one = pdae_weight_from_snr(1.0, kGamma);
    const bool half_ok = std::abs(at_one - 0.5) <= 1e-15;
    const bool props = in_range && peak_ok && half_ok;

    const auto data = two_class_set();
    auto simple = two_class_autoencoder(o, WeightScheme::simple());
    auto weighted = two_class_autoencoder(o, WeightScheme::pdae(kGamma));
    const auto draws = make_eval_draws(data.size(), {1, 8, 8}, s.steps(), kEvalDraws, 606);
    const auto score = [&](ModelBundle& b, const WeightScheme& w) {
        EpsNet e = b.eps;
        Encoder enc = b.encoder;
        GradientEstimator g = b.estimator;
        return eval_pdae_objective(e, enc, g, data, s, w, draws);
    };
    const double w_simple = score(simple, WeightScheme::pdae(kGamma));
    const double w_pdae = score(weighted, WeightScheme::pdae(kGamma));
    const double u_simple = score(simple, WeightScheme::simple());
    const double u_pdae = score(weighted, WeightScheme::simple());
    const bool training_ok = w_pdae < w_simple;
    return {props && training_ok,
            fmt::format("lambda range [{:.3g}, {:.3g}] {}, peak {:.6f} at SNR {:.4f} {}, lambda(SNR=1) = {:.17g} {}; "
                        "held-out weighted objective: PDAE-trained {:.5g} vs Simple-trained {:.5g} {} "
                        "(unweighted: {:.5g} vs {:.5g})",
                        lo, hi, in_range ? "ok" : "BAD", peak, peak_snr, peak_ok ? "ok" : "BAD", at_one,
                        half_ok ? "ok" : "BAD", w_pdae, w_simple, training_ok ? "ok" : "BAD", u_pdae, u_simple)};
}

}  // namespace pdae::acceptance
