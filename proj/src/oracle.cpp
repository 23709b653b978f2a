#include "pdae/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <fmt/format.h>

#include "pdae/diffusion.hpp"
#include "pdae/errors.hpp"

namespace pdae {

MixtureOracle::MixtureOracle(const torch::Tensor& points, std::optional<torch::Tensor> labels,
                             NoiseSchedule schedule)
    : schedule_(std::move(schedule)) {
    if (!points.defined() || points.dim() < 2 || points.size(0) < 1) {
        throw ValidationError("oracle needs a [N, ...] tensor with N >= 1");
    }
    count_ = points.size(0);
    if (count_ > kMaxPoints) {
        throw ValidationError(
            fmt::format("oracle refuses {} points (limit {})", count_, kMaxPoints));
    }
    dim_ = points[0].numel();
    point_shape_.assign(points.sizes().begin() + 1, points.sizes().end());
    auto flat = points.detach().to(torch::kFloat64).contiguous().reshape({count_, dim_});
    points_.assign(flat.data_ptr<double>(), flat.data_ptr<double>() + count_ * dim_);
    if (labels) {
        auto l = labels->to(torch::kLong).contiguous();
        if (l.dim() != 1 || l.size(0) != count_) {
            throw ValidationError("oracle labels must have shape [N]");
        }
        labels_.assign(l.data_ptr<int64_t>(), l.data_ptr<int64_t>() + count_);
        for (auto y : labels_) {
            if (y < 0) {
                throw ValidationError("oracle labels must be non-negative");
            }
            num_classes_ = std::max(num_classes_, y + 1);
        }
    }
}

torch::Tensor MixtureOracle::points() const {
    std::vector<int64_t> shape{count_};
    shape.insert(shape.end(), point_shape_.begin(), point_shape_.end());
    return torch::tensor(points_, torch::kFloat64).reshape(shape);
}

std::vector<double> MixtureOracle::flat_batch(const torch::Tensor& xt) const {
    if (xt.dim() < 1 || xt.numel() != xt.size(0) * dim_) {
        throw ValidationError(fmt::format("oracle input must have {} elements per sample", dim_));
    }
    auto flat = xt.detach().to(torch::kFloat64).contiguous().reshape({xt.size(0), dim_});
    return {flat.data_ptr<double>(), flat.data_ptr<double>() + flat.numel()};
}

std::vector<long double> MixtureOracle::log_weights(const torch::Tensor& xt, Timestep t,
                                                    std::vector<long double>* log_norm) const {
    schedule_.check_step(t);
    const auto x = flat_batch(xt);
    const int64_t batch = xt.size(0);
    const long double scale = std::sqrt(static_cast<long double>(schedule_.alpha_bar(t)));
    const long double var = static_cast<long double>(schedule_.one_minus_alpha_bar(t));
    std::vector<long double> logw(static_cast<std::size_t>(batch * count_));
    if (log_norm) {
        log_norm->assign(static_cast<std::size_t>(batch), 0.0L);
    }
    for (int64_t b = 0; b < batch; ++b) {
        const double* xb = x.data() + b * dim_;
        long double best = -std::numeric_limits<long double>::infinity();
        for (int64_t i = 0; i < count_; ++i) {
            const double* pi = points_.data() + i * dim_;
            long double d2 = 0.0L;
            for (int64_t k = 0; k < dim_; ++k) {
                const long double d = xb[k] - scale * pi[k];
                d2 += d * d;
            }
            const long double l = -d2 / (2.0L * var);
            logw[static_cast<std::size_t>(b * count_ + i)] = l;
            best = std::max(best, l);
        }
        long double sum = 0.0L;
        for (int64_t i = 0; i < count_; ++i) {
            sum += std::exp(logw[static_cast<std::size_t>(b * count_ + i)] - best);
        }
        const long double lse = best + std::log(sum);
        for (int64_t i = 0; i < count_; ++i) {
            logw[static_cast<std::size_t>(b * count_ + i)] -= lse;
        }
        if (log_norm) {
            (*log_norm)[static_cast<std::size_t>(b)] = lse;
        }
    }
    return logw;
}

torch::Tensor MixtureOracle::responsibilities(const torch::Tensor& xt, Timestep t) const {
    const auto logw = log_weights(xt, t);
    std::vector<double> w(logw.size());
    std::transform(logw.begin(), logw.end(), w.begin(),
                   [](long double l) { return static_cast<double>(std::exp(l)); });
    return torch::tensor(w, torch::kFloat64).reshape({xt.size(0), count_});
}

torch::Tensor MixtureOracle::posterior_x0_mean(const torch::Tensor& xt, Timestep t) const {
    const auto logw = log_weights(xt, t);
    const int64_t batch = xt.size(0);
    std::vector<double> mean(static_cast<std::size_t>(batch * dim_));
    std::vector<long double> acc(static_cast<std::size_t>(dim_));
    for (int64_t b = 0; b < batch; ++b) {
        std::fill(acc.begin(), acc.end(), 0.0L);
        for (int64_t i = 0; i < count_; ++i) {
            const long double w = std::exp(logw[static_cast<std::size_t>(b * count_ + i)]);
            const double* pi = points_.data() + i * dim_;
            for (int64_t k = 0; k < dim_; ++k) {
                acc[static_cast<std::size_t>(k)] += w * pi[k];
            }
        }
        for (int64_t k = 0; k < dim_; ++k) {
            mean[static_cast<std::size_t>(b * dim_ + k)] = static_cast<double>(acc[static_cast<std::size_t>(k)]);
        }
    }
    return torch::tensor(mean, torch::kFloat64).reshape(xt.sizes());
}

torch::Tensor MixtureOracle::posterior_x0_spread(const torch::Tensor& xt, Timestep t) const {
    const auto logw = log_weights(xt, t);
    const auto mean_t = posterior_x0_mean(xt, t);
    const auto mean = flat_batch(mean_t);
    const int64_t batch = xt.size(0);
    std::vector<double> spread(static_cast<std::size_t>(batch));
    for (int64_t b = 0; b < batch; ++b) {
        long double s = 0.0L;
        for (int64_t i = 0; i < count_; ++i) {
            const long double w = std::exp(logw[static_cast<std::size_t>(b * count_ + i)]);
            const double* pi = points_.data() + i * dim_;
            long double d2 = 0.0L;
            for (int64_t k = 0; k < dim_; ++k) {
                const long double d = pi[k] - mean[static_cast<std::size_t>(b * dim_ + k)];
                d2 += d * d;
            }
            s += w * d2;
        }
        spread[static_cast<std::size_t>(b)] = static_cast<double>(s);
    }
    return torch::tensor(spread, torch::kFloat64);
}

torch::Tensor MixtureOracle::optimal_eps(const torch::Tensor& xt, Timestep t) const {
    const auto m = posterior_x0_mean(xt, t);
    const double ab = schedule_.alpha_bar(t);
    return (xt.to(torch::kFloat64) - std::sqrt(ab) * m) / std::sqrt(schedule_.one_minus_alpha_bar(t));
}

torch::Tensor MixtureOracle::exact_posterior_mean(const torch::Tensor& xt, Timestep t) const {
    const auto c = posterior_coefficients(schedule_, t);
    return c.coef_xt * xt.to(torch::kFloat64) + c.coef_x0 * posterior_x0_mean(xt, t);
}

torch::Tensor MixtureOracle::class_probabilities(const torch::Tensor& xt, Timestep t) const {
    if (!has_labels()) {
        throw ValidationError("oracle has no labels");
    }
    const auto w = responsibilities(xt, t);
    auto probs = torch::zeros({xt.size(0), num_classes_}, torch::kFloat64);
    auto idx = torch::tensor(labels_, torch::kLong);
    probs.index_add_(1, idx, w);
    return probs;
}

torch::Tensor MixtureOracle::class_gradient(const torch::Tensor& xt, Timestep t, int64_t y) const {
    if (!has_labels()) {
        throw ValidationError("class_gradient needs a labelled oracle");
    }
    if (std::find(labels_.begin(), labels_.end(), y) == labels_.end()) {
        throw ValidationError(fmt::format("class {} has no points", y));
    }
    // grad log p(y|x_t) = sqrt(abar)/(1-abar) * (E[x0|x_t,y] - E[x0|x_t])
    const auto conditional = restrict_to_class(y).posterior_x0_mean(xt, t);
    const auto marginal = posterior_x0_mean(xt, t);
    const double ab = schedule_.alpha_bar(t);
    return (std::sqrt(ab) / schedule_.one_minus_alpha_bar(t)) * (conditional - marginal);
}

torch::Tensor MixtureOracle::log_density(const torch::Tensor& xt, Timestep t) const {
    std::vector<long double> lse;
    log_weights(xt, t, &lse);
    const long double var = static_cast<long double>(schedule_.one_minus_alpha_bar(t));
    const long double constant = -std::log(static_cast<long double>(count_)) -
                                 0.5L * dim_ * std::log(2.0L * std::numbers::pi_v<long double> * var);
    std::vector<double> out(lse.size());
    std::transform(lse.begin(), lse.end(), out.begin(),
                   [&](long double v) { return static_cast<double>(v + constant); });
    return torch::tensor(out, torch::kFloat64);
}

MixtureOracle MixtureOracle::restrict_to_class(int64_t y) const {
    if (!has_labels()) {
        throw ValidationError("restrict_to_class needs a labelled oracle");
    }
    std::vector<int64_t> keep;
    for (int64_t i = 0; i < count_; ++i) {
        if (labels_[static_cast<std::size_t>(i)] == y) {
            keep.push_back(i);
        }
    }
    if (keep.empty()) {
        throw ValidationError(fmt::format("class {} has no points", y));
    }
    auto idx = torch::tensor(keep, torch::kLong);
    auto sub_points = points().index_select(0, idx);
    auto sub_labels = torch::tensor(labels_, torch::kLong).index_select(0, idx);
    return MixtureOracle(sub_points, sub_labels, schedule_);
}

torch::Tensor MixtureOracle::nearest_index(const torch::Tensor& x) const {
    const auto flat = flat_batch(x);
    const int64_t batch = x.size(0);
    std::vector<int64_t> out(static_cast<std::size_t>(batch));
    for (int64_t b = 0; b < batch; ++b) {
        double best = std::numeric_limits<double>::infinity();
        int64_t arg = 0;
        for (int64_t i = 0; i < count_; ++i) {
            double d2 = 0.0;
            for (int64_t k = 0; k < dim_; ++k) {
                const double d = flat[static_cast<std::size_t>(b * dim_ + k)] - points_[static_cast<std::size_t>(i * dim_ + k)];
                d2 += d * d;
            }
            if (d2 < best) {
                best = d2;
                arg = i;
            }
        }
        out[static_cast<std::size_t>(b)] = arg;
    }
    return torch::tensor(out, torch::kLong);
}

torch::Tensor MixtureOracle::nearest_label(const torch::Tensor& x) const {
    if (!has_labels()) {
        throw ValidationError("nearest_label needs a labelled oracle");
    }
    return torch::tensor(labels_, torch::kLong).index_select(0, nearest_index(x));
}

GapEstimate exact_gap(const MixtureOracle& oracle, const EpsFn& eps_fn, Timestep t,
                      int64_t sample_count, Rng& rng, const ShiftFn& shift_fn, int64_t batch) {
    if (sample_count < 1) {
        throw ValidationError("exact_gap needs sample_count >= 1");
    }
    const auto& s = oracle.schedule();
    s.check_step(t);
    const auto points = oracle.points();
    const auto coef = posterior_coefficients(s, t);
    const double var = s.posterior_var(t);
    const double per_elem = 1.0 / static_cast<double>(oracle.dim());

    GapEstimate est;
    long double gap = 0.0L, shifted = 0.0L, floor = 0.0L;
    for (int64_t done = 0; done < sample_count; done += batch) {
        const int64_t n = std::min(batch, sample_count - done);
        const auto idx = rng.randint(0, oracle.size(), n);
        const auto x0 = points.index_select(0, idx);
        const auto eps = rng.normal(x0.sizes(), torch::kFloat64);
        const auto xt = q_sample(x0, t, eps, s);
        const auto mu_true = true_posterior_mean(x0, xt, t, s);
        const auto eps_hat = eps_fn(xt, t).to(torch::kFloat64);
        const auto mu_pred = predicted_mean_from_eps(xt, t, eps_hat, s);
        gap += per_sample_sq_norm(mu_true - mu_pred).sum().item<double>() * per_elem;
        if (shift_fn) {
            const auto g = shift_fn(xt, x0, t).to(torch::kFloat64);
            shifted += per_sample_sq_norm(mu_true - (mu_pred + var * g)).sum().item<double>() * per_elem;
        }
        floor += (coef.coef_x0 * coef.coef_x0) *
                 oracle.posterior_x0_spread(xt, t).sum().item<double>() * per_elem;
    }
    est.samples = sample_count;
    est.gap = static_cast<double>(gap / sample_count);
    est.gap_shifted = shift_fn ? static_cast<double>(shifted / sample_count) : est.gap;
    est.bayes_floor = static_cast<double>(floor / sample_count);
    return est;
}

double bayes_gap(const MixtureOracle& oracle, Timestep t, int64_t sample_count, Rng& rng) {
    const EpsFn optimal = [&](const torch::Tensor& xt, Timestep step) { return oracle.optimal_eps(xt, step); };
    return exact_gap(oracle, optimal, t, sample_count, rng).bayes_floor;
}

double class_conditional_bayes_gap(const MixtureOracle& oracle, Timestep t, int64_t sample_count,
                                   Rng& rng, int64_t batch) {
    if (!oracle.has_labels()) {
        throw ValidationError("class_conditional_bayes_gap needs a labelled oracle");
    }
    if (sample_count < 1) {
        throw ValidationError("class_conditional_bayes_gap needs sample_count >= 1");
    }
    const auto& s = oracle.schedule();
    s.check_step(t);
    std::vector<MixtureOracle> per_class;
    std::vector<int64_t> present;
    for (int64_t y = 0; y < oracle.num_classes(); ++y) {
        if (std::find(oracle.labels().begin(), oracle.labels().end(), y) != oracle.labels().end()) {
            per_class.push_back(oracle.restrict_to_class(y));
            present.push_back(y);
        }
    }
    const auto points = oracle.points();
    const auto coef = posterior_coefficients(s, t);
    const double per_elem = 1.0 / static_cast<double>(oracle.dim());
    // Same draws as exact_gap; the label is integrated out under p(y | x_t).
    long double floor = 0.0L;
    for (int64_t done = 0; done < sample_count; done += batch) {
        const int64_t n = std::min(batch, sample_count - done);
        const auto idx = rng.randint(0, oracle.size(), n);
        const auto x0 = points.index_select(0, idx);
        const auto eps = rng.normal(x0.sizes(), torch::kFloat64);
        const auto xt = q_sample(x0, t, eps, s);
        const auto probs = oracle.class_probabilities(xt, t);
        auto spread = torch::zeros({n}, torch::kFloat64);
        for (std::size_t c = 0; c < per_class.size(); ++c) {
            spread += probs.select(1, present[c]) * per_class[c].posterior_x0_spread(xt, t);
        }
        floor += (coef.coef_x0 * coef.coef_x0) * spread.sum().item<double>() * per_elem;
    }
    return static_cast<double>(floor / sample_count);
}

}  // namespace pdae
