#include "pdae/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include <fmt/format.h>

#include "pdae/errors.hpp"

namespace pdae {

namespace {

torch::Tensor per_element_sq(const torch::Tensor& a, const torch::Tensor& b) {
    return (a.to(torch::kFloat64) - b.to(torch::kFloat64)).pow(2).flatten(1).mean(1);
}

torch::Tensor condition_for(const ModelBundle& b, const torch::Tensor& x0, const torch::Tensor& labels) {
    if (b.estimator->spec().num_classes > 0) {
        if (!labels.defined()) {
            throw ValidationError("a label-conditioned estimator needs labels");
        }
        return labels;
    }
    Encoder e = b.encoder;
    if (!e) {
        throw ConfigError("model bundle has no encoder");
    }
    e->eval();
    return e->forward(x0);
}

/// eps_hat and G from one pass through the frozen down path.
std::pair<torch::Tensor, torch::Tensor> eps_and_shift(const ModelBundle& b, const torch::Tensor& xt,
                                                      const torch::Tensor& tt, const torch::Tensor& x0,
                                                      const torch::Tensor& labels) {
    EpsNet net = b.eps;
    net->eval();
    const auto f = net->encode_features(xt, tt);
    const auto eps_hat = net->decode(f);
    if (!b.estimator) {
        return {eps_hat, torch::Tensor()};
    }
    GradientEstimator g = b.estimator;
    g->eval();
    return {eps_hat, g->forward_features(f, condition_for(b, x0, labels))};
}

torch::Tensor gaussian_window(int64_t size, double sigma) {
    auto w = torch::empty({size}, torch::kFloat64);
    const double c = 0.5 * static_cast<double>(size - 1);
    for (int64_t i = 0; i < size; ++i) {
        const double d = static_cast<double>(i) - c;
        w[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    }
    w /= w.sum();
    return torch::outer(w, w);
}

// Minimum-cost perfect matching on a square cost matrix (Hungarian method, O(n^3)).
double assignment_cost(const std::vector<double>& cost, int64_t n) {
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
    std::vector<int64_t> p(n + 1, 0), way(n + 1, 0);
    std::vector<char> used(n + 1);
    for (int64_t i = 1; i <= n; ++i) {
        p[0] = i;
        int64_t j0 = 0;
        std::fill(minv.begin(), minv.end(), inf);
        std::fill(used.begin(), used.end(), 0);
        do {
            used[j0] = 1;
            const int64_t i0 = p[j0];
            double delta = inf;
            int64_t j1 = 0;
            for (int64_t j = 1; j <= n; ++j) {
                if (used[j]) {
                    continue;
                }
                const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int64_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int64_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    double total = 0.0;
    for (int64_t j = 1; j <= n; ++j) {
        total += cost[(p[j] - 1) * n + (j - 1)];
    }
    return total;
}

}  // namespace

int default_gap_stride(int total_steps) { return std::max(1, total_steps / 100); }

std::vector<Timestep> gap_bins(int total_steps, int stride) {
    if (stride < 1 || stride > total_steps) {
        throw ValidationError(fmt::format("gap stride {} must lie in [1, {}]", stride, total_steps));
    }
    std::vector<Timestep> out;
    for (int t = stride; t <= total_steps; t += stride) {
        out.push_back(t);
    }
    return out;
}

GapCurve measure_gap_curve(const ModelBundle& b, const Dataset& data, int64_t samples, int stride, uint64_t seed,
                           int64_t batch) {
    data.validate();
    if (!b.eps) {
        throw ConfigError("gap measurement needs an eps-network");
    }
    if (samples < 1 || batch < 1) {
        throw ValidationError("gap measurement needs samples >= 1 and batch >= 1");
    }
    const auto& s = b.schedule;
    const bool label_head = b.estimator && b.estimator->spec().num_classes > 0;
    if (label_head && !data.has_labels()) {
        throw ValidationError("a label-conditioned estimator needs a labelled dataset");
    }
    torch::NoGradGuard ng;
    GapCurve c;
    c.samples = samples;
    for (const Timestep t : gap_bins(s.steps(), stride)) {
        Rng rng(mix_seed(seed, static_cast<uint64_t>(t)));
        const auto idx = rng.randint(0, data.size(), samples);
        const auto noise = rng.normal({samples, data.channels(), data.image_size(), data.image_size()});
        double pre = 0.0, shifted = 0.0;
        for (int64_t start = 0; start < samples; start += batch) {
            const int64_t len = std::min(batch, samples - start);
            const auto id = idx.narrow(0, start, len);
            const auto x0 = data.images.index_select(0, id);
            const auto labels = label_head ? data.labels.index_select(0, id) : torch::Tensor();
            const auto xt = q_sample(x0, t, noise.narrow(0, start, len), s);
            const auto mu_true = true_posterior_mean(x0, xt, t, s);
            const auto [eps_hat, g] = eps_and_shift(b, xt, timestep_tensor(t, len), x0, labels);
            const auto mu = predicted_mean_from_eps(xt, t, eps_hat, s);
            const auto gp = per_element_sq(mu_true, mu);
            pre += gp.sum().item<double>();
            if (g.defined()) {
                shifted += per_element_sq(mu_true, mu + s.posterior_var(t) * g).sum().item<double>();
            } else {
                shifted += gp.sum().item<double>();
            }
        }
        c.t.push_back(t);
        c.gap_pre.push_back(pre / static_cast<double>(samples));
        c.gap_shift.push_back(shifted / static_cast<double>(samples));
    }
    return c;
}

void write_gap_csv(std::ostream& out, const GapCurve& c) {
    out << "t,gap_pre,gap_shift\n";
    for (std::size_t i = 0; i < c.size(); ++i) {
        out << fmt::format("{},{:.9g},{:.9g}\n", c.t[i], c.gap_pre[i], c.gap_shift[i]);
    }
}

torch::Tensor OneStepGrid::tiles() const {
    const int64_t n = pretrained.size(0);
    std::vector<torch::Tensor> rows;
    for (int64_t i = 0; i < n; ++i) {
        rows.push_back(pretrained[i]);
        rows.push_back(shifted[i]);
    }
    return torch::cat(rows, 0);
}

OneStepGrid one_step_grid(const ModelBundle& b, const torch::Tensor& x0, const torch::Tensor& labels,
                          const std::vector<Timestep>& ts, uint64_t seed) {
    if (!b.eps || !b.estimator) {
        throw ConfigError("one-step grids need an eps-network and a gradient estimator");
    }
    if (x0.dim() != 4 || x0.size(0) < 1 || ts.empty()) {
        throw ValidationError("one-step grid needs images [N, C, H, W] and at least one t");
    }
    const auto& s = b.schedule;
    torch::NoGradGuard ng;
    OneStepGrid g;
    g.t = ts;
    std::vector<torch::Tensor> pre, shf;
    for (const Timestep t : ts) {
        s.check_step(t);
        Rng rng(mix_seed(seed, static_cast<uint64_t>(t)));
        const auto xt = q_sample(x0, t, rng.normal_like(x0), s);
        const auto [eps_hat, gr] = eps_and_shift(b, xt, timestep_tensor(t, x0.size(0)), x0, labels);
        const auto a = one_step_x0(xt, t, eps_hat, s);
        const auto c = one_step_x0(xt, t, eps_hat - gap_fill_factor(s, t) * gr, s);
        g.mse_pretrained.push_back(per_element_sq(a, x0).mean().item<double>());
        g.mse_shifted.push_back(per_element_sq(c, x0).mean().item<double>());
        pre.push_back(a);
        shf.push_back(c);
    }
    g.pretrained = torch::stack(pre, 1);
    g.shifted = torch::stack(shf, 1);
    return g;
}

torch::Tensor ssim_per_image(const torch::Tensor& a, const torch::Tensor& b) {
    check_same_shape(a, b, "ssim");
    if (a.dim() != 4) {
        throw ValidationError("SSIM expects [N, C, H, W]");
    }
    const int64_t c = a.size(1);
    const int64_t win = std::min<int64_t>({7, a.size(2), a.size(3)});
    const auto w = gaussian_window(win, 1.5).view({1, 1, win, win}).repeat({c, 1, 1, 1});
    const auto x = (a.to(torch::kFloat64) + 1.0) * 0.5;
    const auto y = (b.to(torch::kFloat64) + 1.0) * 0.5;
    auto filt = [&](const torch::Tensor& v) { return torch::conv2d(v, w, torch::Tensor(), at::IntArrayRef{1}, at::IntArrayRef{0}, at::IntArrayRef{1}, c); };
    const auto mx = filt(x);
    const auto my = filt(y);
    const auto sxx = filt(x * x) - mx * mx;
    const auto syy = filt(y * y) - my * my;
    const auto sxy = filt(x * y) - mx * my;
    constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    const auto map = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
    return map.flatten(1).mean(1);
}

ReconMetrics recon_metrics(const torch::Tensor& a, const torch::Tensor& b) {
    check_same_shape(a, b, "recon_metrics");
    if (a.dim() != 4 || a.size(0) < 1) {
        throw ValidationError("recon_metrics expects a nonempty [N, C, H, W] batch");
    }
    torch::NoGradGuard ng;
    ReconMetrics m;
    // Differences on the [0, 1] scale are half those on [-1, 1].
    m.mse = (per_element_sq(a, b) * 0.25).mean().item<double>();
    m.ssim = ssim_per_image(a, b).mean().item<double>();
    return m;
}

StageSearch grid_search_critical_stage(const StageAccuracy& accuracy, int total_steps, int stride, double threshold,
                                       bool exhaustive) {
    if (stride < 1 || stride > total_steps) {
        throw ValidationError(fmt::format("grid stride {} must lie in [1, {}]", stride, total_steps));
    }
    StageSearch r;
    for (int len = 0; len <= total_steps; len += stride) {
        for (int t1 = 0; t1 + len <= total_steps; t1 += stride) {
            const StageSplit split{t1, t1 + len};
            const double acc = accuracy(split);
            r.table.push_back({split, acc});
            if (!r.best && acc >= threshold) {
                r.best = split;
                r.best_accuracy = acc;
                if (!exhaustive) {
                    return r;
                }
            }
        }
    }
    return r;
}

StageEvaluator::StageEvaluator(EpsModel eps, GradModel grad, SamplerPlan plan, NoiseSchedule s, torch::Tensor x_T,
                               Probe probe, const Rng& rng)
    : eps_(std::move(eps)), grad_(std::move(grad)), plan_(std::move(plan)), s_(std::move(s)), probe_(std::move(probe)) {
    plan_.validate(s_);
    cache_.resize(plan_.sequence.size());
    rng_cache_.resize(plan_.sequence.size());
    cache_.back() = std::move(x_T);
    rng_cache_.back() = rng.clone();
}

int64_t StageEvaluator::index_of(Timestep t) const {
    const auto it = std::lower_bound(plan_.sequence.begin(), plan_.sequence.end(), t);
    if (it == plan_.sequence.end() || *it != t) {
        throw ValidationError(fmt::format("timestep {} is not on the sampling sequence", t));
    }
    return it - plan_.sequence.begin();
}

torch::Tensor StageEvaluator::unguided_state(int64_t i) {
    if (cache_[static_cast<std::size_t>(i)].defined()) {
        return cache_[static_cast<std::size_t>(i)];
    }
    int64_t j = i + 1;
    while (!cache_[static_cast<std::size_t>(j)].defined()) {
        ++j;
    }
    for (; j > i; --j) {
        auto r = rng_cache_[static_cast<std::size_t>(j)]->clone();
        cache_[static_cast<std::size_t>(j - 1)] =
            run_sampler_range(eps_, {}, cache_[static_cast<std::size_t>(j)], plan_, s_, r, {}, j, j - 1);
        rng_cache_[static_cast<std::size_t>(j - 1)] = std::move(r);
    }
    return cache_[static_cast<std::size_t>(i)];
}

double StageEvaluator::operator()(const StageSplit& split) {
    split.validate(s_.steps());
    const int64_t i1 = index_of(split.t1);
    const int64_t i2 = index_of(split.t2);
    ++evaluations_;
    if (i1 == i2) {
        return probe_(unguided_state(0));
    }
    const auto start = unguided_state(i2);
    auto r = rng_cache_[static_cast<std::size_t>(i2)]->clone();
    const auto x = run_sampler_range(eps_, grad_, start, plan_, s_, r,
                                     [split](int64_t, Timestep t) { return split.contains(t); }, i2, 0);
    return probe_(x);
}

void write_stage_csv(std::ostream& out, const StageSearch& r) {
    out << "t1,t2,accuracy\n";
    for (const auto& e : r.table) {
        out << fmt::format("{},{},{:.6g}\n", e.split.t1, e.split.t2, e.accuracy);
    }
}

void write_curve_csv(std::ostream& out, const EvalCurve& c) {
    out << "step,loss\n";
    for (std::size_t i = 0; i < c.images.size(); ++i) {
        out << fmt::format("{},{:.9g}\n", c.images[i], c.loss[i]);
    }
}

double bayes_eps_loss(const MixtureOracle& oracle, const Dataset& data, const NoiseSchedule& s,
                      const EvalDraws& draws, bool conditional) {
    if (oracle.size() != data.size()) {
        throw ValidationError("the oracle must be built on the evaluation dataset");
    }
    if (conditional && !oracle.has_labels()) {
        throw ValidationError("a conditional Bayes loss needs a labelled oracle");
    }
    std::vector<MixtureOracle> per_class;
    if (conditional) {
        for (int64_t y = 0; y < oracle.num_classes(); ++y) {
            per_class.push_back(oracle.restrict_to_class(y));
        }
    }
    torch::NoGradGuard ng;
    const int64_t n = draws.index.size(0);
    const auto idx = draws.index.contiguous();
    const auto ts = draws.t.contiguous();
    double total = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const int64_t k = idx[i].item<int64_t>();
        const auto t = static_cast<Timestep>(ts[i].item<int64_t>());
        const auto eps = draws.eps.narrow(0, i, 1);
        const auto xt = q_sample(data.images.narrow(0, k, 1), t, eps, s);
        const auto& o = conditional ? per_class[static_cast<std::size_t>(oracle.labels()[static_cast<std::size_t>(k)])]
                                    : oracle;
        total += per_element_sq(o.optimal_eps(xt, t), eps).item<double>();
    }
    return total / static_cast<double>(n);
}

LossComparison loss_comparison(EpsNet& uncond, EpsNet& cond, const Dataset& data, const NoiseSchedule& s,
                               const EvalDraws& draws, const MixtureOracle* oracle) {
    LossComparison r;
    r.unconditional = eval_eps_loss(uncond, data, s, draws);
    r.conditional = eval_eps_loss(cond, data, s, draws);
    if (oracle) {
        if (oracle->schedule().steps() != s.steps() || oracle->schedule().beta(s.steps()) != s.beta(s.steps())) {
            throw ValidationError("oracle and evaluation schedules differ");
        }
        r.bayes_unconditional = bayes_eps_loss(*oracle, data, s, draws, false);
        r.bayes_conditional = bayes_eps_loss(*oracle, data, s, draws, true);
    }
    return r;
}

double empirical_w2(const torch::Tensor& a, const torch::Tensor& b) {
    if (a.size(0) != b.size(0) || a.size(0) < 1) {
        throw ValidationError("W2 needs two nonempty sets of equal size");
    }
    const int64_t n = a.size(0);
    const auto fa = a.reshape({n, -1}).to(torch::kFloat64);
    const auto fb = b.reshape({n, -1}).to(torch::kFloat64);
    if (fa.size(1) != fb.size(1)) {
        throw ValidationError("W2 needs points of equal dimension");
    }
    const auto d = torch::cdist(fa, fb).pow(2).contiguous();
    std::vector<double> cost(d.data_ptr<double>(), d.data_ptr<double>() + n * n);
    return assignment_cost(cost, n) / static_cast<double>(n);
}

}  // namespace pdae
