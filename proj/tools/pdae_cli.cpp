// Command-line front end: one subcommand per pipeline, each writing a self-describing run directory.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ranges.h>
#include <torch/torch.h>

#include "pdae/config.hpp"
#include "pdae/data.hpp"
#include "pdae/errors.hpp"
#include "pdae/eval.hpp"
#include "pdae/image_io.hpp"
#include "pdae/pipelines.hpp"
#include "pdae/run_dir.hpp"
#include "pdae/schedule.hpp"
#include "pdae/store.hpp"
#include "pdae/training.hpp"

namespace fs = std::filesystem;
using namespace pdae;

namespace {

// Streams forked from the run seed, one per purpose.
enum Stream : uint64_t { kDataStream = 1, kSampleStream = 2, kClassifierStream = 3, kInputStream = 4 };

struct Context {
    RunConfig cfg;
    uint64_t seed = 0;
    RunDir* run = nullptr;
};

void log(const std::string& msg) { fmt::print(stderr, "{}\n", msg); }

NoiseSchedule schedule_from(const RunConfig& c) {
    const auto kind = c.get("schedule.kind");
    const int steps = static_cast<int>(c.get_int("schedule.steps"));
    if (kind == "linear") {
        return make_linear_schedule(steps, c.get_double("schedule.beta_start"), c.get_double("schedule.beta_end"));
    }
    if (kind == "constant") {
        return make_constant_schedule(steps, c.get_double("schedule.beta_start"));
    }
    throw ConfigError(fmt::format("schedule.kind must be linear or constant, got '{}'", kind));
}

NoiseSchedule latent_schedule_from(const RunConfig& c) {
    return make_constant_schedule(static_cast<int>(c.get_int("latent_schedule.steps")),
                                  c.get_double("latent_schedule.beta"));
}

WeightScheme weight_from(const RunConfig& c) {
    const auto w = c.get("train.weight");
    if (w == "simple") {
        return WeightScheme::simple();
    }
    if (w == "pdae") {
        return WeightScheme::pdae(c.get_double("schedule.gamma"));
    }
    throw ConfigError(fmt::format("train.weight must be simple or pdae, got '{}'", w));
}

TrainConfig train_config(const Context& ctx) {
    const auto& c = ctx.cfg;
    TrainConfig t;
    t.batch_size = c.get_int("train.batch_size");
    t.learning_rate = c.get_double("train.learning_rate");
    t.total_images = c.get_int("train.total_images");
    t.ema_decay = c.get_double("train.ema_decay");
    t.weight = weight_from(c);
    t.seed = ctx.seed;
    t.grad_clip = c.get_double("train.grad_clip");
    t.adam_beta1 = c.get_double("train.adam_beta1");
    t.adam_beta2 = c.get_double("train.adam_beta2");
    t.adam_eps = c.get_double("train.adam_eps");
    t.log_every = c.get_int("train.log_every");
    t.checksum_every = c.get_int("train.checksum_every");
    t.validate();
    return t;
}

EpsNetSpec eps_spec(const RunConfig& c, const Dataset& d) {
    EpsNetSpec s;
    s.image_channels = d.channels();
    s.image_size = d.image_size();
    s.base_channels = c.get_int("eps.base_channels");
    s.channel_multipliers = c.get_ints("eps.channel_multipliers");
    s.attention_resolutions = c.get_ints("eps.attention_resolutions");
    s.time_embed_dim = c.get_int("eps.time_embed_dim");
    s.groupnorm_groups = c.get_int("eps.groupnorm_groups");
    s.res_blocks = c.get_int("eps.res_blocks");
    s.dropout = c.get_double("eps.dropout");
    s.num_classes = c.get_int("eps.num_classes");
    s.validate();
    return s;
}

EncoderSpec encoder_spec(const RunConfig& c, const Dataset& d) {
    EncoderSpec s;
    s.image_channels = d.channels();
    s.image_size = d.image_size();
    s.base_channels = c.get_int("encoder.base_channels");
    s.channel_multipliers = c.get_ints("encoder.channel_multipliers");
    s.attention_resolutions = c.get_ints("encoder.attention_resolutions");
    s.groupnorm_groups = c.get_int("encoder.groupnorm_groups");
    s.z_dim = c.get_int("encoder.z_dim");
    s.validate();
    return s;
}

SamplerPlan plan_from(const RunConfig& c, const NoiseSchedule& s) {
    const auto m = c.get("sample.method");
    SamplerMethod method;
    if (m == "ddim") {
        method = SamplerMethod::DDIM;
    } else if (m == "ddpm") {
        method = SamplerMethod::DDPM;
    } else {
        throw ConfigError(fmt::format("sample.method must be ddim or ddpm, got '{}'", m));
    }
    auto p = make_plan(method, static_cast<int>(c.get_int("sample.steps")), s, c.get_double("sample.eta"));
    p.guidance_scale = c.get_double("sample.guidance_scale");
    p.guided_fraction = c.get_double("sample.guided_fraction");
    const auto mode = c.get("sample.fraction_mode");
    if (mode == "steps") {
        p.fraction_mode = FractionMode::Steps;
    } else if (mode == "t-range") {
        p.fraction_mode = FractionMode::TRange;
    } else {
        throw ConfigError(fmt::format("sample.fraction_mode must be steps or t-range, got '{}'", mode));
    }
    p.validate(s);
    return p;
}

void note_plan(RunDir& run, const SamplerPlan& p) {
    run.note("plan.method", p.method == SamplerMethod::DDIM ? "ddim" : "ddpm");
    run.note("plan.steps", std::to_string(p.steps()));
    run.note("plan.eta", p.eta);
    run.note("plan.guidance_scale", p.guidance_scale);
    run.note("plan.guided_fraction", p.guided_fraction);
    run.note("plan.fraction_mode", p.fraction_mode == FractionMode::Steps ? "steps" : "t-range");
}

Dataset load_dataset(const Context& ctx) {
    const auto& c = ctx.cfg;
    Rng rng(static_cast<uint64_t>(c.get_int("data.seed")));
    switch (parse_dataset_kind(c.get("data.kind"))) {
        case DatasetKind::Idx:
            if (c.get("data.images").empty()) {
                throw ConfigError("data.kind = idx needs data.images");
            }
            return load_idx(c.get("data.images"), c.get("data.labels"));
        case DatasetKind::ImageDir:
            if (c.get("data.images").empty()) {
                throw ConfigError("data.kind = image-dir needs data.images (a directory)");
            }
            return load_image_dir(c.get("data.images"));
        case DatasetKind::SyntheticMixture: {
            MixtureSpec m;
            m.points = c.get_int("data.mixture_points");
            m.classes = c.get_int("data.mixture_classes");
            m.image_size = c.get_int("data.image_size");
            m.spread = c.get_double("data.mixture_spread");
            return make_synthetic_mixture(m, rng);
        }
        case DatasetKind::SyntheticDigits:
            return make_synthetic_digits(c.get_int("data.count"), rng, c.get_int("data.image_size"));
    }
    throw ConfigError("unhandled dataset kind");
}

/// input.count images starting at input.offset.
Dataset input_slice(const Context& ctx, const Dataset& d) {
    const int64_t offset = ctx.cfg.get_int("input.offset");
    const int64_t count = ctx.cfg.get_int("input.count");
    if (offset < 0 || count < 1 || offset + count > d.size()) {
        throw ValidationError(fmt::format("input range [{}, {}) outside the dataset of {}", offset, offset + count,
                                          d.size()));
    }
    return d.subset(torch::arange(offset, offset + count, torch::kInt64));
}

const std::string& require_path(const RunConfig& c, const std::string& key) {
    const auto& p = c.get(key);
    if (p.empty()) {
        throw ConfigError(fmt::format("{} is required for this command", key));
    }
    if (!fs::exists(p)) {
        throw ConfigError(fmt::format("{} = {} does not exist", key, p));
    }
    return p;
}

ModelBundle bundle_from(const Context& ctx, bool need_latent = false) {
    const auto& c = ctx.cfg;
    const bool ema = c.get_bool("model.use_ema");
    auto b = load_bundle(require_path(c, "model.pdae"), ema);
    if (need_latent || !c.get("model.latent").empty()) {
        attach_latent(b, require_path(c, "model.latent"), ema);
    }
    ctx.run->note("model.pdae", c.get("model.pdae"));
    return b;
}

void check_images_match(const ModelBundle& b, const Dataset& d) {
    const auto& s = b.eps->spec();
    if (s.image_channels != d.channels() || s.image_size != d.image_size()) {
        throw ConfigError(fmt::format("model expects {}x{}x{} images, dataset has {}x{}x{}", s.image_channels,
                                      s.image_size, s.image_size, d.channels(), d.image_size(), d.image_size()));
    }
}

void save_images(const Context& ctx, const std::string& name, const torch::Tensor& images, int64_t nrow) {
    save_grid(ctx.run->file(name).string(), images.to(torch::kFloat32), nrow);
    ctx.run->note("output." + name, ctx.run->file(name).string());
}

void write_text(const Context& ctx, const std::string& name, const std::string& text) {
    std::ofstream out(ctx.run->file(name));
    out << text;
    if (!out) {
        throw FormatError(fmt::format("cannot write {}", ctx.run->file(name).string()));
    }
}

std::string loss_csv(const LossLog& log) {
    std::ostringstream out;
    write_loss_csv(out, log);
    return out.str();
}

TrainHook progress(const std::string& what, int64_t total_steps) {
    const auto start = std::make_shared<std::chrono::steady_clock::time_point>(std::chrono::steady_clock::now());
    return {std::max<int64_t>(1, total_steps / 20), [what, total_steps, start](int64_t step, int64_t images) {
                const double s =
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - *start).count();
                log(fmt::format("{} step {}/{} ({} images, {:.0f} img/s)", what, step, total_steps, images,
                                images / std::max(s, 1e-9)));
            }};
}

Meta config_meta(const Context& ctx, int64_t images_seen) {
    return {{"config", ctx.cfg.dump()}, {"images_seen", std::to_string(images_seen)},
            {"seed", std::to_string(ctx.seed)}};
}

/// Label of the nearest dataset image, chunked to bound memory.
torch::Tensor nearest_labels(const Dataset& data, const torch::Tensor& x) {
    const auto q = x.reshape({x.size(0), -1}).to(torch::kFloat32);
    const auto pts = data.images.reshape({data.size(), -1});
    auto best = torch::full({q.size(0)}, std::numeric_limits<float>::infinity());
    auto label = torch::zeros({q.size(0)}, torch::kInt64);
    for (int64_t i = 0; i < data.size(); i += 4096) {
        const int64_t n = std::min<int64_t>(4096, data.size() - i);
        const auto d = torch::cdist(q, pts.narrow(0, i, n));
        const auto [v, idx] = d.min(1);
        const auto better = v < best;
        best = torch::where(better, v, best);
        label = torch::where(better, data.labels.narrow(0, i, n).index_select(0, idx), label);
    }
    return label;
}

double mean_pairwise_distance(const torch::Tensor& x) {
    const auto f = x.reshape({x.size(0), -1}).to(torch::kFloat64);
    const int64_t n = f.size(0);
    if (n < 2) {
        return 0.0;
    }
    return torch::cdist(f, f).sum().item<double>() / static_cast<double>(n * (n - 1));
}

// ---- subcommands ----

void cmd_pretrain(Context& ctx) {
    const auto data = load_dataset(ctx);
    const auto s = schedule_from(ctx.cfg);
    const auto spec = eps_spec(ctx.cfg, data);
    const auto tc = train_config(ctx);
    const auto r = pretrain_ddpm(data, spec, s, tc, progress("pretrain", tc.steps()));
    const auto path = ctx.run->file("pretrained.ckpt").string();
    save_pretrained(path, r, s, config_meta(ctx, tc.steps() * tc.batch_size));
    write_text(ctx, "loss.csv", loss_csv(r.log));
    ctx.run->note("output.checkpoint", path);
    ctx.run->note("images_seen", std::to_string(tc.steps() * tc.batch_size));
    if (!r.log.empty()) {
        ctx.run->note("final_loss", r.log.back().loss);
    }
}

void cmd_pdae_train(Context& ctx) {
    const auto data = load_dataset(ctx);
    const auto& pre_path = require_path(ctx.cfg, "model.pretrained");
    auto pre = load_pretrained(pre_path);
    EpsNet frozen = ctx.cfg.get_bool("model.use_ema") ? pre.ema : pre.model;
    const auto& es = frozen->spec();
    if (es.image_channels != data.channels() || es.image_size != data.image_size()) {
        throw ConfigError(fmt::format("pretrained model expects {}x{}x{} images, dataset has {}x{}x{}",
                                      es.image_channels, es.image_size, es.image_size, data.channels(),
                                      data.image_size(), data.image_size()));
    }
    GradientEstimatorSpec gs;
    gs.z_dim = ctx.cfg.get_int("encoder.z_dim");
    gs.num_classes = ctx.cfg.get_int("estimator.num_classes");
    const auto tc = train_config(ctx);
    const auto r = train_pdae(data, frozen, encoder_spec(ctx.cfg, data), gs, pre.schedule, tc,
                              progress("pdae-train", tc.steps()));
    const auto path = ctx.run->file("pdae.ckpt").string();
    save_pdae(path, frozen, r, pre.schedule, config_meta(ctx, tc.steps() * tc.batch_size));
    write_text(ctx, "loss.csv", loss_csv(r.log));
    ctx.run->note("model.pretrained", pre_path);
    ctx.run->note("output.checkpoint", path);
    ctx.run->note("images_seen", std::to_string(tc.steps() * tc.batch_size));
    if (!r.log.empty()) {
        ctx.run->note("final_loss", r.log.back().loss);
    }
}

void cmd_latent_train(Context& ctx) {
    const auto data = load_dataset(ctx);
    auto b = bundle_from(ctx);
    b.require_autoencoder();
    check_images_match(b, data);
    Encoder enc = b.encoder;
    const auto codes = encode_dataset(enc, data);
    LatentDenoiserSpec ls;
    ls.z_dim = codes.size(1);
    ls.hidden = ctx.cfg.get_int("latent.hidden");
    ls.layers = ctx.cfg.get_int("latent.layers");
    ls.time_embed_dim = ctx.cfg.get_int("latent.time_embed_dim");
    const auto tc = train_config(ctx);
    const auto s = latent_schedule_from(ctx.cfg);
    const auto r = train_latent_dpm(codes, ls, s, tc);
    const auto path = ctx.run->file("latent.ckpt").string();
    save_latent(path, r, s, config_meta(ctx, tc.steps() * tc.batch_size));
    write_text(ctx, "loss.csv", loss_csv(r.log));
    ctx.run->note("output.checkpoint", path);
    ctx.run->note("latent.degenerate_dims", std::to_string(r.stats.degenerate_dims));
}

void cmd_encode(Context& ctx) {
    const auto data = load_dataset(ctx);
    auto b = bundle_from(ctx);
    b.require_autoencoder();
    check_images_match(b, data);
    const auto in = input_slice(ctx, data);
    const auto z = b.encode(in.images).to(torch::kFloat64);
    std::string csv = "index,label";
    for (int64_t j = 0; j < z.size(1); ++j) {
        csv += fmt::format(",z{}", j);
    }
    csv += "\n";
    const int64_t offset = ctx.cfg.get_int("input.offset");
    for (int64_t i = 0; i < z.size(0); ++i) {
        csv += fmt::format("{},{}", offset + i, in.has_labels() ? std::to_string(in.labels[i].item<int64_t>()) : "");
        for (int64_t j = 0; j < z.size(1); ++j) {
            csv += fmt::format(",{:.9g}", z[i][j].item<double>());
        }
        csv += "\n";
    }
    write_text(ctx, "codes.csv", csv);
    ctx.run->note("codes", std::to_string(z.size(0)));
}

void cmd_reconstruct(Context& ctx) {
    const auto data = load_dataset(ctx);
    auto b = bundle_from(ctx);
    check_images_match(b, data);
    const auto plan = plan_from(ctx.cfg, b.schedule);
    const auto in = input_slice(ctx, data);
    const bool inferred = ctx.cfg.get_bool("sample.inferred_xt");
    Rng rng = Rng(ctx.seed).fork(kSampleStream);
    const auto out = autoencode(b, in.images, plan, inferred, rng);
    const auto m = recon_metrics(in.images, out);
    const auto per_ssim = ssim_per_image(in.images, out);
    std::string csv = "index,mse,ssim\n";
    for (int64_t i = 0; i < out.size(0); ++i) {
        const double mse = ((in.images[i] - out[i]) * 0.5).pow(2).mean().item<double>();
        csv += fmt::format("{},{:.9g},{:.9g}\n", ctx.cfg.get_int("input.offset") + i, mse, per_ssim[i].item<double>());
    }
    write_text(ctx, "recon_metrics.csv", csv);
    save_images(ctx, "reconstruction.png", torch::cat({in.images, out.to(torch::kFloat32)}), in.size());
    note_plan(*ctx.run, plan);
    ctx.run->note("x_T", inferred ? "inferred" : "random");
    ctx.run->note("mse", m.mse);
    ctx.run->note("ssim", m.ssim);
    log(fmt::format("reconstruction mse {:.6g} ssim {:.4f}", m.mse, m.ssim));
}

void cmd_invert(Context& ctx) {
    const auto data = load_dataset(ctx);
    auto b = bundle_from(ctx);
    check_images_match(b, data);
    const auto plan = plan_from(ctx.cfg, b.schedule);
    const auto in = input_slice(ctx, data);
    const auto xT = infer_xT(b, in.images, plan);
    Rng rng = Rng(ctx.seed).fork(kSampleStream);
    const auto z = b.encode(in.images);
    const auto back = decode_latent(b, z, xT, plan, rng);
    const auto m = recon_metrics(in.images, back);
    // x_T is roughly standard normal; shown clipped to [-1, 1].
    save_images(ctx, "inversion.png", torch::cat({in.images, xT.clamp(-1, 1).to(torch::kFloat32),
                                                  back.to(torch::kFloat32)}),
                in.size());
    std::ostringstream stats;
    stats << "index,xt_mean,xt_std\n";
    for (int64_t i = 0; i < xT.size(0); ++i) {
        stats << fmt::format("{},{:.9g},{:.9g}\n", ctx.cfg.get_int("input.offset") + i, xT[i].mean().item<double>(),
                             xT[i].std().item<double>());
    }
    write_text(ctx, "inversion.csv", stats.str());
    note_plan(*ctx.run, plan);
    ctx.run->note("roundtrip_mse", m.mse);
    ctx.run->note("roundtrip_ssim", m.ssim);
}

void cmd_interpolate(Context& ctx) {
    const auto data = load_dataset(ctx);
    auto b = bundle_from(ctx);
    check_images_match(b, data);
    const auto plan = plan_from(ctx.cfg, b.schedule);
    const auto in = input_slice(ctx, data);
    if (in.size() < 2) {
        throw ValidationError("interpolation needs input.count >= 2");
    }
    const auto mode_name = ctx.cfg.get("interpolate.mode");
    InterpolationMode mode;
    if (mode_name == "latent") {
        mode = InterpolationMode::LatentLerp;
    } else if (mode_name == "direction") {
        mode = InterpolationMode::DirectionLerp;
    } else {
        throw ConfigError(fmt::format("interpolate.mode must be latent or direction, got '{}'", mode_name));
    }
    const int64_t pairs = in.size() / 2;
    const auto xa = in.images.narrow(0, 0, pairs);
    const auto xb = in.images.narrow(0, pairs, pairs);
    const auto lambdas = ctx.cfg.get_doubles("interpolate.lambdas");
    std::vector<torch::Tensor> cols;
    for (double l : lambdas) {
        cols.push_back(interpolate(b, xa, xb, l, mode, plan).to(torch::kFloat32));
    }
    // rows are pairs, columns are weights
    const auto grid = torch::stack(cols, 1).reshape({pairs * static_cast<int64_t>(lambdas.size()), in.channels(),
                                                      in.image_size(), in.image_size()});
    save_images(ctx, "interpolation.png", grid, static_cast<int64_t>(lambdas.size()));
    note_plan(*ctx.run, plan);
    ctx.run->note("interpolate.mode", mode_name);
    ctx.run->note("interpolate.lambdas", ctx.cfg.get("interpolate.lambdas"));
}

/// Normalized codes of the dataset plus the statistics used to normalize them.
std::pair<torch::Tensor, LatentStats> normalized_codes(ModelBundle& b, const Dataset& data) {
    Encoder enc = b.encoder;
    const auto codes = encode_dataset(enc, data);
    if (!b.latent_stats) {
        b.latent_stats = compute_latent_stats(codes);
    }
    return {b.latent_stats->normalize(codes), *b.latent_stats};
}

ClassifierConfig classifier_config(const Context& ctx) {
    ClassifierConfig cc;
    cc.steps = ctx.cfg.get_int("classifier.steps");
    cc.learning_rate = ctx.cfg.get_double("classifier.learning_rate");
    cc.batch_size = ctx.cfg.get_int("classifier.batch_size");
    cc.oversample_positive = ctx.cfg.get_bool("classifier.oversample_positive");
    cc.positive_label = 1;
    cc.seed = mix_seed(ctx.seed, kClassifierStream);
    return cc;
}

/// Binary labels (1 = classifier.positive_label) for the first classifier.labeled items, or all items.
std::pair<torch::Tensor, torch::Tensor> labeled_subset(const Context& ctx, const torch::Tensor& codes,
                                                        const Dataset& data, int64_t positive,
                                                        std::optional<int64_t> negative) {
    if (!data.has_labels()) {
        throw ConfigError("this command needs a labelled dataset");
    }
    int64_t n = ctx.cfg.get_int("classifier.labeled");
    if (n <= 0 || n > data.size()) {
        n = data.size();
    }
    auto z = codes.narrow(0, 0, n);
    auto y = data.labels.narrow(0, 0, n);
    if (negative) {
        const auto keep = (y == positive).logical_or(y == *negative).nonzero().flatten();
        z = z.index_select(0, keep);
        y = y.index_select(0, keep);
    }
    return {z, (y == positive).to(torch::kInt64)};
}

void cmd_manipulate(Context& ctx) {
    const auto data = load_dataset(ctx);
    auto b = bundle_from(ctx);
    b.require_autoencoder();
    check_images_match(b, data);
    const auto plan = plan_from(ctx.cfg, b.schedule);
    const auto [zn, stats] = normalized_codes(b, data);
    const int64_t pos = ctx.cfg.get_int("classifier.positive_label");
    const int64_t neg = ctx.cfg.get_int("manipulate.negative_label");
    const auto [z, y] = labeled_subset(ctx, zn, data, pos, neg);
    const auto clf = train_latent_classifier(z, y, classifier_config(ctx));
    const auto direction = clf.direction(1, 0);
    const auto in = input_slice(ctx, data);
    const auto scales = ctx.cfg.get_doubles("manipulate.scales");
    std::vector<torch::Tensor> cols;
    std::string csv = "scale,mean_logit_margin\n";
    for (double sc : scales) {
        const auto out = manipulate(b, in.images, direction, sc, plan);
        cols.push_back(out.to(torch::kFloat32));
        const auto logits = clf.logits(stats.normalize(b.encode(out)));
        csv += fmt::format("{},{:.9g}\n", sc, (logits.select(1, 1) - logits.select(1, 0)).mean().item<double>());
    }
    const auto grid = torch::stack(cols, 1).reshape(
        {in.size() * static_cast<int64_t>(scales.size()), in.channels(), in.image_size(), in.image_size()});
    save_images(ctx, "manipulation.png", grid, static_cast<int64_t>(scales.size()));
    write_text(ctx, "manipulation.csv", csv);
    note_plan(*ctx.run, plan);
    ctx.run->note("classifier.train_accuracy", clf.predict(z).eq(y).to(torch::kFloat64).mean().item<double>());
}

void cmd_sample_uncond(Context& ctx) {
    ModelBundle b;
    const auto& c = ctx.cfg;
    const bool improved = !c.get("model.latent").empty();
    if (!c.get("model.pdae").empty()) {
        b = bundle_from(ctx, improved);
    } else {
        auto pre = load_pretrained(require_path(c, "model.pretrained"));
        b.eps = c.get_bool("model.use_ema") ? pre.ema : pre.model;
        b.schedule = pre.schedule;
        ctx.run->note("model.pretrained", c.get("model.pretrained"));
    }
    auto plan = plan_from(c, b.schedule);
    Rng rng = Rng(ctx.seed).fork(kSampleStream);
    const int64_t n = c.get_int("sample.count");
    torch::Tensor x;
    if (improved) {
        plan.guided_fraction = c.get_double("improved.guided_fraction");
        x = improved_unconditional(b, plan, n, rng);
    } else {
        x = sample_unconditional(b, plan, n, rng);
    }
    save_images(ctx, "samples.png", x, c.get_int("sample.grid_columns"));
    note_plan(*ctx.run, plan);
    ctx.run->note("sampler", improved ? "improved" : "pretrained");
}

void cmd_sample_fewshot(Context& ctx) {
    const auto data = load_dataset(ctx);
    auto b = bundle_from(ctx, true);
    b.require_autoencoder();
    check_images_match(b, data);
    const auto plan = plan_from(ctx.cfg, b.schedule);
    const auto [zn, stats] = normalized_codes(b, data);
    const int64_t label = ctx.cfg.get_int("fewshot.label");
    const auto [z, y] = labeled_subset(ctx, zn, data, label, std::nullopt);
    const auto clf = train_latent_classifier(z, y, classifier_config(ctx));
    Rng rng = Rng(ctx.seed).fork(kSampleStream);
    const auto r = fewshot_conditional(b, clf, 1, ctx.cfg.get_int("sample.count"), plan, rng,
                                       ctx.cfg.get_double("fewshot.acceptance_floor"),
                                       ctx.cfg.get_int("fewshot.proposal_batch"));
    save_images(ctx, "samples.png", r.images, ctx.cfg.get_int("sample.grid_columns"));
    note_plan(*ctx.run, plan);
    ctx.run->note("fewshot.label", std::to_string(label));
    ctx.run->note("fewshot.proposed", std::to_string(r.proposed));
    ctx.run->note("fewshot.acceptance_rate", r.acceptance_rate());
    if (data.has_labels()) {
        ctx.run->note("fewshot.nearest_label_match",
                      nearest_labels(data, r.images).eq(label).to(torch::kFloat64).mean().item<double>());
    }
}

void cmd_sample_truncation(Context& ctx) {
    const auto data = load_dataset(ctx);
    auto b = bundle_from(ctx);
    const auto plan = plan_from(ctx.cfg, b.schedule);
    const int64_t label = ctx.cfg.get_int("truncation.label");
    const int64_t n = ctx.cfg.get_int("sample.count");
    std::vector<torch::Tensor> rows;
    std::string csv = "scale,label_accuracy,diversity\n";
    for (double sc : ctx.cfg.get_doubles("truncation.scales")) {
        // Same noise at every scale so rows differ only by guidance strength.
        Rng rng = Rng(ctx.seed).fork(kSampleStream);
        const auto x = truncation_sample(b, label, sc, plan, n, rng);
        rows.push_back(x.to(torch::kFloat32));
        const double acc =
            data.has_labels() ? nearest_labels(data, x).eq(label).to(torch::kFloat64).mean().item<double>() : 0.0;
        csv += fmt::format("{},{:.6g},{:.9g}\n", sc, acc, mean_pairwise_distance(x));
    }
    save_images(ctx, "truncation.png", torch::cat(rows), n);
    write_text(ctx, "truncation.csv", csv);
    note_plan(*ctx.run, plan);
    ctx.run->note("truncation.label", std::to_string(label));
}

void cmd_measure_gap(Context& ctx) {
    const auto data = load_dataset(ctx);
    auto b = bundle_from(ctx);
    check_images_match(b, data);
    int stride = static_cast<int>(ctx.cfg.get_int("gap.stride"));
    if (stride <= 0) {
        stride = default_gap_stride(b.schedule.steps());
    }
    const auto curve = measure_gap_curve(b, data, ctx.cfg.get_int("gap.samples"), stride, ctx.seed,
                                         ctx.cfg.get_int("gap.batch"));
    std::ostringstream out;
    write_gap_csv(out, curve);
    write_text(ctx, "gap_curve.csv", out.str());
    int64_t below = 0;
    for (std::size_t i = 0; i < curve.size(); ++i) {
        below += curve.gap_shift[i] <= curve.gap_pre[i] ? 1 : 0;
    }
    ctx.run->note("gap.bins", std::to_string(curve.size()));
    ctx.run->note("gap.bins_shift_not_above_pre", std::to_string(below));

    std::vector<Timestep> ts;
    for (int64_t t : ctx.cfg.get_ints("gap.one_step_t")) {
        ts.push_back(static_cast<Timestep>(t));
    }
    const int64_t k = std::min<int64_t>(ctx.cfg.get_int("gap.one_step_images"), data.size());
    const auto in = data.head(k);
    const bool label_head = b.estimator->spec().num_classes > 0;
    const auto grid = one_step_grid(b, in.images, label_head ? in.labels : torch::Tensor(), ts, ctx.seed);
    std::string csv = "t,mse_pretrained,mse_shifted\n";
    for (std::size_t i = 0; i < grid.t.size(); ++i) {
        csv += fmt::format("{},{:.9g},{:.9g}\n", grid.t[i], grid.mse_pretrained[i], grid.mse_shifted[i]);
    }
    write_text(ctx, "one_step_mse.csv", csv);
    save_images(ctx, "one_step_grid.png", grid.tiles(), static_cast<int64_t>(ts.size()));
}

void cmd_grid_search(Context& ctx) {
    const auto data = load_dataset(ctx);
    if (!data.has_labels()) {
        throw ConfigError("grid-search needs a labelled dataset for its probe");
    }
    auto b = bundle_from(ctx);
    check_images_match(b, data);
    const int64_t classes = b.estimator->spec().num_classes;
    if (classes <= 0) {
        throw ConfigError("grid-search needs a label-conditioned gradient estimator (estimator.num_classes > 0)");
    }
    const int stride = static_cast<int>(ctx.cfg.get_int("grid.stride"));
    auto plan = plan_from(ctx.cfg, b.schedule);
    for (int t = 0; t <= b.schedule.steps(); t += stride) {
        if (!std::binary_search(plan.sequence.begin(), plan.sequence.end(), t)) {
            throw ConfigError(fmt::format("sample.steps = {} does not put t = {} on the sampling sequence; use a "
                                          "multiple of T / grid.stride",
                                          plan.steps(), t));
        }
    }
    plan.guidance_scale = ctx.cfg.get_double("grid.scale");
    plan.guided_fraction = 1.0;
    const int64_t n = ctx.cfg.get_int("grid.samples");
    const auto targets = torch::arange(n, torch::kInt64).remainder(classes);
    Rng rng = Rng(ctx.seed).fork(kSampleStream);
    const auto x_T = rng.normal({n, data.channels(), data.image_size(), data.image_size()});
    StageEvaluator ev(b.eps_model(), b.estimator_model(targets), plan, b.schedule, x_T,
                      [&](const torch::Tensor& x0) {
                          return nearest_labels(data, x0).eq(targets).to(torch::kFloat64).mean().item<double>();
                      },
                      rng);
    const auto r = grid_search_critical_stage(std::ref(ev), b.schedule.steps(), stride,
                                              ctx.cfg.get_double("grid.threshold"),
                                              ctx.cfg.get_bool("grid.exhaustive"));
    std::ostringstream out;
    write_stage_csv(out, r);
    write_text(ctx, "critical_stage.csv", out.str());
    note_plan(*ctx.run, plan);
    if (r.best) {
        ctx.run->note("critical_stage", fmt::format("({}, {}]", r.best->t1, r.best->t2));
        ctx.run->note("critical_stage.accuracy", *r.best_accuracy);
        log(fmt::format("critical stage ({}, {}] with accuracy {:.3f}", r.best->t1, r.best->t2, *r.best_accuracy));
    } else {
        ctx.run->note("critical_stage", "not-found");
        log("no stage reached the threshold");
    }
}

void cmd_dump_schedule(Context& ctx) {
    const auto s = schedule_from(ctx.cfg);
    std::ostringstream out;
    write_schedule_csv(out, s, ctx.cfg.get_double("schedule.gamma"));
    write_text(ctx, "schedule.csv", out.str());
    std::cout << out.str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Diffusion autoencoder toolkit"};
    app.require_subcommand(1);
    app.fallthrough();
    std::string config_path, out_dir;
    std::optional<uint64_t> seed;
    std::vector<std::string> overrides;
    int threads = 0;
    app.add_option("--config", config_path, "Flat key = value config file")->check(CLI::ExistingFile);
    app.add_option("--seed", seed, "Run seed");
    app.add_option("--out", out_dir, "Run directory (default runs/<command>)");
    app.add_option("--set", overrides, "Config override key=value (repeatable)");
    app.add_option("--threads", threads, "Intra-op threads (0 = library default)");

    using Handler = void (*)(Context&);
    const std::vector<std::tuple<std::string, std::string, Handler>> commands{
        {"pretrain", "Train the eps-network", cmd_pretrain},
        {"pdae-train", "Train encoder and gradient estimator on a frozen eps-network", cmd_pdae_train},
        {"latent-train", "Train the latent denoiser on encoder codes", cmd_latent_train},
        {"encode", "Write latent codes of input images", cmd_encode},
        {"reconstruct", "Autoencode input images", cmd_reconstruct},
        {"invert", "Infer x_T of input images and decode back", cmd_invert},
        {"interpolate", "Interpolate between pairs of input images", cmd_interpolate},
        {"manipulate", "Move codes along a linear classifier direction", cmd_manipulate},
        {"sample-uncond", "Unconditional samples (improved when a latent model is given)", cmd_sample_uncond},
        {"sample-fewshot", "Few-shot conditional samples by rejection on latent codes", cmd_sample_fewshot},
        {"sample-truncation", "Label-guided samples over a scale sweep", cmd_sample_truncation},
        {"measure-gap", "Posterior mean gap curve and one-step reconstructions", cmd_measure_gap},
        {"grid-search", "Search the shortest guided stage reaching the accuracy threshold", cmd_grid_search},
        {"dump-schedule", "Write the noise schedule and loss weights as CSV", cmd_dump_schedule},
    };
    for (const auto& [name, help, fn] : commands) {
        app.add_subcommand(name, help);
    }
    CLI11_PARSE(app, argc, argv);

    const auto* sub = app.get_subcommands().front();
    const std::string command = sub->get_name();
    Handler handler = nullptr;
    for (const auto& [name, help, fn] : commands) {
        if (name == command) {
            handler = fn;
        }
    }

    Context ctx;
    try {
        ctx.cfg = RunConfig::defaults();
        if (!config_path.empty()) {
            ctx.cfg.load_file(config_path);
        }
        ctx.cfg.apply_env();
        for (const auto& o : overrides) {
            const auto eq = o.find('=');
            if (eq == std::string::npos) {
                throw ConfigError(fmt::format("--set expects key=value, got '{}'", o));
            }
            ctx.cfg.set(o.substr(0, eq), o.substr(eq + 1));
        }
        if (seed) {
            ctx.cfg.set("run.seed", std::to_string(*seed));
        }
        ctx.seed = static_cast<uint64_t>(ctx.cfg.get_int("run.seed"));
    } catch (const std::exception& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return 2;
    }
    if (threads > 0) {
        torch::set_num_threads(threads);
    }
    torch::manual_seed(ctx.seed);

    std::optional<RunDir> run;
    try {
        run.emplace(out_dir.empty() ? fs::path("runs") / command : fs::path(out_dir), command, ctx.cfg);
        ctx.run = &*run;
        run->note("seed", std::to_string(ctx.seed));
        if (!config_path.empty()) {
            run->note("config_file", config_path);
        }
        handler(ctx);
        run->finish();
        log(fmt::format("{} finished: {}", command, run->path().string()));
        return 0;
    } catch (const std::exception& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        if (run) {
            run->fail(e.what());
        }
        return 1;
    }
}
