#include "toy.hpp"

#include <fstream>

#include <fmt/ranges.h>
#include <zlib.h>

#include "pdae/store.hpp"

namespace pdae::acceptance {

namespace {

Dataset mixture(int64_t points, int64_t classes, double spread, uint64_t seed) {
    MixtureSpec m;
    m.points = points;
    m.classes = classes;
    m.image_size = 8;
    m.spread = spread;
    Rng rng(seed);
    return make_synthetic_mixture(m, rng);
}

uint32_t crc(const std::string& s, uint32_t seed = 0) {
    return static_cast<uint32_t>(
        crc32(seed, reinterpret_cast<const Bytef*>(s.data()), static_cast<uInt>(s.size())));
}

uint32_t tensor_crc(const torch::Tensor& t) {
    const auto c = t.contiguous();
    return static_cast<uint32_t>(crc32(0, static_cast<const Bytef*>(c.data_ptr()),
                                       static_cast<uInt>(c.numel() * c.element_size())));
}

std::string describe(const TrainConfig& c) {
    return fmt::format("b{} lr{} n{} ema{} w{}:{} seed{} clip{}", c.batch_size, c.learning_rate, c.total_images,
                       c.ema_decay, static_cast<int>(c.weight.kind), c.weight.gamma, c.seed, c.grad_clip);
}

std::string describe(const EpsNetSpec& s) {
    return fmt::format("eps {} {} {} [{}] [{}] {} {} {} {}", s.image_channels, s.image_size, s.base_channels,
                       fmt::join(s.channel_multipliers, ","), fmt::join(s.attention_resolutions, ","),
                       s.time_embed_dim, s.groupnorm_groups, s.res_blocks, s.num_classes);
}

std::filesystem::path cache_file(const Options& o, const std::string& name, const std::string& key) {
    const auto dir = o.cache / "toy";
    std::filesystem::create_directories(dir);
    return dir / fmt::format("{}-{:08x}.ckpt", name, crc(key));
}

}  // namespace

NoiseSchedule toy_schedule() { return make_linear_schedule(1000); }
Dataset four_point_set() { return mixture(4, 2, 0.25, 21); }
Dataset ten_class_set() { return mixture(100, 10, 0.3, 22); }
Dataset two_class_set() { return mixture(64, 2, 0.3, 23); }

MixtureOracle oracle_for(const Dataset& d) { return MixtureOracle(d.images, d.labels, toy_schedule()); }

EpsNetSpec toy_eps_spec(int64_t num_classes) {
    EpsNetSpec s;
    s.image_size = 8;
    s.base_channels = 16;
    s.channel_multipliers = {1, 2};
    s.attention_resolutions = {};
    s.time_embed_dim = 64;
    s.num_classes = num_classes;
    return s;
}

EncoderSpec toy_encoder_spec() {
    EncoderSpec s;
    s.image_size = 8;
    s.base_channels = 16;
    s.channel_multipliers = {1, 2};
    s.z_dim = 16;
    return s;
}

TrainConfig toy_config(int64_t images, uint64_t seed, WeightScheme w) {
    TrainConfig c;
    c.batch_size = 64;
    c.learning_rate = 5e-4;
    c.total_images = images;
    c.ema_decay = 0.995;
    c.weight = w;
    c.seed = seed;
    c.log_every = 20;
    return c;
}

EpsNet cached_eps(const Options& o, const std::string& name, const Dataset& data, const EpsNetSpec& spec,
                  const TrainConfig& cfg) {
    const auto key = fmt::format("{}|{}|{:08x}|{:08x}", describe(spec), describe(cfg), tensor_crc(data.images),
                                 data.has_labels() ? tensor_crc(data.labels) : 0u);
    const auto path = cache_file(o, name, key);
    if (!std::filesystem::exists(path)) {
        note("training {} on {} images", name, cfg.total_images);
        const auto r = pretrain_ddpm(data, spec, toy_schedule(), cfg);
        save_pretrained(path.string(), r, toy_schedule(), {{"key", key}});
        std::ofstream out(path.string() + ".loss.csv");
        write_loss_csv(out, r.log);
    }
    auto net = load_pretrained(path.string()).ema;
    net->eval();
    return net;
}

ModelBundle cached_pdae(const Options& o, const std::string& name, const Dataset& data, EpsNet pretrained,
                        const EncoderSpec& enc, const GradientEstimatorSpec& g, const TrainConfig& cfg,
                        bool use_ema) {
    const auto key = fmt::format("{}|{:08x}|enc {} {} [{}] {}|g {} {}|{:08x}|{:08x}", describe(cfg),
                                 parameter_checksum(*pretrained), enc.base_channels, enc.image_size,
                                 fmt::join(enc.channel_multipliers, ","), enc.z_dim, g.z_dim, g.num_classes,
                                 tensor_crc(data.images), data.has_labels() ? tensor_crc(data.labels) : 0u);
    const auto path = cache_file(o, name, key);
    if (!std::filesystem::exists(path)) {
        note("gap training {} on {} images", name, cfg.total_images);
        const auto r = train_pdae(data, pretrained, enc, g, toy_schedule(), cfg);
        save_pdae(path.string(), pretrained, r, toy_schedule(), {{"key", key}});
        std::ofstream out(path.string() + ".loss.csv");
        write_loss_csv(out, r.log);
    }
    return load_bundle(path.string(), use_ema);
}

EpsNet ten_class_eps(const Options& o, bool conditional) {
    return cached_eps(o, conditional ? "ten-class-cond-eps" : "ten-class-eps", ten_class_set(),
                      toy_eps_spec(conditional ? 10 : 0), toy_config(200'000, 52, WeightScheme::simple()));
}

ModelBundle ten_class_label_head(const Options& o) {
    GradientEstimatorSpec g;
    g.num_classes = 10;
    return cached_pdae(o, "ten-class-label", ten_class_set(), ten_class_eps(o, false), toy_encoder_spec(), g,
                       toy_config(200'000, 53, WeightScheme::pdae(0.1)));
}

EpsNet two_class_eps(const Options& o) {
    return cached_eps(o, "two-class-eps", two_class_set(), toy_eps_spec(), toy_config(128'000, 41, WeightScheme::simple()));
}

ModelBundle two_class_autoencoder(const Options& o, const WeightScheme& w) {
    GradientEstimatorSpec g;
    g.z_dim = toy_encoder_spec().z_dim;
    return cached_pdae(o, w.kind == WeightKind::Simple ? "two-class-ae-simple" : "two-class-ae", two_class_set(),
                       two_class_eps(o), toy_encoder_spec(), g, toy_config(128'000, 42, w));
}

ModelBundle two_class_label_head(const Options& o) {
    GradientEstimatorSpec g;
    g.num_classes = 2;
    return cached_pdae(o, "two-class-label", two_class_set(), two_class_eps(o), toy_encoder_spec(), g,
                       toy_config(128'000, 43, WeightScheme::pdae(0.1)));
}

void attach_two_class_latent(const Options& o, ModelBundle& b) {
    Encoder enc = b.encoder;
    const auto codes = encode_dataset(enc, two_class_set());
    LatentDenoiserSpec spec;
    spec.z_dim = codes.size(1);
    spec.hidden = 128;
    spec.layers = 3;
    auto cfg = toy_config(64'000, 44, WeightScheme::simple());
    cfg.learning_rate = 1e-3;
    const auto key = fmt::format("{}|{:08x}|{} {} {}", describe(cfg), tensor_crc(codes), spec.z_dim, spec.hidden,
                                 spec.layers);
    const auto path = cache_file(o, "two-class-latent", key);
    const auto ls = make_linear_schedule(1000);
    if (!std::filesystem::exists(path)) {
        note("training latent denoiser on {} codes", codes.size(0));
        save_latent(path.string(), train_latent_dpm(codes, spec, ls, cfg), ls, {{"key", key}});
    }
    attach_latent(b, path.string());
}

EpsModel as_model(EpsNet net) {
    net->eval();
    return [net](const torch::Tensor& xt, const torch::Tensor& t) mutable {
        torch::NoGradGuard ng;
        return net->forward(xt, t);
    };
}

double nearest_label_accuracy(const MixtureOracle& oracle, const torch::Tensor& x0, const torch::Tensor& targets) {
    return oracle.nearest_label(x0).eq(targets).to(torch::kFloat64).mean().item<double>();
}

torch::Tensor oracle_class_gradient(const MixtureOracle& oracle, const torch::Tensor& xt, Timestep t,
                                    const torch::Tensor& targets) {
    auto out = torch::zeros(xt.sizes(), torch::kFloat64);
    for (int64_t y = 0; y < oracle.num_classes(); ++y) {
        const auto idx = targets.eq(y).nonzero().flatten();
        if (idx.numel() == 0) {
            continue;
        }
        out.index_copy_(0, idx, oracle.class_gradient(xt.index_select(0, idx), t, y));
    }
    return out.to(xt.scalar_type());
}

}  // namespace pdae::acceptance
