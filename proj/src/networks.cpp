#include "pdae/networks.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <zlib.h>

#include "pdae/errors.hpp"

namespace pdae {

namespace nn = torch::nn;

namespace {

bool contains(const std::vector<int64_t>& v, int64_t x) {
    return std::find(v.begin(), v.end(), x) != v.end();
}

void check_groups(int64_t channels, int64_t groups) {
    if (groups < 1 || channels % groups != 0) {
        throw ValidationError(fmt::format("{} channels not divisible into {} groups", channels, groups));
    }
}

void validate_ladder(int64_t image_size, const std::vector<int64_t>& multipliers,
                     const std::vector<int64_t>& attention, int64_t base, int64_t groups,
                     const char* what) {
    if (multipliers.empty()) {
        throw ValidationError(fmt::format("{}: channel multipliers must be nonempty", what));
    }
    if (image_size < 1 || base < 1) {
        throw ValidationError(fmt::format("{}: image size and base channels must be positive", what));
    }
    const int64_t factor = int64_t{1} << (multipliers.size() - 1);
    if (image_size % factor != 0) {
        throw ValidationError(fmt::format("{}: image size {} not divisible by {}", what, image_size, factor));
    }
    for (int64_t m : multipliers) {
        if (m < 1) {
            throw ValidationError(fmt::format("{}: channel multiplier {} must be positive", what, m));
        }
        check_groups(base * m, groups);
    }
    std::vector<int64_t> ladder;
    for (std::size_t i = 0; i < multipliers.size(); ++i) {
        ladder.push_back(image_size >> i);
    }
    for (int64_t r : attention) {
        if (!contains(ladder, r)) {
            throw ValidationError(fmt::format("{}: attention resolution {} is not on the downsampling ladder", what, r));
        }
    }
}

nn::Conv2d conv3(int64_t in, int64_t out, int64_t stride = 1) {
    return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

nn::GroupNorm group_norm(int64_t groups, int64_t channels, bool affine = true) {
    return nn::GroupNorm(nn::GroupNormOptions(groups, channels).affine(affine));
}

void zero_init(nn::Conv2d& c) {
    torch::NoGradGuard guard;
    c->weight.zero_();
    if (c->bias.defined()) {
        c->bias.zero_();
    }
}

class UpsampleImpl : public nn::Module {
public:
    explicit UpsampleImpl(int64_t channels) : conv_(register_module("conv", conv3(channels, channels))) {}
    torch::Tensor forward(const torch::Tensor& x) {
        auto up = torch::nn::functional::interpolate(
            x, torch::nn::functional::InterpolateFuncOptions()
                   .scale_factor(std::vector<double>{2.0, 2.0})
                   .mode(torch::kNearest));
        return conv_->forward(up);
    }

private:
    nn::Conv2d conv_;
};
TORCH_MODULE(Upsample);

// Decoder ladder shared by the eps-network and the gradient estimator. Consumes `skips` in reverse.
void build_up_path(nn::ModuleList& up, const std::vector<int64_t>& multipliers, int64_t base,
                   int64_t image_size, const std::vector<int64_t>& attention, int64_t res_blocks,
                   std::vector<int64_t> skips, int64_t ch, int64_t emb_dim, int64_t groups,
                   double dropout, int64_t cond_dim) {
    for (int64_t level = static_cast<int64_t>(multipliers.size()) - 1; level >= 0; --level) {
        const int64_t out = base * multipliers[level];
        const bool attn = contains(attention, image_size >> level);
        for (int64_t r = 0; r <= res_blocks; ++r) {
            const int64_t skip_ch = skips.back();
            skips.pop_back();
            up->push_back(Stage(ch + skip_ch, out, emb_dim, groups, dropout, attn, cond_dim));
            ch = out;
        }
        if (level > 0) {
            up->push_back(Upsample(ch));
        }
    }
}

torch::Tensor run_up_path(nn::ModuleList& up, torch::Tensor h, std::vector<torch::Tensor> skips,
                          const torch::Tensor& emb, const torch::Tensor& cond) {
    for (const auto& m : *up) {
        if (auto* stage = m->as<StageImpl>()) {
            h = stage->forward(torch::cat({h, skips.back()}, 1), emb, cond);
            skips.pop_back();
        } else {
            h = m->as<UpsampleImpl>()->forward(h);
        }
    }
    return h;
}

}  // namespace

std::vector<int64_t> EpsNetSpec::resolutions() const {
    std::vector<int64_t> out;
    for (std::size_t i = 0; i < channel_multipliers.size(); ++i) {
        out.push_back(image_size >> i);
    }
    return out;
}

void EpsNetSpec::validate() const {
    if (image_channels < 1 || time_embed_dim < 2 || res_blocks < 1) {
        throw ValidationError("eps-net spec needs positive channels, time_embed_dim >= 2, res_blocks >= 1");
    }
    if (dropout < 0.0 || dropout >= 1.0) {
        throw ValidationError(fmt::format("dropout {} outside [0, 1)", dropout));
    }
    if (num_classes < 0) {
        throw ValidationError("num_classes must be >= 0");
    }
    validate_ladder(image_size, channel_multipliers, attention_resolutions, base_channels,
                    groupnorm_groups, "eps-net");
}

void EncoderSpec::validate() const {
    if (image_channels < 1 || z_dim < 1) {
        throw ValidationError("encoder spec needs positive image channels and z_dim");
    }
    validate_ladder(image_size, channel_multipliers, attention_resolutions, base_channels,
                    groupnorm_groups, "encoder");
}

void GradientEstimatorSpec::validate() const {
    if (z_dim < 1 || num_classes < 0) {
        throw ValidationError("gradient estimator spec needs z_dim >= 1 and num_classes >= 0");
    }
}

void LatentDenoiserSpec::validate() const {
    if (z_dim < 1 || hidden < 1 || layers < 1 || time_embed_dim < 2) {
        throw ValidationError("latent denoiser spec needs positive sizes and time_embed_dim >= 2");
    }
}

torch::Tensor timestep_features(const torch::Tensor& t, int64_t dim) {
    const int64_t half = dim / 2;
    const auto freqs = torch::exp(-std::log(10000.0) *
                                  torch::arange(half, torch::kFloat64) / static_cast<double>(half));
    const auto args = t.to(torch::kFloat64).unsqueeze(1) * freqs.unsqueeze(0);
    auto feats = torch::cat({torch::cos(args), torch::sin(args)}, 1);
    if (dim % 2 == 1) {
        feats = torch::cat({feats, torch::zeros({t.size(0), 1}, torch::kFloat64)}, 1);
    }
    return feats;
}

torch::Tensor adagn(const torch::Tensor& h, int64_t groups, const torch::Tensor& t_scale,
                    const torch::Tensor& t_shift, const torch::Tensor& z_scale,
                    const torch::Tensor& z_shift) {
    const int64_t c = h.size(1);
    for (const auto* m : {&t_scale, &t_shift, &z_scale, &z_shift}) {
        if (m->dim() != 2 || m->size(0) != h.size(0) || m->size(1) != c) {
            throw ValidationError(fmt::format("adagn modulation shape {} does not match [B={}, C={}]",
                                              fmt::join(m->sizes(), "x"), h.size(0), c));
        }
    }
    check_groups(c, groups);
    const auto expand = [](const torch::Tensor& m) { return m.unsqueeze(-1).unsqueeze(-1); };
    const auto normed = torch::group_norm(h, groups);
    return expand(z_scale) * (expand(t_scale) * normed + expand(t_shift)) + expand(z_shift);
}

ResBlockImpl::ResBlockImpl(int64_t in_ch, int64_t out_ch, int64_t emb_dim, int64_t groups,
                           double dropout, int64_t cond_dim)
    : groups_(groups), adaptive_(cond_dim > 0) {
    check_groups(in_ch, groups);
    check_groups(out_ch, groups);
    in_norm_ = register_module("in_norm", group_norm(groups, in_ch));
    in_conv_ = register_module("in_conv", conv3(in_ch, out_ch));
    if (emb_dim > 0) {
        emb_proj_ = register_module("emb_proj", nn::Linear(emb_dim, 2 * out_ch));
    }
    if (adaptive_) {
        cond_proj_ = register_module("cond_proj", nn::Linear(cond_dim, 2 * out_ch));
    }
    out_norm_ = register_module("out_norm", group_norm(groups, out_ch, !adaptive_));
    drop_ = register_module("drop", nn::Dropout(dropout));
    out_conv_ = register_module("out_conv", conv3(out_ch, out_ch));
    if (in_ch != out_ch) {
        skip_ = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in_ch, out_ch, 1)));
    }
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& emb,
                                    const torch::Tensor& cond) {
    auto h = in_conv_->forward(torch::silu(in_norm_->forward(x)));
    if (adaptive_) {
        if (!cond.defined()) {
            throw ValidationError("adaptive residual block called without a condition");
        }
        auto t_mod = emb_proj_->forward(torch::silu(emb)).chunk(2, 1);
        auto z_mod = cond_proj_->forward(torch::silu(cond)).chunk(2, 1);
        h = adagn(h, groups_, 1.0 + t_mod[0], t_mod[1], 1.0 + z_mod[0], z_mod[1]);
    } else if (emb_proj_) {
        auto t_mod = emb_proj_->forward(torch::silu(emb)).chunk(2, 1);
        h = out_norm_->forward(h) * (1.0 + t_mod[0].unsqueeze(-1).unsqueeze(-1)) +
            t_mod[1].unsqueeze(-1).unsqueeze(-1);
    } else {
        h = out_norm_->forward(h);
    }
    h = out_conv_->forward(drop_->forward(torch::silu(h)));
    return (skip_ ? skip_->forward(x) : x) + h;
}

AttentionBlockImpl::AttentionBlockImpl(int64_t channels, int64_t groups) {
    norm_ = register_module("norm", group_norm(groups, channels));
    qkv_ = register_module("qkv", nn::Conv2d(nn::Conv2dOptions(channels, 3 * channels, 1)));
    proj_ = register_module("proj", nn::Conv2d(nn::Conv2dOptions(channels, channels, 1)));
}

torch::Tensor AttentionBlockImpl::forward(const torch::Tensor& x) {
    const int64_t b = x.size(0), c = x.size(1), hw = x.size(2) * x.size(3);
    auto qkv = qkv_->forward(norm_->forward(x)).reshape({b, 3, c, hw});
    auto q = qkv.select(1, 0), k = qkv.select(1, 1), v = qkv.select(1, 2);
    auto w = torch::softmax(torch::bmm(q.transpose(1, 2), k) / std::sqrt(static_cast<double>(c)), -1);
    auto out = torch::bmm(v, w.transpose(1, 2)).reshape(x.sizes());
    return x + proj_->forward(out);
}

StageImpl::StageImpl(int64_t in_ch, int64_t out_ch, int64_t emb_dim, int64_t groups,
                     double dropout, bool attention, int64_t cond_dim) {
    block_ = register_module("block", ResBlock(in_ch, out_ch, emb_dim, groups, dropout, cond_dim));
    if (attention) {
        attn_ = register_module("attn", AttentionBlock(out_ch, groups));
    }
}

torch::Tensor StageImpl::forward(const torch::Tensor& x, const torch::Tensor& emb,
                                 const torch::Tensor& cond) {
    auto h = block_->forward(x, emb, cond);
    return attn_ ? attn_->forward(h) : h;
}

EpsNetImpl::EpsNetImpl(EpsNetSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    const int64_t base = spec_.base_channels;
    const int64_t emb = spec_.time_embed_dim;
    const int64_t groups = spec_.groupnorm_groups;
    time_mlp_ = register_module("time_mlp", nn::Sequential(nn::Linear(base, emb), nn::SiLU(),
                                                           nn::Linear(emb, emb)));
    if (spec_.num_classes > 0) {
        class_embed_ = register_module("class_embed", nn::Embedding(spec_.num_classes, emb));
    }
    in_conv_ = register_module("in_conv", conv3(spec_.image_channels, base));
    down_ = register_module("down", nn::ModuleList());
    int64_t ch = base;
    skip_channels_.push_back(ch);
    const auto& mults = spec_.channel_multipliers;
    for (std::size_t level = 0; level < mults.size(); ++level) {
        const int64_t out = base * mults[level];
        const bool attn = contains(spec_.attention_resolutions, spec_.image_size >> level);
        for (int64_t r = 0; r < spec_.res_blocks; ++r) {
            down_->push_back(Stage(ch, out, emb, groups, spec_.dropout, attn));
            ch = out;
            skip_channels_.push_back(ch);
        }
        if (level + 1 < mults.size()) {
            down_->push_back(conv3(ch, ch, 2));
            skip_channels_.push_back(ch);
        }
    }
    mid_a_ = register_module("mid_a", Stage(ch, ch, emb, groups, spec_.dropout, false));
    mid_attn_ = register_module("mid_attn", AttentionBlock(ch, groups));
    mid_b_ = register_module("mid_b", Stage(ch, ch, emb, groups, spec_.dropout, false));
    up_ = register_module("up", nn::ModuleList());
    build_up_path(up_, mults, base, spec_.image_size, spec_.attention_resolutions, spec_.res_blocks,
                  skip_channels_, ch, emb, groups, spec_.dropout, 0);
    out_norm_ = register_module("out_norm", group_norm(groups, base));
    out_conv_ = register_module("out_conv", conv3(base, spec_.image_channels));
    zero_init(out_conv_);
}

void EpsNetImpl::check_input(const torch::Tensor& xt, const torch::Tensor& t) const {
    if (xt.dim() != 4 || xt.size(1) != spec_.image_channels || xt.size(2) != spec_.image_size ||
        xt.size(3) != spec_.image_size) {
        throw ValidationError(fmt::format("expected input [B, {}, {}, {}], got [{}]", spec_.image_channels,
                                          spec_.image_size, spec_.image_size, fmt::join(xt.sizes(), ", ")));
    }
    if (t.dim() != 1 || t.size(0) != xt.size(0) || t.scalar_type() != torch::kLong) {
        throw ValidationError("timesteps must be an int64 tensor of shape [B]");
    }
}

DownFeatures EpsNetImpl::encode_features(const torch::Tensor& xt, const torch::Tensor& t,
                                         const torch::Tensor& labels) {
    check_input(xt, t);
    const auto dtype = in_conv_->weight.scalar_type();
    DownFeatures f;
    f.emb = time_mlp_->forward(timestep_features(t, spec_.base_channels).to(dtype));
    if (spec_.num_classes > 0) {
        if (!labels.defined() || labels.dim() != 1 || labels.size(0) != xt.size(0)) {
            throw ValidationError("label-conditioned eps-net needs int64 labels of shape [B]");
        }
        if (labels.min().item<int64_t>() < 0 || labels.max().item<int64_t>() >= spec_.num_classes) {
            throw ValidationError("label out of range");
        }
        f.emb = f.emb + class_embed_->forward(labels);
    }
    auto h = in_conv_->forward(xt);
    f.skips.push_back(h);
    for (const auto& m : *down_) {
        if (auto* stage = m->as<StageImpl>()) {
            h = stage->forward(h, f.emb);
        } else {
            h = m->as<nn::Conv2dImpl>()->forward(h);
        }
        f.skips.push_back(h);
    }
    f.h = h;
    return f;
}

torch::Tensor EpsNetImpl::decode(const DownFeatures& f) {
    auto h = mid_a_->forward(f.h, f.emb);
    h = mid_b_->forward(mid_attn_->forward(h), f.emb);
    h = run_up_path(up_, h, f.skips, f.emb, {});
    return out_conv_->forward(torch::silu(out_norm_->forward(h)));
}

torch::Tensor EpsNetImpl::forward(const torch::Tensor& xt, const torch::Tensor& t,
                                  const torch::Tensor& labels) {
    return decode(encode_features(xt, t, labels));
}

EncoderImpl::EncoderImpl(EncoderSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    const int64_t base = spec_.base_channels;
    const int64_t groups = spec_.groupnorm_groups;
    in_conv_ = register_module("in_conv", conv3(spec_.image_channels, base));
    blocks_ = register_module("blocks", nn::ModuleList());
    int64_t ch = base;
    const auto& mults = spec_.channel_multipliers;
    for (std::size_t level = 0; level < mults.size(); ++level) {
        const int64_t out = base * mults[level];
        blocks_->push_back(ResBlock(ch, out, 0, groups, 0.0));
        ch = out;
        if (contains(spec_.attention_resolutions, spec_.image_size >> level)) {
            blocks_->push_back(AttentionBlock(ch, groups));
        }
        if (level + 1 < mults.size()) {
            blocks_->push_back(conv3(ch, ch, 2));
        }
    }
    out_norm_ = register_module("out_norm", group_norm(groups, ch));
    head_ = register_module("head", nn::Linear(ch, spec_.z_dim));
}

torch::Tensor EncoderImpl::forward(const torch::Tensor& x0) {
    if (x0.dim() != 4 || x0.size(1) != spec_.image_channels || x0.size(2) != spec_.image_size ||
        x0.size(3) != spec_.image_size) {
        throw ValidationError(fmt::format("encoder expected [B, {}, {}, {}], got [{}]", spec_.image_channels,
                                          spec_.image_size, spec_.image_size, fmt::join(x0.sizes(), ", ")));
    }
    auto h = in_conv_->forward(x0);
    for (const auto& m : *blocks_) {
        if (auto* block = m->as<ResBlockImpl>()) {
            h = block->forward(h, {});
        } else if (auto* attn = m->as<AttentionBlockImpl>()) {
            h = attn->forward(h);
        } else {
            h = m->as<nn::Conv2dImpl>()->forward(h);
        }
    }
    h = torch::silu(out_norm_->forward(h)).mean({2, 3});
    return head_->forward(h);
}

GradientEstimatorImpl::GradientEstimatorImpl(EpsNet frozen, GradientEstimatorSpec spec)
    : eps_(std::move(frozen)), spec_(spec), cond_dim_(spec.z_dim) {
    if (!eps_) {
        throw ConfigError("gradient estimator needs a pretrained eps-network");
    }
    spec_.validate();
    set_requires_grad(*eps_, false);
    const auto& es = eps_->spec();
    const int64_t emb = es.time_embed_dim;
    const int64_t groups = es.groupnorm_groups;
    if (spec_.num_classes > 0) {
        class_embed_ = register_module("class_embed", nn::Embedding(spec_.num_classes, spec_.z_dim));
    }
    const int64_t ch = es.base_channels * es.channel_multipliers.back();
    mid_a_ = register_module("mid_a", Stage(ch, ch, emb, groups, es.dropout, false, cond_dim_));
    mid_attn_ = register_module("mid_attn", AttentionBlock(ch, groups));
    mid_b_ = register_module("mid_b", Stage(ch, ch, emb, groups, es.dropout, false, cond_dim_));
    up_ = register_module("up", nn::ModuleList());
    build_up_path(up_, es.channel_multipliers, es.base_channels, es.image_size,
                  es.attention_resolutions, es.res_blocks, eps_->skip_channels(), ch, emb, groups,
                  es.dropout, cond_dim_);
    out_norm_ = register_module("out_norm", group_norm(groups, es.base_channels));
    out_conv_ = register_module("out_conv", conv3(es.base_channels, es.image_channels));
    zero_init(out_conv_);
}

torch::Tensor GradientEstimatorImpl::embed_condition(const torch::Tensor& cond) {
    if (spec_.num_classes > 0) {
        if (cond.dim() != 1 || cond.scalar_type() != torch::kLong) {
            throw ValidationError("label head expects int64 labels of shape [B]");
        }
        if (cond.numel() > 0 &&
            (cond.min().item<int64_t>() < 0 || cond.max().item<int64_t>() >= spec_.num_classes)) {
            throw ValidationError("label out of range");
        }
        return class_embed_->forward(cond);
    }
    if (cond.dim() != 2 || cond.size(1) != spec_.z_dim) {
        throw ValidationError(fmt::format("latent code must be [B, {}], got [{}]", spec_.z_dim,
                                          fmt::join(cond.sizes(), ", ")));
    }
    return cond;
}

torch::Tensor GradientEstimatorImpl::forward_features(const DownFeatures& f, const torch::Tensor& cond) {
    const auto c = embed_condition(cond);
    if (c.size(0) != f.h.size(0)) {
        throw ValidationError("condition batch does not match input batch");
    }
    auto h = mid_a_->forward(f.h, f.emb, c);
    h = mid_b_->forward(mid_attn_->forward(h), f.emb, c);
    h = run_up_path(up_, h, f.skips, f.emb, c);
    return out_conv_->forward(torch::silu(out_norm_->forward(h)));
}

torch::Tensor GradientEstimatorImpl::forward(const torch::Tensor& xt, const torch::Tensor& t,
                                             const torch::Tensor& cond) {
    DownFeatures f;
    {
        torch::NoGradGuard guard;
        f = eps_->encode_features(xt, t);
    }
    return forward_features(f, cond);
}

LatentDenoiserImpl::LatentDenoiserImpl(LatentDenoiserSpec spec) : spec_(spec) {
    spec_.validate();
    const int64_t hid = spec_.hidden;
    const int64_t emb = spec_.time_embed_dim;
    time_mlp_ = register_module("time_mlp", nn::Sequential(nn::Linear(emb, emb), nn::SiLU(),
                                                           nn::Linear(emb, emb)));
    in_ = register_module("in", nn::Linear(spec_.z_dim, hid));
    norms_ = register_module("norms", nn::ModuleList());
    mods_ = register_module("mods", nn::ModuleList());
    linears_ = register_module("linears", nn::ModuleList());
    for (int64_t i = 0; i < spec_.layers; ++i) {
        norms_->push_back(nn::LayerNorm(nn::LayerNormOptions({hid}).elementwise_affine(false)));
        mods_->push_back(nn::Linear(emb, 2 * hid));
        linears_->push_back(nn::Linear(hid, hid));
    }
    out_norm_ = register_module("out_norm", nn::LayerNorm(nn::LayerNormOptions({hid})));
    out_ = register_module("out", nn::Linear(hid, spec_.z_dim));
    torch::NoGradGuard guard;
    out_->weight.zero_();
    out_->bias.zero_();
}

torch::Tensor LatentDenoiserImpl::forward(const torch::Tensor& zt, const torch::Tensor& t) {
    if (zt.dim() != 2 || zt.size(1) != spec_.z_dim) {
        throw ValidationError(fmt::format("latent input must be [B, {}]", spec_.z_dim));
    }
    if (t.dim() != 1 || t.size(0) != zt.size(0)) {
        throw ValidationError("timesteps must be an int64 tensor of shape [B]");
    }
    const auto dtype = in_->weight.scalar_type();
    const auto emb = time_mlp_->forward(timestep_features(t, spec_.time_embed_dim).to(dtype));
    auto h = in_->forward(zt);
    for (int64_t i = 0; i < spec_.layers; ++i) {
        auto mod = mods_[i]->as<nn::LinearImpl>()->forward(torch::silu(emb)).chunk(2, 1);
        auto a = norms_[i]->as<nn::LayerNormImpl>()->forward(h) * (1.0 + mod[0]) + mod[1];
        h = h + linears_[i]->as<nn::LinearImpl>()->forward(torch::silu(a));
    }
    return out_->forward(torch::silu(out_norm_->forward(h)));
}

std::vector<torch::Tensor> parameter_list(const torch::nn::Module& m) { return m.parameters(true); }

uint32_t parameter_checksum(const torch::nn::Module& m) {
    uLong crc = crc32(0L, Z_NULL, 0);
    const auto feed = [&crc](const std::string& name, const torch::Tensor& t) {
        crc = crc32(crc, reinterpret_cast<const Bytef*>(name.data()), static_cast<uInt>(name.size()));
        const auto c = t.detach().contiguous().cpu();
        crc = crc32(crc, static_cast<const Bytef*>(c.data_ptr()), static_cast<uInt>(c.nbytes()));
    };
    for (const auto& p : m.named_parameters(true)) {
        feed(p.key(), p.value());
    }
    for (const auto& b : m.named_buffers(true)) {
        feed(b.key(), b.value());
    }
    return static_cast<uint32_t>(crc);
}

void set_requires_grad(torch::nn::Module& m, bool flag) {
    for (auto& p : m.parameters(true)) {
        p.set_requires_grad(flag);
    }
}

int64_t parameter_count(const torch::nn::Module& m) {
    int64_t n = 0;
    for (const auto& p : m.parameters(true)) {
        n += p.numel();
    }
    return n;
}

}  // namespace pdae
