#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

namespace pdae {

struct EpsNetSpec {
    int64_t image_channels = 1;
    int64_t image_size = 28;
    int64_t base_channels = 32;
    std::vector<int64_t> channel_multipliers{1, 2, 4};
    std::vector<int64_t> attention_resolutions{7};
    int64_t time_embed_dim = 128;
    int64_t groupnorm_groups = 8;
    int64_t res_blocks = 1;
    double dropout = 0.0;
    // > 0 adds a class embedding to the time embedding (label-conditioned eps model).
    int64_t num_classes = 0;

    /// Spatial sizes visited by the downsampling ladder, largest first.
    std::vector<int64_t> resolutions() const;
    void validate() const;
};

struct EncoderSpec {
    int64_t image_channels = 1;
    int64_t image_size = 28;
    int64_t base_channels = 32;
    std::vector<int64_t> channel_multipliers{1, 2, 4};
    std::vector<int64_t> attention_resolutions{};
    int64_t groupnorm_groups = 8;
    int64_t z_dim = 64;

    void validate() const;
};

struct GradientEstimatorSpec {
    int64_t z_dim = 64;
    // > 0 replaces the latent code input by a learned class embedding of this many labels.
    int64_t num_classes = 0;

    void validate() const;
};

struct LatentDenoiserSpec {
    int64_t z_dim = 64;
    int64_t hidden = 256;
    int64_t layers = 4;
    int64_t time_embed_dim = 64;

    void validate() const;
};

/// Sinusoidal features of integer timesteps, shape [B, dim].
torch::Tensor timestep_features(const torch::Tensor& t, int64_t dim);

/// z_scale * (t_scale * GroupNorm(h) + t_shift) + z_shift, with every modulation of shape [B, C].
torch::Tensor adagn(const torch::Tensor& h, int64_t groups, const torch::Tensor& t_scale,
                    const torch::Tensor& t_shift, const torch::Tensor& z_scale,
                    const torch::Tensor& z_shift);

class ResBlockImpl : public torch::nn::Module {
public:
    /// cond_dim > 0 switches the output normalization to AdaGN driven by a second embedding.
    ResBlockImpl(int64_t in_ch, int64_t out_ch, int64_t emb_dim, int64_t groups, double dropout,
                 int64_t cond_dim = 0);

    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb,
                          const torch::Tensor& cond = {});

private:
    int64_t groups_;
    bool adaptive_;
    torch::nn::GroupNorm in_norm_{nullptr};
    torch::nn::Conv2d in_conv_{nullptr};
    torch::nn::Linear emb_proj_{nullptr};
    torch::nn::Linear cond_proj_{nullptr};
    torch::nn::GroupNorm out_norm_{nullptr};
    torch::nn::Dropout drop_{nullptr};
    torch::nn::Conv2d out_conv_{nullptr};
    torch::nn::Conv2d skip_{nullptr};
};
TORCH_MODULE(ResBlock);

class AttentionBlockImpl : public torch::nn::Module {
public:
    AttentionBlockImpl(int64_t channels, int64_t groups);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::GroupNorm norm_{nullptr};
    torch::nn::Conv2d qkv_{nullptr};
    torch::nn::Conv2d proj_{nullptr};
};
TORCH_MODULE(AttentionBlock);

/// One stage of a U-Net: a residual block optionally followed by attention.
class StageImpl : public torch::nn::Module {
public:
    StageImpl(int64_t in_ch, int64_t out_ch, int64_t emb_dim, int64_t groups, double dropout,
              bool attention, int64_t cond_dim = 0);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb,
                          const torch::Tensor& cond = {});

private:
    ResBlock block_{nullptr};
    AttentionBlock attn_{nullptr};
};
TORCH_MODULE(Stage);

/// Output of the eps-network's time embedding and downsampling half.
struct DownFeatures {
    torch::Tensor emb;
    std::vector<torch::Tensor> skips;
    torch::Tensor h;
};

class EpsNetImpl : public torch::nn::Module {
public:
    explicit EpsNetImpl(EpsNetSpec spec);

    const EpsNetSpec& spec() const { return spec_; }

    /// t is an int64 tensor of shape [B]; labels are required iff the spec has classes.
    torch::Tensor forward(const torch::Tensor& xt, const torch::Tensor& t,
                          const torch::Tensor& labels = {});

    DownFeatures encode_features(const torch::Tensor& xt, const torch::Tensor& t,
                                 const torch::Tensor& labels = {});
    torch::Tensor decode(const DownFeatures& f);

    void check_input(const torch::Tensor& xt, const torch::Tensor& t) const;

    /// Channel count after each recorded skip, in push order.
    const std::vector<int64_t>& skip_channels() const { return skip_channels_; }

private:
    EpsNetSpec spec_;
    std::vector<int64_t> skip_channels_;
    torch::nn::Sequential time_mlp_{nullptr};
    torch::nn::Embedding class_embed_{nullptr};
    torch::nn::Conv2d in_conv_{nullptr};
    torch::nn::ModuleList down_{nullptr};
    Stage mid_a_{nullptr};
    AttentionBlock mid_attn_{nullptr};
    Stage mid_b_{nullptr};
    torch::nn::ModuleList up_{nullptr};
    torch::nn::GroupNorm out_norm_{nullptr};
    torch::nn::Conv2d out_conv_{nullptr};
};
TORCH_MODULE(EpsNet);

/// Semantic encoder: GN-SiLU-conv blocks with stride-2 downsampling, pooled into a linear map.
class EncoderImpl : public torch::nn::Module {
public:
    explicit EncoderImpl(EncoderSpec spec);
    const EncoderSpec& spec() const { return spec_; }
    torch::Tensor forward(const torch::Tensor& x0);

private:
    EncoderSpec spec_;
    torch::nn::Conv2d in_conv_{nullptr};
    torch::nn::ModuleList blocks_{nullptr};
    torch::nn::GroupNorm out_norm_{nullptr};
    torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(Encoder);

/// Decoder half trained on top of a frozen eps-network. The eps-network is held but not registered,
/// so parameters() lists only the new blocks.
class GradientEstimatorImpl : public torch::nn::Module {
public:
    GradientEstimatorImpl(EpsNet frozen, GradientEstimatorSpec spec);

    const GradientEstimatorSpec& spec() const { return spec_; }
    EpsNet eps() const { return eps_; }

    /// cond is z [B, z_dim] or, for a label head, int64 labels [B].
    torch::Tensor forward(const torch::Tensor& xt, const torch::Tensor& t, const torch::Tensor& cond);
    /// Same estimate from precomputed (frozen) down-path features.
    torch::Tensor forward_features(const DownFeatures& f, const torch::Tensor& cond);

private:
    torch::Tensor embed_condition(const torch::Tensor& cond);

    EpsNet eps_;
    GradientEstimatorSpec spec_;
    int64_t cond_dim_;
    torch::nn::Embedding class_embed_{nullptr};
    Stage mid_a_{nullptr};
    AttentionBlock mid_attn_{nullptr};
    Stage mid_b_{nullptr};
    torch::nn::ModuleList up_{nullptr};
    torch::nn::GroupNorm out_norm_{nullptr};
    torch::nn::Conv2d out_conv_{nullptr};
};
TORCH_MODULE(GradientEstimator);

/// Residual MLP over normalized latent codes, predicting the noise.
class LatentDenoiserImpl : public torch::nn::Module {
public:
    explicit LatentDenoiserImpl(LatentDenoiserSpec spec);
    const LatentDenoiserSpec& spec() const { return spec_; }
    torch::Tensor forward(const torch::Tensor& zt, const torch::Tensor& t);

private:
    LatentDenoiserSpec spec_;
    torch::nn::Sequential time_mlp_{nullptr};
    torch::nn::Linear in_{nullptr};
    torch::nn::ModuleList norms_{nullptr};
    torch::nn::ModuleList mods_{nullptr};
    torch::nn::ModuleList linears_{nullptr};
    torch::nn::LayerNorm out_norm_{nullptr};
    torch::nn::Linear out_{nullptr};
};
TORCH_MODULE(LatentDenoiser);

/// Parameters of `m` in registration order.
std::vector<torch::Tensor> parameter_list(const torch::nn::Module& m);
/// CRC-32 over the raw bytes of every parameter and buffer of `m`.
uint32_t parameter_checksum(const torch::nn::Module& m);
void set_requires_grad(torch::nn::Module& m, bool flag);
int64_t parameter_count(const torch::nn::Module& m);

}  // namespace pdae
