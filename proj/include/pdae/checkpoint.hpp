#pragma once

#include <cstdint>
#include <map>
#include <string>

#include <torch/torch.h>

#include "pdae/networks.hpp"
#include "pdae/schedule.hpp"

namespace pdae {

inline constexpr char kCheckpointMagic[] = "PDAE1";
inline constexpr uint32_t kCheckpointVersion = 1;

/// Key-value metadata plus named float32 tensors. Both maps are sorted, so serialization is
/// canonical and save -> load -> save is byte-identical.
struct Checkpoint {
    std::map<std::string, std::string> meta;
    std::map<std::string, torch::Tensor> tensors;

    const std::string& get(const std::string& key) const;
    bool has(const std::string& key) const { return meta.count(key) != 0; }
};

/// Layout: magic, version, metadata section, tensor section, CRC-32 of all preceding bytes.
/// Integers and floats are little-endian. Written to a temporary file and renamed into place.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& origin = "<memory>");

/// Writes `contents` next to `path` and renames it over `path`.
void write_file_atomic(const std::string& path, const std::string& contents);

void put_module(Checkpoint& ckpt, const std::string& prefix, const torch::nn::Module& m);
/// Copies tensors named prefix + parameter name into `m`; missing or mis-shaped entries throw.
void get_module(const Checkpoint& ckpt, const std::string& prefix, torch::nn::Module& m);

void put_schedule(Checkpoint& ckpt, const std::string& prefix, const NoiseSchedule& s);
NoiseSchedule get_schedule(const Checkpoint& ckpt, const std::string& prefix);

void put_spec(Checkpoint& ckpt, const std::string& prefix, const EpsNetSpec& spec);
void put_spec(Checkpoint& ckpt, const std::string& prefix, const EncoderSpec& spec);
void put_spec(Checkpoint& ckpt, const std::string& prefix, const GradientEstimatorSpec& spec);
void put_spec(Checkpoint& ckpt, const std::string& prefix, const LatentDenoiserSpec& spec);
EpsNetSpec get_eps_spec(const Checkpoint& ckpt, const std::string& prefix);
EncoderSpec get_encoder_spec(const Checkpoint& ckpt, const std::string& prefix);
GradientEstimatorSpec get_estimator_spec(const Checkpoint& ckpt, const std::string& prefix);
LatentDenoiserSpec get_latent_spec(const Checkpoint& ckpt, const std::string& prefix);

std::string join_ints(const std::vector<int64_t>& v);
std::vector<int64_t> split_ints(const std::string& s);

}  // namespace pdae
