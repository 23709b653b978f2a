#pragma once

#include <map>
#include <string>

#include "pdae/checkpoint.hpp"
#include "pdae/pipelines.hpp"
#include "pdae/training.hpp"

namespace pdae {

using Meta = std::map<std::string, std::string>;

/// Checkpoint kinds written by the trainers; each file records its kind under "kind".
inline constexpr char kKindPretrained[] = "pretrained";
inline constexpr char kKindPdae[] = "pdae";
inline constexpr char kKindLatent[] = "latent";

struct StoredEps {
    EpsNet model{nullptr};
    EpsNet ema{nullptr};
    NoiseSchedule schedule;
    Meta meta;
};

void save_pretrained(const std::string& path, const PretrainResult& r, const NoiseSchedule& s, const Meta& extra = {});
StoredEps load_pretrained(const std::string& path);

/// Stores the frozen eps-network alongside the encoder and estimator so one file restores a bundle.
void save_pdae(const std::string& path, EpsNet frozen, const PdaeResult& r, const NoiseSchedule& s,
               const Meta& extra = {});
/// Eps-network, encoder (if any) and estimator; `use_ema` picks the averaged trainable weights.
ModelBundle load_bundle(const std::string& pdae_path, bool use_ema = true);
Meta load_meta(const std::string& path);

void save_latent(const std::string& path, const LatentResult& r, const NoiseSchedule& latent_schedule,
                 const Meta& extra = {});
void attach_latent(ModelBundle& b, const std::string& latent_path, bool use_ema = true);

void require_kind(const Checkpoint& c, const std::string& kind, const std::string& origin);

}  // namespace pdae
