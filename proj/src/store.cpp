#include "pdae/store.hpp"

#include <fmt/format.h>

#include "pdae/errors.hpp"

namespace pdae {

namespace {

void merge_meta(Checkpoint& c, const Meta& extra) {
    for (const auto& [k, v] : extra) {
        c.meta.emplace(k, v);
    }
}

}  // namespace

void require_kind(const Checkpoint& c, const std::string& kind, const std::string& origin) {
    if (!c.has("kind") || c.get("kind") != kind) {
        throw ConfigError(fmt::format("{} is not a {} checkpoint", origin, kind));
    }
}

void save_pretrained(const std::string& path, const PretrainResult& r, const NoiseSchedule& s, const Meta& extra) {
    Checkpoint c;
    c.meta["kind"] = kKindPretrained;
    put_schedule(c, "schedule.", s);
    put_spec(c, "eps.", r.model->spec());
    put_module(c, "eps.raw.", *r.model);
    put_module(c, "eps.ema.", *r.ema);
    merge_meta(c, extra);
    save_checkpoint(path, c);
}

StoredEps load_pretrained(const std::string& path) {
    const auto c = load_checkpoint(path);
    require_kind(c, kKindPretrained, path);
    StoredEps out;
    out.schedule = get_schedule(c, "schedule.");
    const auto spec = get_eps_spec(c, "eps.");
    out.model = EpsNet(spec);
    out.ema = EpsNet(spec);
    get_module(c, "eps.raw.", *out.model);
    get_module(c, "eps.ema.", *out.ema);
    out.meta = c.meta;
    return out;
}

void save_pdae(const std::string& path, EpsNet frozen, const PdaeResult& r, const NoiseSchedule& s, const Meta& extra) {
    Checkpoint c;
    c.meta["kind"] = kKindPdae;
    c.meta["frozen_checksum"] = fmt::format("{:08x}", r.frozen_checksum);
    put_schedule(c, "schedule.", s);
    put_spec(c, "eps.", frozen->spec());
    put_module(c, "eps.", *frozen);
    c.meta["has_encoder"] = r.encoder ? "1" : "0";
    if (r.encoder) {
        put_spec(c, "encoder.", r.encoder->spec());
        put_module(c, "encoder.raw.", *r.encoder);
        put_module(c, "encoder.ema.", *r.ema_encoder);
    }
    put_spec(c, "estimator.", r.estimator->spec());
    put_module(c, "estimator.raw.", *r.estimator);
    put_module(c, "estimator.ema.", *r.ema_estimator);
    merge_meta(c, extra);
    save_checkpoint(path, c);
}

ModelBundle load_bundle(const std::string& pdae_path, bool use_ema) {
    const auto c = load_checkpoint(pdae_path);
    require_kind(c, kKindPdae, pdae_path);
    ModelBundle b;
    b.schedule = get_schedule(c, "schedule.");
    b.eps = EpsNet(get_eps_spec(c, "eps."));
    get_module(c, "eps.", *b.eps);
    b.eps->eval();
    set_requires_grad(*b.eps, false);
    if (fmt::format("{:08x}", parameter_checksum(*b.eps)) != c.get("frozen_checksum")) {
        throw IntegrityError(fmt::format("{}: stored eps-network differs from the one the estimator was trained on",
                                         pdae_path));
    }
    const std::string which = use_ema ? "ema." : "raw.";
    if (c.get("has_encoder") == "1") {
        b.encoder = Encoder(get_encoder_spec(c, "encoder."));
        get_module(c, "encoder." + which, *b.encoder);
        b.encoder->eval();
    }
    b.estimator = GradientEstimator(b.eps, get_estimator_spec(c, "estimator."));
    get_module(c, "estimator." + which, *b.estimator);
    b.estimator->eval();
    return b;
}

Meta load_meta(const std::string& path) { return load_checkpoint(path).meta; }

void save_latent(const std::string& path, const LatentResult& r, const NoiseSchedule& latent_schedule,
                 const Meta& extra) {
    Checkpoint c;
    c.meta["kind"] = kKindLatent;
    put_schedule(c, "schedule.", latent_schedule);
    put_spec(c, "latent.", r.model->spec());
    put_module(c, "latent.raw.", *r.model);
    put_module(c, "latent.ema.", *r.ema);
    c.tensors["stats.mean"] = r.stats.mean.to(torch::kFloat32);
    c.tensors["stats.std"] = r.stats.std.to(torch::kFloat32);
    c.meta["stats.degenerate_dims"] = std::to_string(r.stats.degenerate_dims);
    merge_meta(c, extra);
    save_checkpoint(path, c);
}

void attach_latent(ModelBundle& b, const std::string& latent_path, bool use_ema) {
    const auto c = load_checkpoint(latent_path);
    require_kind(c, kKindLatent, latent_path);
    const auto spec = get_latent_spec(c, "latent.");
    if (b.estimator && b.estimator->spec().z_dim != spec.z_dim) {
        throw ConfigError(fmt::format("latent model has z_dim {}, estimator expects {}", spec.z_dim,
                                      b.estimator->spec().z_dim));
    }
    b.latent_schedule = get_schedule(c, "schedule.");
    b.latent = LatentDenoiser(spec);
    get_module(c, use_ema ? "latent.ema." : "latent.raw.", *b.latent);
    b.latent->eval();
    LatentStats st;
    st.mean = c.tensors.at("stats.mean");
    st.std = c.tensors.at("stats.std");
    st.degenerate_dims = std::stoll(c.get("stats.degenerate_dims"));
    b.latent_stats = st;
}

}  // namespace pdae
