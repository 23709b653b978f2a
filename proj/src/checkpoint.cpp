#include "pdae/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <zlib.h>

#include "pdae/errors.hpp"

namespace pdae {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

class Writer {
public:
    void u32(uint32_t v) { raw(&v, 4); }
    void i64(int64_t v) { raw(&v, 8); }
    void str(const std::string& s) {
        u32(static_cast<uint32_t>(s.size()));
        out_.append(s);
    }
    void raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
    std::string& bytes() { return out_; }

private:
    std::string out_;
};

class Reader {
public:
    Reader(const std::string& bytes, std::size_t end, std::string origin)
        : bytes_(bytes), end_(end), origin_(std::move(origin)) {}

    uint32_t u32() {
        uint32_t v;
        raw(&v, 4);
        return v;
    }
    int64_t i64() {
        int64_t v;
        raw(&v, 8);
        return v;
    }
    std::string str() {
        const uint32_t n = u32();
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    void raw(void* p, std::size_t n) {
        need(n);
        std::memcpy(p, bytes_.data() + pos_, n);
        pos_ += n;
    }
    bool done() const { return pos_ == end_; }

private:
    void need(std::size_t n) const {
        if (pos_ + n > end_) {
            throw FormatError(fmt::format("{}: truncated checkpoint", origin_));
        }
    }
    const std::string& bytes_;
    std::size_t end_;
    std::size_t pos_ = 0;
    std::string origin_;
};

std::string fmt_double(double v) { return fmt::format("{:.17g}", v); }

int64_t to_int(const std::string& s, const std::string& key) {
    try {
        std::size_t used = 0;
        const auto v = std::stoll(s, &used);
        if (used != s.size()) {
            throw std::invalid_argument(s);
        }
        return v;
    } catch (const std::exception&) {
        throw FormatError(fmt::format("checkpoint key {} holds '{}', expected an integer", key, s));
    }
}

double to_double(const std::string& s, const std::string& key) {
    try {
        std::size_t used = 0;
        const auto v = std::stod(s, &used);
        if (used != s.size()) {
            throw std::invalid_argument(s);
        }
        return v;
    } catch (const std::exception&) {
        throw FormatError(fmt::format("checkpoint key {} holds '{}', expected a number", key, s));
    }
}

}  // namespace

const std::string& Checkpoint::get(const std::string& key) const {
    const auto it = meta.find(key);
    if (it == meta.end()) {
        throw ConfigError(fmt::format("checkpoint lacks key '{}'", key));
    }
    return it->second;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
    Writer w;
    w.raw(kCheckpointMagic, 5);
    w.u32(kCheckpointVersion);
    w.u32(static_cast<uint32_t>(ckpt.meta.size()));
    for (const auto& [k, v] : ckpt.meta) {
        w.str(k);
        w.str(v);
    }
    w.u32(static_cast<uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
        const auto data = t.detach().to(torch::kCPU, torch::kFloat32).contiguous();
        w.str(name);
        w.u32(static_cast<uint32_t>(data.dim()));
        for (int64_t d : data.sizes()) {
            w.i64(d);
        }
        w.raw(data.data_ptr<float>(), static_cast<std::size_t>(data.numel()) * sizeof(float));
    }
    auto& bytes = w.bytes();
    const uint32_t crc = static_cast<uint32_t>(
        crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
    w.u32(crc);
    return std::move(bytes);
}

Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& origin) {
    if (bytes.size() < 5 + 4 + 4 || std::memcmp(bytes.data(), kCheckpointMagic, 5) != 0) {
        throw FormatError(fmt::format("{}: not a PDAE1 checkpoint", origin));
    }
    const std::size_t body = bytes.size() - 4;
    uint32_t stored;
    std::memcpy(&stored, bytes.data() + body, 4);
    const uint32_t actual = static_cast<uint32_t>(
        crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(body)));
    if (stored != actual) {
        throw IntegrityError(fmt::format("{}: checksum mismatch (stored {:08x}, computed {:08x})", origin, stored, actual));
    }
    Reader r(bytes, body, origin);
    char magic[5];
    r.raw(magic, 5);
    const uint32_t version = r.u32();
    if (version != kCheckpointVersion) {
        throw FormatError(fmt::format("{}: unsupported checkpoint version {}", origin, version));
    }
    Checkpoint ckpt;
    const uint32_t n_meta = r.u32();
    for (uint32_t i = 0; i < n_meta; ++i) {
        auto k = r.str();
        ckpt.meta[k] = r.str();
    }
    const uint32_t n_tensors = r.u32();
    for (uint32_t i = 0; i < n_tensors; ++i) {
        auto name = r.str();
        const uint32_t ndim = r.u32();
        std::vector<int64_t> dims(ndim);
        int64_t numel = 1;
        for (auto& d : dims) {
            d = r.i64();
            if (d < 0) {
                throw FormatError(fmt::format("{}: negative dimension in tensor {}", origin, name));
            }
            numel *= d;
        }
        auto t = torch::empty(dims, torch::kFloat32);
        r.raw(t.data_ptr<float>(), static_cast<std::size_t>(numel) * sizeof(float));
        ckpt.tensors[name] = t;
    }
    if (!r.done()) {
        throw FormatError(fmt::format("{}: trailing bytes after tensor table", origin));
    }
    return ckpt;
}

void write_file_atomic(const std::string& path, const std::string& contents) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw FormatError(fmt::format("cannot write {}", tmp));
        }
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        out.flush();
        if (!out) {
            throw FormatError(fmt::format("short write to {}", tmp));
        }
    }
    std::filesystem::rename(tmp, path);
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError(fmt::format("cannot open checkpoint {}", path));
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return deserialize_checkpoint(ss.str(), path);
}

void put_module(Checkpoint& ckpt, const std::string& prefix, const torch::nn::Module& m) {
    for (const auto& p : m.named_parameters(true)) {
        ckpt.tensors[prefix + p.key()] = p.value().detach().to(torch::kFloat32).clone();
    }
    for (const auto& b : m.named_buffers(true)) {
        ckpt.tensors[prefix + b.key()] = b.value().detach().to(torch::kFloat32).clone();
    }
}

void get_module(const Checkpoint& ckpt, const std::string& prefix, torch::nn::Module& m) {
    torch::NoGradGuard guard;
    const auto copy_in = [&](const std::string& name, torch::Tensor& dst) {
        const auto it = ckpt.tensors.find(prefix + name);
        if (it == ckpt.tensors.end()) {
            throw ConfigError(fmt::format("checkpoint lacks tensor '{}{}'", prefix, name));
        }
        if (it->second.sizes() != dst.sizes()) {
            throw ConfigError(fmt::format("tensor '{}{}' has the wrong shape", prefix, name));
        }
        dst.copy_(it->second);
    };
    for (auto& p : m.named_parameters(true)) {
        copy_in(p.key(), p.value());
    }
    for (auto& b : m.named_buffers(true)) {
        copy_in(b.key(), b.value());
    }
}

std::string join_ints(const std::vector<int64_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        s += (i ? "," : "") + std::to_string(v[i]);
    }
    return s;
}

std::vector<int64_t> split_ints(const std::string& s) {
    std::vector<int64_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto b = item.find_first_not_of(" \t");
        if (b == std::string::npos) {
            continue;
        }
        const auto e = item.find_last_not_of(" \t");
        out.push_back(to_int(item.substr(b, e - b + 1), s));
    }
    return out;
}

void put_schedule(Checkpoint& ckpt, const std::string& prefix, const NoiseSchedule& s) {
    ckpt.meta[prefix + "kind"] = s.kind() == ScheduleKind::Linear ? "linear" : "constant";
    ckpt.meta[prefix + "steps"] = std::to_string(s.steps());
    ckpt.meta[prefix + "beta_start"] = fmt_double(s.beta_start());
    ckpt.meta[prefix + "beta_end"] = fmt_double(s.beta_end());
}

NoiseSchedule get_schedule(const Checkpoint& ckpt, const std::string& prefix) {
    const auto& kind = ckpt.get(prefix + "kind");
    const int steps = static_cast<int>(to_int(ckpt.get(prefix + "steps"), prefix + "steps"));
    const double start = to_double(ckpt.get(prefix + "beta_start"), prefix + "beta_start");
    if (kind == "linear") {
        return make_linear_schedule(steps, start, to_double(ckpt.get(prefix + "beta_end"), prefix + "beta_end"));
    }
    if (kind == "constant") {
        return make_constant_schedule(steps, start);
    }
    throw FormatError(fmt::format("unknown schedule kind '{}'", kind));
}

void put_spec(Checkpoint& ckpt, const std::string& prefix, const EpsNetSpec& spec) {
    auto& m = ckpt.meta;
    m[prefix + "image_channels"] = std::to_string(spec.image_channels);
    m[prefix + "image_size"] = std::to_string(spec.image_size);
    m[prefix + "base_channels"] = std::to_string(spec.base_channels);
    m[prefix + "channel_multipliers"] = join_ints(spec.channel_multipliers);
    m[prefix + "attention_resolutions"] = join_ints(spec.attention_resolutions);
    m[prefix + "time_embed_dim"] = std::to_string(spec.time_embed_dim);
    m[prefix + "groupnorm_groups"] = std::to_string(spec.groupnorm_groups);
    m[prefix + "res_blocks"] = std::to_string(spec.res_blocks);
    m[prefix + "dropout"] = fmt_double(spec.dropout);
    m[prefix + "num_classes"] = std::to_string(spec.num_classes);
}

void put_spec(Checkpoint& ckpt, const std::string& prefix, const EncoderSpec& spec) {
    auto& m = ckpt.meta;
    m[prefix + "image_channels"] = std::to_string(spec.image_channels);
    m[prefix + "image_size"] = std::to_string(spec.image_size);
    m[prefix + "base_channels"] = std::to_string(spec.base_channels);
    m[prefix + "channel_multipliers"] = join_ints(spec.channel_multipliers);
    m[prefix + "attention_resolutions"] = join_ints(spec.attention_resolutions);
    m[prefix + "groupnorm_groups"] = std::to_string(spec.groupnorm_groups);
    m[prefix + "z_dim"] = std::to_string(spec.z_dim);
}

void put_spec(Checkpoint& ckpt, const std::string& prefix, const GradientEstimatorSpec& spec) {
    ckpt.meta[prefix + "z_dim"] = std::to_string(spec.z_dim);
    ckpt.meta[prefix + "num_classes"] = std::to_string(spec.num_classes);
}

void put_spec(Checkpoint& ckpt, const std::string& prefix, const LatentDenoiserSpec& spec) {
    ckpt.meta[prefix + "z_dim"] = std::to_string(spec.z_dim);
    ckpt.meta[prefix + "hidden"] = std::to_string(spec.hidden);
    ckpt.meta[prefix + "layers"] = std::to_string(spec.layers);
    ckpt.meta[prefix + "time_embed_dim"] = std::to_string(spec.time_embed_dim);
}

namespace {
int64_t geti(const Checkpoint& c, const std::string& k) { return to_int(c.get(k), k); }
}  // namespace

EpsNetSpec get_eps_spec(const Checkpoint& ckpt, const std::string& prefix) {
    EpsNetSpec s;
    s.image_channels = geti(ckpt, prefix + "image_channels");
    s.image_size = geti(ckpt, prefix + "image_size");
    s.base_channels = geti(ckpt, prefix + "base_channels");
    s.channel_multipliers = split_ints(ckpt.get(prefix + "channel_multipliers"));
    s.attention_resolutions = split_ints(ckpt.get(prefix + "attention_resolutions"));
    s.time_embed_dim = geti(ckpt, prefix + "time_embed_dim");
    s.groupnorm_groups = geti(ckpt, prefix + "groupnorm_groups");
    s.res_blocks = geti(ckpt, prefix + "res_blocks");
    s.dropout = to_double(ckpt.get(prefix + "dropout"), prefix + "dropout");
    s.num_classes = geti(ckpt, prefix + "num_classes");
    return s;
}

EncoderSpec get_encoder_spec(const Checkpoint& ckpt, const std::string& prefix) {
    EncoderSpec s;
    s.image_channels = geti(ckpt, prefix + "image_channels");
    s.image_size = geti(ckpt, prefix + "image_size");
    s.base_channels = geti(ckpt, prefix + "base_channels");
    s.channel_multipliers = split_ints(ckpt.get(prefix + "channel_multipliers"));
    s.attention_resolutions = split_ints(ckpt.get(prefix + "attention_resolutions"));
    s.groupnorm_groups = geti(ckpt, prefix + "groupnorm_groups");
    s.z_dim = geti(ckpt, prefix + "z_dim");
    return s;
}

GradientEstimatorSpec get_estimator_spec(const Checkpoint& ckpt, const std::string& prefix) {
    GradientEstimatorSpec s;
    s.z_dim = geti(ckpt, prefix + "z_dim");
    s.num_classes = geti(ckpt, prefix + "num_classes");
    return s;
}

LatentDenoiserSpec get_latent_spec(const Checkpoint& ckpt, const std::string& prefix) {
    LatentDenoiserSpec s;
    s.z_dim = geti(ckpt, prefix + "z_dim");
    s.hidden = geti(ckpt, prefix + "hidden");
    s.layers = geti(ckpt, prefix + "layers");
    s.time_embed_dim = geti(ckpt, prefix + "time_embed_dim");
    return s;
}

}  // namespace pdae
