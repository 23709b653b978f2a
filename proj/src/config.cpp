#include "pdae/config.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "pdae/errors.hpp"

extern char** environ;

namespace pdae {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) {
        return "";
    }
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) {
            out.push_back(item);
        }
    }
    return out;
}

}  // namespace

RunConfig RunConfig::defaults() {
    RunConfig c;
    c.values_ = {
        {"run.seed", "0"},
        // dataset
        {"data.kind", "synthetic-digits"},
        {"data.images", ""},
        {"data.labels", ""},
        {"data.count", "60000"},
        {"data.image_size", "28"},
        {"data.seed", "101"},
        {"data.mixture_points", "4"},
        {"data.mixture_classes", "2"},
        {"data.mixture_spread", "0.25"},
        // schedules
        {"schedule.kind", "linear"},
        {"schedule.steps", "1000"},
        {"schedule.beta_start", "0.0001"},
        {"schedule.beta_end", "0.02"},
        {"schedule.gamma", "0.1"},
        {"latent_schedule.steps", "1000"},
        {"latent_schedule.beta", "0.008"},
        // networks
        {"eps.base_channels", "32"},
        {"eps.channel_multipliers", "1,2,4"},
        {"eps.attention_resolutions", "7"},
        {"eps.time_embed_dim", "128"},
        {"eps.groupnorm_groups", "8"},
        {"eps.res_blocks", "1"},
        {"eps.dropout", "0"},
        {"eps.num_classes", "0"},
        {"encoder.base_channels", "32"},
        {"encoder.channel_multipliers", "1,2,4"},
        {"encoder.attention_resolutions", ""},
        {"encoder.groupnorm_groups", "8"},
        {"encoder.z_dim", "64"},
        {"estimator.num_classes", "0"},
        {"latent.hidden", "256"},
        {"latent.layers", "4"},
        {"latent.time_embed_dim", "64"},
        // training
        {"train.batch_size", "64"},
        {"train.learning_rate", "0.0001"},
        {"train.total_images", "1000000"},
        {"train.ema_decay", "0.999"},
        {"train.weight", "pdae"},
        {"train.grad_clip", "1"},
        {"train.adam_beta1", "0.9"},
        {"train.adam_beta2", "0.999"},
        {"train.adam_eps", "1e-8"},
        {"train.log_every", "50"},
        {"train.checksum_every", "200"},
        // checkpoints
        {"model.pretrained", ""},
        {"model.pdae", ""},
        {"model.latent", ""},
        {"model.use_ema", "true"},
        // sampling
        {"sample.method", "ddim"},
        {"sample.steps", "100"},
        {"sample.eta", "0"},
        {"sample.guidance_scale", "1"},
        {"sample.guided_fraction", "1"},
        {"sample.fraction_mode", "steps"},
        {"sample.count", "16"},
        {"sample.inferred_xt", "true"},
        {"sample.grid_columns", "8"},
        // pipelines
        {"input.count", "8"},
        {"input.offset", "0"},
        {"interpolate.mode", "latent"},
        {"interpolate.lambdas", "0,0.25,0.5,0.75,1"},
        {"classifier.steps", "1000"},
        {"classifier.learning_rate", "0.05"},
        {"classifier.batch_size", "64"},
        {"classifier.oversample_positive", "false"},
        {"classifier.positive_label", "1"},
        {"classifier.labeled", "0"},
        {"manipulate.negative_label", "0"},
        {"manipulate.scales", "-2,-1,0,1,2"},
        {"fewshot.label", "1"},
        {"fewshot.acceptance_floor", "0.001"},
        {"fewshot.proposal_batch", "256"},
        {"improved.guided_fraction", "0.7"},
        {"truncation.label", "0"},
        {"truncation.scales", "0,0.5,1,1.5,2,2.5,3"},
        // evaluation
        {"gap.samples", "1000"},
        {"gap.stride", "0"},
        {"gap.batch", "256"},
        {"gap.one_step_t", "50,100,200,300,400,500,600,700,800,900"},
        {"gap.one_step_images", "6"},
        {"grid.stride", "50"},
        {"grid.threshold", "0.9"},
        {"grid.samples", "200"},
        {"grid.scale", "1"},
        {"grid.exhaustive", "false"},
    };
    return c;
}

void RunConfig::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError(fmt::format("cannot open config {}", path));
    }
    std::stringstream ss;
    ss << in.rdbuf();
    load_text(ss.str(), path);
}

void RunConfig::load_text(const std::string& text, const std::string& origin) {
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const auto body = trim(line);
        if (body.empty() || body[0] == '#') {
            continue;
        }
        const auto eq = body.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(fmt::format("{}:{}: expected 'key = value'", origin, lineno));
        }
        const auto key = trim(body.substr(0, eq));
        if (!has(key)) {
            throw ConfigError(fmt::format("{}:{}: unknown key '{}'", origin, lineno, key));
        }
        values_[key] = trim(body.substr(eq + 1));
    }
}

std::string RunConfig::env_name(const std::string& key, const std::string& prefix) {
    std::string name = prefix;
    for (char ch : key) {
        name += (ch == '.' || ch == '-') ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    }
    return name;
}

void RunConfig::apply_env(const std::string& prefix) {
    std::map<std::string, std::string> by_env;
    for (const auto& [key, value] : values_) {
        by_env[env_name(key, prefix)] = key;
    }
    for (char** e = environ; e && *e; ++e) {
        const std::string entry(*e);
        if (entry.rfind(prefix, 0) != 0) {
            continue;
        }
        const auto eq = entry.find('=');
        const auto name = entry.substr(0, eq);
        const auto it = by_env.find(name);
        if (it == by_env.end()) {
            throw ConfigError(fmt::format("environment variable {} names no config key", name));
        }
        values_[it->second] = eq == std::string::npos ? "" : trim(entry.substr(eq + 1));
    }
}

void RunConfig::set(const std::string& key, const std::string& value) {
    if (!has(key)) {
        throw ConfigError(fmt::format("unknown key '{}'", key));
    }
    values_[key] = trim(value);
}

const std::string& RunConfig::get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) {
        throw ConfigError(fmt::format("unknown key '{}'", key));
    }
    return it->second;
}

int64_t RunConfig::get_int(const std::string& key) const {
    const auto& v = get(key);
    try {
        std::size_t used = 0;
        const int64_t out = std::stoll(v, &used);
        if (used == v.size()) {
            return out;
        }
    } catch (const std::exception&) {
    }
    throw ConfigError(fmt::format("{} = '{}' is not an integer", key, v));
}

double RunConfig::get_double(const std::string& key) const {
    const auto& v = get(key);
    try {
        std::size_t used = 0;
        const double out = std::stod(v, &used);
        if (used == v.size()) {
            return out;
        }
    } catch (const std::exception&) {
    }
    throw ConfigError(fmt::format("{} = '{}' is not a number", key, v));
}

bool RunConfig::get_bool(const std::string& key) const {
    const auto& v = get(key);
    if (v == "true" || v == "1" || v == "yes") {
        return true;
    }
    if (v == "false" || v == "0" || v == "no") {
        return false;
    }
    throw ConfigError(fmt::format("{} = '{}' is not a boolean", key, v));
}

std::vector<int64_t> RunConfig::get_ints(const std::string& key) const {
    std::vector<int64_t> out;
    for (const auto& item : split_list(get(key))) {
        try {
            std::size_t used = 0;
            out.push_back(std::stoll(item, &used));
            if (used != item.size()) {
                throw std::invalid_argument(item);
            }
        } catch (const std::exception&) {
            throw ConfigError(fmt::format("{} holds '{}', expected integers", key, item));
        }
    }
    return out;
}

std::vector<double> RunConfig::get_doubles(const std::string& key) const {
    std::vector<double> out;
    for (const auto& item : split_list(get(key))) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) {
                throw std::invalid_argument(item);
            }
        } catch (const std::exception&) {
            throw ConfigError(fmt::format("{} holds '{}', expected numbers", key, item));
        }
    }
    return out;
}

std::string RunConfig::dump() const {
    std::string out;
    for (const auto& [k, v] : values_) {
        out += fmt::format("{} = {}\n", k, v);
    }
    return out;
}

}  // namespace pdae
