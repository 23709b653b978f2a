#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace pdae {

/// Flat `key = value` configuration over a fixed key set. Keys use section dots
/// (`train.batch_size`); lines starting with '#' are comments. Unknown keys are rejected.
class RunConfig {
public:
    /// Every known key with its default value.
    static RunConfig defaults();

    void load_file(const std::string& path);
    void load_text(const std::string& text, const std::string& origin = "<text>");
    /// Applies PDAE_<KEY> variables, where KEY is the key upper-cased with '.' and '-' mapped to '_'.
    /// A PDAE_ variable naming no key is rejected.
    void apply_env(const std::string& prefix = "PDAE_");
    void set(const std::string& key, const std::string& value);

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    const std::string& get(const std::string& key) const;
    int64_t get_int(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    std::vector<int64_t> get_ints(const std::string& key) const;
    std::vector<double> get_doubles(const std::string& key) const;

    /// Sorted `key = value` lines; load_text(dump()) restores the same config.
    std::string dump() const;
    const std::map<std::string, std::string>& values() const { return values_; }

    static std::string env_name(const std::string& key, const std::string& prefix = "PDAE_");

private:
    std::map<std::string, std::string> values_;
};

}  // namespace pdae
