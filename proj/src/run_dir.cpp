#include "pdae/run_dir.hpp"

#include <fmt/format.h>

#include "pdae/checkpoint.hpp"
#include "pdae/errors.hpp"

namespace pdae {

namespace fs = std::filesystem;

RunDir::RunDir(const fs::path& dir, const std::string& command, const RunConfig& cfg) : dir_(dir) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) {
        throw ConfigError(fmt::format("cannot create run directory {}: {}", dir_.string(), ec.message()));
    }
    fs::remove(dir_ / "manifest.txt", ec);
    write_file_atomic((dir_ / kFailureMarker).string(), "running\n");
    write_file_atomic((dir_ / "config.txt").string(), cfg.dump());
    manifest_["command"] = command;
}

void RunDir::note(const std::string& key, const std::string& value) { manifest_[key] = value; }

void RunDir::note(const std::string& key, double value) { manifest_[key] = fmt::format("{:.9g}", value); }

void RunDir::finish() {
    std::string text;
    for (const auto& [k, v] : manifest_) {
        text += fmt::format("{} = {}\n", k, v);
    }
    write_file_atomic((dir_ / "manifest.txt").string(), text);
    fs::remove(dir_ / kFailureMarker);
}

void RunDir::fail(const std::string& reason) {
    write_file_atomic((dir_ / kFailureMarker).string(), reason + "\n");
}

}  // namespace pdae
