#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "pdae/config.hpp"

namespace pdae {

/// Output directory of one CLI run. Opening it writes `config.txt` (the resolved config) and a
/// `FAILED` marker; finish() writes `manifest.txt` and removes the marker, so a directory without
/// a manifest and with the marker holds partial output.
class RunDir {
public:
    RunDir(const std::filesystem::path& dir, const std::string& command, const RunConfig& cfg);

    const std::filesystem::path& path() const { return dir_; }
    std::filesystem::path file(const std::string& name) const { return dir_ / name; }

    /// Adds a manifest entry; later entries with the same key replace earlier ones.
    void note(const std::string& key, const std::string& value);
    void note(const std::string& key, double value);

    void finish();
    /// Records the reason in the failure marker.
    void fail(const std::string& reason);

    static constexpr char kFailureMarker[] = "FAILED";

private:
    std::filesystem::path dir_;
    std::map<std::string, std::string> manifest_;
};

}  // namespace pdae
