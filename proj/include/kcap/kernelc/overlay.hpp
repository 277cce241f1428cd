#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace kcap::kc {

namespace fs = std::filesystem;

/// Redirection map read from an overlay file:
///   {"version": 0, "roots": [{"type": "directory", "name": <dir>,
///     "contents": [{"type": "file", "name": <basename>,
///                   "external-contents": <local path>}]}]}
/// Relative external-contents resolve against the overlay file's directory.
class Overlay {
public:
    static Overlay parse(std::string_view json_text, const fs::path& base_dir);
    static Overlay load(const fs::path& path);

    std::optional<fs::path> lookup(const fs::path& original) const;
    const std::map<std::string, fs::path>& mappings() const { return mappings_; }

private:
    std::map<std::string, fs::path> mappings_;
};

/// File access used by the compiler. Paths are virtual (what the source
/// names); reads go to the overlay copy when one is mapped. Every real
/// file opened is logged.
class SourceFs {
public:
    SourceFs() = default;
    explicit SourceFs(std::optional<Overlay> overlay) : overlay_(std::move(overlay)) {}

    bool exists(const fs::path& virtual_path) const;
    std::string read(const fs::path& virtual_path);
    fs::path real_path(const fs::path& virtual_path) const;

    const std::vector<fs::path>& open_log() const { return open_log_; }

private:
    std::optional<Overlay> overlay_;
    std::vector<fs::path> open_log_;
};

fs::path normalize(const fs::path& p);

}  // namespace kcap::kc
