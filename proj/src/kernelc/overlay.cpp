#include "kcap/kernelc/overlay.hpp"

#include "kcap/common/files.hpp"

#include <json.hpp>

#include <stdexcept>

namespace kcap::kc {

fs::path normalize(const fs::path& p) {
    fs::path n = fs::absolute(p).lexically_normal();
    // "dir/." normalizes to "dir/"; drop the trailing separator so prefix checks work.
    if (!n.has_filename() && n.has_relative_path()) n = n.parent_path();
    return n;
}

Overlay Overlay::parse(std::string_view json_text, const fs::path& base_dir) {
    Overlay overlay;
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("overlay: ") + e.what());
    }
    if (!doc.is_object() || doc.value("version", -1) != 0 || !doc.contains("roots") || !doc["roots"].is_array())
        throw std::runtime_error("overlay: expected {\"version\": 0, \"roots\": [...]}");
    for (const auto& root : doc["roots"]) {
        if (root.value("type", "") != "directory" || !root.contains("contents"))
            throw std::runtime_error("overlay: root entries must be directories with contents");
        const fs::path dir = root.at("name").get<std::string>();
        for (const auto& entry : root.at("contents")) {
            if (entry.value("type", "") != "file") throw std::runtime_error("overlay: only file entries are supported");
            fs::path local = entry.at("external-contents").get<std::string>();
            if (local.is_relative()) local = base_dir / local;
            const std::string original = normalize(dir / entry.at("name").get<std::string>()).string();
            if (!overlay.mappings_.emplace(original, normalize(local)).second)
                throw std::runtime_error("overlay: duplicate mapping for " + original);
        }
    }
    return overlay;
}

Overlay Overlay::load(const fs::path& path) {
    return parse(read_text(path), normalize(path).parent_path());
}

std::optional<fs::path> Overlay::lookup(const fs::path& original) const {
    auto it = mappings_.find(normalize(original).string());
    if (it == mappings_.end()) return std::nullopt;
    return it->second;
}

fs::path SourceFs::real_path(const fs::path& virtual_path) const {
    if (overlay_)
        if (auto mapped = overlay_->lookup(virtual_path)) return *mapped;
    return normalize(virtual_path);
}

bool SourceFs::exists(const fs::path& virtual_path) const {
    if (overlay_ && overlay_->lookup(virtual_path)) return true;
    return fs::is_regular_file(virtual_path);
}

std::string SourceFs::read(const fs::path& virtual_path) {
    const fs::path real = real_path(virtual_path);
    open_log_.push_back(real);
    return read_text(real);
}

}  // namespace kcap::kc
