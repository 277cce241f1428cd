#pragma once

#include "kcap/kernelc/jit.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>

namespace kcap::kc {

// name_map.json: {"<sha256>": record, ...}

nlohmann::json to_json(const AutotuneConfig& config);
AutotuneConfig config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const NameMapRecord& record);
NameMapRecord record_from_json(const nlohmann::json& j);

std::map<std::string, NameMapRecord> load_name_map(const fs::path& path);
std::optional<NameMapRecord> lookup_name_map(const fs::path& path, const std::string& sha256);

/// Read-modify-write under an exclusive lock on "<path>.lock".
void update_name_map(const fs::path& path, const std::string& sha256, const NameMapRecord& record);

}  // namespace kcap::kc
