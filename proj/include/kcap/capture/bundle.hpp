#pragma once

#include "kcap/common/bytes.hpp"
#include "kcap/intercept/intercept.hpp"
#include "kcap/vdevice/types.hpp"

#include <json.hpp>

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace kcap::cap {

namespace fs = std::filesystem;

// Capture directory layout:
//   dispatch.json  memory_regions.json  kernel.kobj  kernarg.bin
//   memory/region_<hex>.bin  module_vars/<exec-sha>/<symbol>.bin
//   capture_log.json  capture_complete

inline constexpr const char* kDispatchFile = "dispatch.json";
inline constexpr const char* kRegionsFile = "memory_regions.json";
inline constexpr const char* kCodeObjectFile = "kernel.kobj";
inline constexpr const char* kKernargFile = "kernarg.bin";
inline constexpr const char* kLogFile = "capture_log.json";
inline constexpr const char* kSentinelFile = "capture_complete";
inline constexpr const char* kModuleVarsDir = "module_vars";
inline constexpr std::uint64_t kDefaultChunkBytes = 64ull << 20;

struct DispatchRecord {
    std::string kernel_name;
    std::string mangled_symbol;
    std::array<std::uint32_t, 3> grid{1, 1, 1};
    std::array<std::uint32_t, 3> workgroup{1, 1, 1};
    std::uint32_t kernarg_size = 0;
    std::string code_object_sha256;
    icpt::Language language = icpt::Language::Compiled;
    std::uint64_t dispatch_index = 1;
};

struct MemoryRegionRecord {
    vdev::DeviceAddress base;
    std::uint64_t size = 0;
    vdev::AllocKind alloc_kind = vdev::AllocKind::Pool;
    bool contains_kernarg = false;
    std::string data_file;
};

/// "memory/region_7f8a00000000.bin"
std::string region_data_file(vdev::DeviceAddress base);

struct RegionStatus {
    vdev::DeviceAddress base;
    bool ok = false;
    std::uint64_t bytes = 0;
    std::uint64_t chunks = 0;
    std::string error;
};

struct VariableStatus {
    std::string executable_sha256;
    std::string symbol;
    std::uint64_t size = 0;
    bool ok = false;
    std::string error;
};

struct CaptureLog {
    std::uint64_t chunk_bytes = kDefaultChunkBytes;
    /// Largest host staging buffer held during the snapshot.
    std::uint64_t staging_high_water = 0;
    std::vector<RegionStatus> regions;
    std::vector<VariableStatus> module_vars;
    std::vector<std::string> warnings;
};

nlohmann::json to_json(const DispatchRecord& r);
DispatchRecord dispatch_from_json(const nlohmann::json& j);
nlohmann::json to_json(const MemoryRegionRecord& r);
MemoryRegionRecord region_from_json(const nlohmann::json& j);
nlohmann::json to_json(const CaptureLog& log);
CaptureLog log_from_json(const nlohmann::json& j);

vdev::AllocKind alloc_kind_from(std::string_view name);

/// A capture directory read back from disk.
struct CaptureBundle {
    fs::path dir;
    DispatchRecord dispatch;
    std::vector<MemoryRegionRecord> regions;
    Bytes kernarg;
    Bytes code_object;
    std::optional<CaptureLog> log;
    bool complete = false;

    /// Throws when metadata is missing or unparsable. Without
    /// `require_complete`, a bundle lacking the sentinel still loads.
    static CaptureBundle load(const fs::path& dir, bool require_complete = true);

    fs::path region_path(const MemoryRegionRecord& r) const { return dir / r.data_file; }
    /// Regions whose data file was written in full.
    bool region_captured(const MemoryRegionRecord& r) const;
    /// exec sha -> symbol -> file
    std::map<std::string, std::map<std::string, fs::path>> module_vars() const;
};

}  // namespace kcap::cap
