#include "kcap/capture/bundle.hpp"

#include "kcap/common/files.hpp"
#include "kcap/common/hex.hpp"

namespace kcap::cap {

using nlohmann::json;

std::string region_data_file(vdev::DeviceAddress base) { return "memory/region_" + hex_digits(base.value) + ".bin"; }

vdev::AllocKind alloc_kind_from(std::string_view name) {
    if (name == "pool") return vdev::AllocKind::Pool;
    if (name == "vmem") return vdev::AllocKind::Vmem;
    if (name == "variable") return vdev::AllocKind::Variable;
    throw std::invalid_argument("unknown alloc_kind '" + std::string(name) + "'");
}

json to_json(const DispatchRecord& r) {
    return json{{"kernel_name", r.kernel_name},
                {"mangled_symbol", r.mangled_symbol},
                {"grid", r.grid},
                {"workgroup", r.workgroup},
                {"kernarg_size", r.kernarg_size},
                {"code_object_sha256", r.code_object_sha256},
                {"language", std::string(icpt::name_of(r.language))},
                {"dispatch_index", r.dispatch_index}};
}

DispatchRecord dispatch_from_json(const json& j) {
    DispatchRecord r;
    r.kernel_name = j.at("kernel_name").get<std::string>();
    r.mangled_symbol = j.at("mangled_symbol").get<std::string>();
    r.grid = j.at("grid").get<std::array<std::uint32_t, 3>>();
    r.workgroup = j.at("workgroup").get<std::array<std::uint32_t, 3>>();
    r.kernarg_size = j.at("kernarg_size").get<std::uint32_t>();
    r.code_object_sha256 = j.at("code_object_sha256").get<std::string>();
    auto lang = icpt::language_from(j.at("language").get<std::string>());
    if (!lang) throw std::invalid_argument("dispatch.json: unknown language");
    r.language = *lang;
    r.dispatch_index = j.at("dispatch_index").get<std::uint64_t>();
    return r;
}

json to_json(const MemoryRegionRecord& r) {
    return json{{"base", hex_address(r.base.value)},
                {"size", r.size},
                {"alloc_kind", vdev::to_string(r.alloc_kind)},
                {"contains_kernarg", r.contains_kernarg},
                {"data_file", r.data_file}};
}

MemoryRegionRecord region_from_json(const json& j) {
    MemoryRegionRecord r;
    r.base = vdev::DeviceAddress{parse_hex(j.at("base").get<std::string>())};
    r.size = j.at("size").get<std::uint64_t>();
    r.alloc_kind = alloc_kind_from(j.at("alloc_kind").get<std::string>());
    r.contains_kernarg = j.at("contains_kernarg").get<bool>();
    r.data_file = j.at("data_file").get<std::string>();
    return r;
}

json to_json(const CaptureLog& log) {
    json regions = json::array();
    for (const RegionStatus& s : log.regions)
        regions.push_back({{"base", hex_address(s.base.value)},
                           {"status", s.ok ? "ok" : "failed"},
                           {"bytes", s.bytes},
                           {"chunks", s.chunks},
                           {"error", s.error}});
    json vars = json::array();
    for (const VariableStatus& v : log.module_vars)
        vars.push_back({{"executable_sha256", v.executable_sha256},
                        {"symbol", v.symbol},
                        {"size", v.size},
                        {"status", v.ok ? "ok" : "failed"},
                        {"error", v.error}});
    return json{{"chunk_bytes", log.chunk_bytes},
                {"staging_high_water", log.staging_high_water},
                {"regions", regions},
                {"module_vars", vars},
                {"warnings", json(log.warnings)}};
}

CaptureLog log_from_json(const json& j) {
    CaptureLog log;
    log.chunk_bytes = j.at("chunk_bytes").get<std::uint64_t>();
    log.staging_high_water = j.at("staging_high_water").get<std::uint64_t>();
    for (const json& r : j.at("regions"))
        log.regions.push_back({vdev::DeviceAddress{parse_hex(r.at("base").get<std::string>())},
                               r.at("status").get<std::string>() == "ok", r.at("bytes").get<std::uint64_t>(),
                               r.at("chunks").get<std::uint64_t>(), r.at("error").get<std::string>()});
    for (const json& v : j.at("module_vars"))
        log.module_vars.push_back({v.at("executable_sha256").get<std::string>(), v.at("symbol").get<std::string>(),
                                   v.at("size").get<std::uint64_t>(), v.at("status").get<std::string>() == "ok",
                                   v.at("error").get<std::string>()});
    log.warnings = j.at("warnings").get<std::vector<std::string>>();
    return log;
}

CaptureBundle CaptureBundle::load(const fs::path& dir, bool require_complete) {
    CaptureBundle b;
    b.dir = dir;
    b.complete = fs::exists(dir / kSentinelFile);
    if (require_complete && !b.complete)
        throw std::runtime_error("capture at " + dir.string() + " is incomplete (no " + kSentinelFile + ")");
    try {
        b.dispatch = dispatch_from_json(json::parse(read_text(dir / kDispatchFile)));
        const json regions = json::parse(read_text(dir / kRegionsFile));
        if (!regions.is_array()) throw std::invalid_argument("memory_regions.json is not an array");
        for (const json& r : regions) b.regions.push_back(region_from_json(r));
        b.kernarg = read_file(dir / kKernargFile);
        b.code_object = read_file(dir / kCodeObjectFile);
        if (fs::exists(dir / kLogFile)) b.log = log_from_json(json::parse(read_text(dir / kLogFile)));
    } catch (const std::exception& e) {
        throw std::runtime_error("cannot read capture at " + dir.string() + ": " + e.what());
    }
    return b;
}

bool CaptureBundle::region_captured(const MemoryRegionRecord& r) const {
    if (log) {
        for (const RegionStatus& s : log->regions)
            if (s.base == r.base) return s.ok;
    }
    std::error_code ec;
    const auto size = fs::file_size(region_path(r), ec);
    return !ec && size == r.size;
}

std::map<std::string, std::map<std::string, fs::path>> CaptureBundle::module_vars() const {
    std::map<std::string, std::map<std::string, fs::path>> out;
    const fs::path root = dir / kModuleVarsDir;
    if (!fs::is_directory(root)) return out;
    for (const auto& exec : fs::directory_iterator(root)) {
        if (!exec.is_directory()) continue;
        auto& syms = out[exec.path().filename().string()];
        for (const auto& f : fs::directory_iterator(exec.path()))
            if (f.is_regular_file() && f.path().extension() == ".bin") syms[f.path().stem().string()] = f.path();
    }
    return out;
}

}  // namespace kcap::cap
