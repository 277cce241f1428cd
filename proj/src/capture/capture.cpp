#include "kcap/capture/capture.hpp"

#include "kcap/common/files.hpp"
#include "kcap/common/hex.hpp"
#include "kcap/kernelc/mangle.hpp"
#include "kcap/kernelc/namemap.hpp"

#include <spdlog/spdlog.h>

#include <cstdlib>
#include <fstream>

namespace kcap::cap {

using nlohmann::json;
using namespace vdev;

CaptureOptions CaptureOptions::from_env() {
    CaptureOptions o;
    const char* out = std::getenv("KERNCAP_OUTPUT");
    o.output_dir = out && *out ? fs::path(out) : fs::current_path() / "capture";
    if (const char* chunk = std::getenv("KERNCAP_SNAPSHOT_CHUNK_BYTES"); chunk && *chunk) {
        o.chunk_bytes = parse_uint(chunk);
        if (o.chunk_bytes == 0) throw std::invalid_argument("KERNCAP_SNAPSHOT_CHUNK_BYTES must be > 0");
    }
    if (const char* nm = std::getenv("KERNCAP_NAME_MAP"); nm && *nm) o.name_map = fs::path(nm);
    return o;
}

icpt::Language decide_language(const icpt::CaptureContext& ctx, const std::optional<fs::path>& name_map) {
    if (ctx.state.target().language) return *ctx.state.target().language;
    if (name_map && fs::exists(*name_map) && kc::lookup_name_map(*name_map, ctx.symbol.executable_sha256))
        return icpt::Language::Jit;
    return icpt::Language::Compiled;
}

void write_metadata(const icpt::CaptureContext& ctx, const fs::path& dir, icpt::Language language) {
    fs::create_directories(dir / "memory");
    fs::create_directories(dir / kModuleVarsDir);

    DispatchRecord d;
    d.kernel_name = kc::display_name(ctx.symbol.mangled);
    d.mangled_symbol = ctx.symbol.mangled;
    d.grid = {ctx.packet.grid.x, ctx.packet.grid.y, ctx.packet.grid.z};
    d.workgroup = {ctx.packet.workgroup.x, ctx.packet.workgroup.y, ctx.packet.workgroup.z};
    d.kernarg_size = ctx.kernarg_segment_size;
    d.code_object_sha256 = ctx.symbol.executable_sha256;
    d.language = language;
    d.dispatch_index = ctx.dispatch_index;

    json regions = json::array();
    bool kernarg_flagged = false;
    for (const icpt::TrackedRegion& r : ctx.regions) {
        MemoryRegionRecord rec{r.base, r.size, r.kind, false, region_data_file(r.base)};
        if (!kernarg_flagged && AddressRange{r.base, r.size}.contains(ctx.packet.kernarg_address, std::max<std::uint64_t>(d.kernarg_size, 1))) {
            rec.contains_kernarg = true;
            kernarg_flagged = true;
        }
        regions.push_back(to_json(rec));
    }

    write_text(dir / kDispatchFile, to_json(d).dump(2) + "\n");
    write_text(dir / kRegionsFile, regions.dump(2) + "\n");

    auto blob = ctx.state.blob(ctx.symbol.executable_sha256);
    if (!blob) throw std::runtime_error("code object " + ctx.symbol.executable_sha256 + " was not seen at load time");
    write_file(dir / kCodeObjectFile, *blob);

    Bytes kernarg(d.kernarg_size);
    if (!kernarg.empty()) ctx.originals.copy_to_host(kernarg, ctx.packet.kernarg_address);
    write_file(dir / kKernargFile, kernarg);
}

void snapshot_all_tracked_memory(const icpt::CaptureContext& ctx, const fs::path& dir, std::uint64_t chunk_bytes,
                                 CaptureLog& log) {
    if (chunk_bytes == 0) throw std::invalid_argument("chunk size must be > 0");
    log.chunk_bytes = chunk_bytes;
    for (const icpt::TrackedRegion& r : ctx.regions) {
        RegionStatus status{r.base, false, 0, 0, ""};
        const fs::path file = dir / region_data_file(r.base);
        try {
            std::ofstream out(file, std::ios::binary | std::ios::trunc);
            if (!out) throw std::runtime_error("cannot open " + file.string());
            Bytes staging(std::min(chunk_bytes, r.size));
            log.staging_high_water = std::max<std::uint64_t>(log.staging_high_water, staging.size());
            for (std::uint64_t off = 0; off < r.size; off += chunk_bytes) {
                const std::uint64_t n = std::min(chunk_bytes, r.size - off);
                ctx.originals.copy_to_host(std::span(staging.data(), n), r.base + off);
                ++status.chunks;
                out.write(reinterpret_cast<const char*>(staging.data()), static_cast<std::streamsize>(n));
                if (!out) throw std::runtime_error("write failed for " + file.string());
                status.bytes += n;
            }
            status.ok = true;
        } catch (const std::exception& e) {
            status.error = e.what();
            std::error_code ec;
            fs::remove(file, ec);
            spdlog::warn("capture: region {} skipped: {}", hex_address(r.base.value), e.what());
        }
        log.regions.push_back(std::move(status));
    }
}

void capture_module_variables(const icpt::CaptureContext& ctx, const fs::path& dir, CaptureLog& log) {
    fs::create_directories(dir / kModuleVarsDir);
    for (const Executable& exec : ctx.runtime.executables()) {
        for (const SymbolInfo& var : exec.variables()) {
            VariableStatus st{exec.sha256, var.name, var.size, false, ""};
            try {
                Bytes data(var.size);
                if (!data.empty()) ctx.originals.copy_to_host(data, var.address);
                write_file_mkdirs(dir / kModuleVarsDir / exec.sha256 / (var.name + ".bin"), data);
                st.ok = true;
            } catch (const std::exception& e) {
                st.error = e.what();
            }
            log.module_vars.push_back(std::move(st));
        }
    }
}

void write_log(const fs::path& dir, const CaptureLog& log) {
    write_text(dir / kLogFile, to_json(log).dump(2) + "\n");
}

void finalize(const fs::path& dir) {
    write_text(dir / kSentinelFile, "");
}

icpt::CaptureSink make_capture_sink(CaptureOptions options) {
    return [options = std::move(options)](const icpt::CaptureContext& ctx) {
        const fs::path& dir = options.output_dir;
        std::error_code ec;
        fs::remove(dir / kSentinelFile, ec);
        write_metadata(ctx, dir, decide_language(ctx, options.name_map));
        if (options.before_snapshot) options.before_snapshot(ctx);
        CaptureLog log;
        log.warnings = ctx.state.warnings();
        snapshot_all_tracked_memory(ctx, dir, options.chunk_bytes, log);
        capture_module_variables(ctx, dir, log);
        write_log(dir, log);
        finalize(dir);
    };
}

}  // namespace kcap::cap
