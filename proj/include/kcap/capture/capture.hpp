#pragma once

#include "kcap/capture/bundle.hpp"
#include "kcap/intercept/intercept.hpp"

#include <filesystem>
#include <functional>
#include <optional>

namespace kcap::cap {

struct CaptureOptions {
    fs::path output_dir;
    std::uint64_t chunk_bytes = kDefaultChunkBytes;
    /// Used to decide the language when the target does not fix it.
    std::optional<fs::path> name_map;
    /// Runs between the metadata writes and the snapshot.
    std::function<void(const icpt::CaptureContext&)> before_snapshot;

    /// KERNCAP_OUTPUT, KERNCAP_SNAPSHOT_CHUNK_BYTES, KERNCAP_NAME_MAP.
    static CaptureOptions from_env();
};

icpt::Language decide_language(const icpt::CaptureContext& ctx, const std::optional<fs::path>& name_map);

void write_metadata(const icpt::CaptureContext& ctx, const fs::path& dir, icpt::Language language);
void snapshot_all_tracked_memory(const icpt::CaptureContext& ctx, const fs::path& dir, std::uint64_t chunk_bytes,
                                 CaptureLog& log);
void capture_module_variables(const icpt::CaptureContext& ctx, const fs::path& dir, CaptureLog& log);
void write_log(const fs::path& dir, const CaptureLog& log);
void finalize(const fs::path& dir);

/// The whole sequence: metadata, snapshot, module variables, log, sentinel.
icpt::CaptureSink make_capture_sink(CaptureOptions options);

}  // namespace kcap::cap
