#pragma once

#include "kcap/common/bytes.hpp"
#include "kcap/vdevice/runtime.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace kcap::icpt {

enum class Language { Compiled, Jit };

std::string_view name_of(Language language);
std::optional<Language> language_from(std::string_view name);

struct TargetSpec {
    /// Substring of the demangled kernel name.
    std::string name_pattern;
    /// Which matching dispatch to capture, counting from 1.
    std::uint64_t dispatch_index = 1;
    /// Unset means decide from the name map.
    std::optional<Language> language;

    /// KERNCAP_KERNEL, KERNCAP_DISPATCH_INDEX, KERNCAP_LANGUAGE.
    static std::optional<TargetSpec> from_env();
};

struct TrackedRegion {
    vdev::DeviceAddress base;
    std::uint64_t size = 0;
    vdev::AllocKind kind = vdev::AllocKind::Pool;
};

struct BoundSymbol {
    std::string mangled;
    std::string executable_sha256;
    vdev::ExecutableId executable;
};

class InterceptState;

/// What the capture sink sees while the host is blocked on the target.
struct CaptureContext {
    vdev::Runtime& runtime;
    const vdev::ApiTable& originals;
    const InterceptState& state;
    vdev::DispatchPacket packet;
    BoundSymbol symbol;
    std::uint32_t kernarg_segment_size = 0;
    std::uint64_t dispatch_index = 0;
    /// Tracked regions frozen at the moment the target completed.
    std::vector<TrackedRegion> regions;
};

using CaptureSink = std::function<void(const CaptureContext&)>;

class InstallError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Wraps the runtime's live API table. Every hook forwards to the saved
/// original; destroying the state restores the table.
class InterceptState {
public:
    static std::unique_ptr<InterceptState> install(vdev::Runtime& rt, TargetSpec target, CaptureSink sink);
    ~InterceptState();

    InterceptState(const InterceptState&) = delete;
    InterceptState& operator=(const InterceptState&) = delete;

    const TargetSpec& target() const { return target_; }
    const vdev::ApiTable& originals() const { return originals_; }

    std::map<std::uint64_t, TrackedRegion> ptr_size() const;
    std::map<std::uint64_t, BoundSymbol> handle_to_symbol() const;
    std::vector<std::string> blob_shas() const;
    std::optional<Bytes> blob(const std::string& sha256) const;

    /// Counts a match when the packet's kernel matches; true on the
    /// dispatch_index-th one.
    bool match_target(const vdev::DispatchPacket& packet);
    void on_submit_packet(vdev::QueueId queue, const vdev::DispatchPacket& packet);

    bool captured() const;
    std::optional<std::string> capture_error() const;
    std::uint64_t match_count() const;
    std::vector<std::string> warnings() const;

private:
    InterceptState(vdev::Runtime& rt, TargetSpec target, CaptureSink sink);
    void warn(const std::string& message);

    vdev::Runtime& rt_;
    vdev::ApiTable originals_;
    TargetSpec target_;
    CaptureSink sink_;

    mutable std::mutex mu_;
    std::map<std::uint64_t, TrackedRegion> ptr_size_;
    std::map<std::uint64_t, BoundSymbol> handle_to_symbol_;
    std::map<std::uint64_t, std::string> exec_sha_;
    std::map<std::string, Bytes> blobs_;
    std::uint64_t matches_ = 0;
    bool captured_ = false;
    std::optional<std::string> capture_error_;
    std::vector<std::string> warnings_;
};

}  // namespace kcap::icpt
