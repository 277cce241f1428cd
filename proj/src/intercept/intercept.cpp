#include "kcap/intercept/intercept.hpp"

#include "kcap/common/digest.hpp"
#include "kcap/common/hex.hpp"
#include "kcap/kernelc/mangle.hpp"

#include <spdlog/spdlog.h>

#include <cstdlib>

namespace kcap::icpt {

using namespace vdev;

std::string_view name_of(Language language) { return language == Language::Jit ? "jit" : "compiled"; }

std::optional<Language> language_from(std::string_view name) {
    if (name == "jit") return Language::Jit;
    if (name == "compiled") return Language::Compiled;
    return std::nullopt;
}

std::optional<TargetSpec> TargetSpec::from_env() {
    const char* kernel = std::getenv("KERNCAP_KERNEL");
    if (!kernel || !*kernel) return std::nullopt;
    TargetSpec spec;
    spec.name_pattern = kernel;
    if (const char* idx = std::getenv("KERNCAP_DISPATCH_INDEX"); idx && *idx) {
        spec.dispatch_index = parse_uint(idx);
        if (spec.dispatch_index < 1) throw std::invalid_argument("KERNCAP_DISPATCH_INDEX must be >= 1");
    }
    if (const char* lang = std::getenv("KERNCAP_LANGUAGE"); lang && *lang) {
        spec.language = language_from(lang);
        if (!spec.language) throw std::invalid_argument(std::string("unknown KERNCAP_LANGUAGE '") + lang + "'");
    }
    return spec;
}

InterceptState::InterceptState(Runtime& rt, TargetSpec target, CaptureSink sink)
    : rt_(rt), originals_(rt.api()), target_(std::move(target)), sink_(std::move(sink)) {}

std::unique_ptr<InterceptState> InterceptState::install(Runtime& rt, TargetSpec target, CaptureSink sink) {
    if (rt.api().intercepted) throw InstallError("interception already installed on this runtime");
    if (target.dispatch_index < 1) throw InstallError("dispatch index must be >= 1");
    std::unique_ptr<InterceptState> state(new InterceptState(rt, std::move(target), std::move(sink)));
    InterceptState* s = state.get();
    ApiTable& api = rt.api();
    const ApiTable& orig = s->originals_;

    api.pool_allocate = [s, &orig](std::uint64_t size) {
        const DeviceAddress base = orig.pool_allocate(size);
        std::lock_guard lock(s->mu_);
        s->ptr_size_[base.value] = {base, size, AllocKind::Pool};
        return base;
    };
    api.vmem_reserve_map = [s, &orig](std::optional<DeviceAddress> want, std::uint64_t size) {
        const DeviceAddress base = orig.vmem_reserve_map(want, size);
        std::lock_guard lock(s->mu_);
        s->ptr_size_[base.value] = {base, size, AllocKind::Vmem};
        return base;
    };
    api.free = [s, &orig](DeviceAddress base) {
        orig.free(base);
        std::unique_lock lock(s->mu_);
        if (s->ptr_size_.erase(base.value) == 0) {
            lock.unlock();
            s->warn("free of untracked base " + hex_address(base.value));
        }
    };
    api.load_code_object = [s, &orig](ByteView bytes) {
        const ExecutableId id = orig.load_code_object(bytes);
        const std::string sha = sha256_hex(bytes);
        std::lock_guard lock(s->mu_);
        s->exec_sha_[id.id] = sha;
        s->blobs_.emplace(sha, Bytes(bytes.begin(), bytes.end()));
        return id;
    };
    api.symbol_info = [s, &orig](ExecutableId exec, std::string_view name, SymbolQuery query) {
        const std::uint64_t value = orig.symbol_info(exec, name, query);
        if (query == SymbolQuery::KernelObject) {
            std::lock_guard lock(s->mu_);
            auto sha = s->exec_sha_.find(exec.id);
            // Loaded before install: the runtime still knows the identity, not the blob.
            s->handle_to_symbol_[value] = {std::string(name),
                                           sha == s->exec_sha_.end() ? s->rt_.executable(exec).sha256 : sha->second,
                                           exec};
        }
        return value;
    };
    api.queue_create = [&orig] { return orig.queue_create(); };
    api.queue_submit = [s](QueueId q, const DispatchPacket& p) { s->on_submit_packet(q, p); };
    api.intercepted = true;
    return state;
}

InterceptState::~InterceptState() {
    rt_.api() = originals_;
}

void InterceptState::warn(const std::string& message) {
    spdlog::warn("intercept: {}", message);
    std::lock_guard lock(mu_);
    warnings_.push_back(message);
}

std::map<std::uint64_t, TrackedRegion> InterceptState::ptr_size() const {
    std::lock_guard lock(mu_);
    return ptr_size_;
}

std::map<std::uint64_t, BoundSymbol> InterceptState::handle_to_symbol() const {
    std::lock_guard lock(mu_);
    return handle_to_symbol_;
}

std::vector<std::string> InterceptState::blob_shas() const {
    std::lock_guard lock(mu_);
    std::vector<std::string> out;
    for (const auto& [sha, bytes] : blobs_) out.push_back(sha);
    return out;
}

std::optional<Bytes> InterceptState::blob(const std::string& sha256) const {
    std::lock_guard lock(mu_);
    auto it = blobs_.find(sha256);
    if (it == blobs_.end()) return std::nullopt;
    return it->second;
}

bool InterceptState::captured() const {
    std::lock_guard lock(mu_);
    return captured_;
}

std::optional<std::string> InterceptState::capture_error() const {
    std::lock_guard lock(mu_);
    return capture_error_;
}

std::uint64_t InterceptState::match_count() const {
    std::lock_guard lock(mu_);
    return matches_;
}

std::vector<std::string> InterceptState::warnings() const {
    std::lock_guard lock(mu_);
    return warnings_;
}

bool InterceptState::match_target(const DispatchPacket& packet) {
    std::unique_lock lock(mu_);
    auto it = handle_to_symbol_.find(packet.kernel_object.handle);
    if (it == handle_to_symbol_.end()) {
        lock.unlock();
        warn("dispatch of unresolved kernel object " + hex_address(packet.kernel_object.handle));
        return false;
    }
    if (kc::display_name(it->second.mangled).find(target_.name_pattern) == std::string::npos) return false;
    return ++matches_ == target_.dispatch_index;
}

void InterceptState::on_submit_packet(QueueId queue, const DispatchPacket& packet) {
    // After the capture, later matches go straight through.
    if (captured() || !match_target(packet)) {
        originals_.queue_submit(queue, packet);
        return;
    }
    BoundSymbol symbol;
    {
        std::lock_guard lock(mu_);
        captured_ = true;
        symbol = handle_to_symbol_.at(packet.kernel_object.handle);
    }

    DispatchPacket swapped = packet;
    swapped.completion_signal = originals_.signal_create(1);
    originals_.queue_submit(queue, swapped);
    originals_.signal_wait_eq(swapped.completion_signal, 0, std::chrono::hours(24));

    try {
        CaptureContext ctx{rt_, originals_, *this, packet, symbol, 0, 0, {}};
        ctx.kernarg_segment_size = static_cast<std::uint32_t>(
            originals_.symbol_info(symbol.executable, symbol.mangled, SymbolQuery::KernargSegmentSize));
        {
            std::lock_guard lock(mu_);
            ctx.dispatch_index = matches_;
            for (const auto& [base, region] : ptr_size_) ctx.regions.push_back(region);
        }
        if (sink_) sink_(ctx);
    } catch (const std::exception& e) {
        {
            std::lock_guard lock(mu_);
            capture_error_ = e.what();
        }
        spdlog::error("capture failed: {}", e.what());
    }
    if (packet.completion_signal.handle != 0) originals_.signal_subtract(packet.completion_signal, 1);
}

}  // namespace kcap::icpt
