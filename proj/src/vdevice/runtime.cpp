#include "kcap/vdevice/runtime.hpp"

#include "kcap/common/digest.hpp"
#include "kcap/common/hex.hpp"
#include "kcap/kernelc/codeobject.hpp"
#include "kcap/kernelc/mangle.hpp"

#include <algorithm>
#include <cstdlib>
#include <cstring>

namespace kcap::vdev {

std::string to_string(AllocKind kind) {
    switch (kind) {
        case AllocKind::Pool: return "pool";
        case AllocKind::Vmem: return "vmem";
        case AllocKind::Variable: return "variable";
    }
    return "?";
}

std::string to_string(DeviceErrc code) {
    switch (code) {
        case DeviceErrc::InvalidArgument: return "InvalidArgument";
        case DeviceErrc::VaExhausted: return "VaExhausted";
        case DeviceErrc::ExactAddressUnavailable: return "ExactAddressUnavailable";
        case DeviceErrc::RegionNotTracked: return "RegionNotTracked";
        case DeviceErrc::OutOfBounds: return "OutOfBounds";
        case DeviceErrc::UnknownBase: return "UnknownBase";
        case DeviceErrc::MalformedCodeObject: return "MalformedCodeObject";
        case DeviceErrc::SymbolNotFound: return "SymbolNotFound";
        case DeviceErrc::InvalidHandle: return "InvalidHandle";
        case DeviceErrc::Fault: return "Fault";
        case DeviceErrc::DivisionByZero: return "DivisionByZero";
        case DeviceErrc::InstructionLimit: return "InstructionLimit";
    }
    return "?";
}

namespace {

// Slot = (seed * kMul + kOffset) mod 2^20; kMul is odd so the map is a bijection.
constexpr std::uint64_t kSlotMask = kApertureSlots - 1;
constexpr std::uint64_t kSeedMul = 0x9e3b5;
constexpr std::uint64_t kSeedOffset = 0x10000;

std::uint64_t inverse_mod_slots(std::uint64_t a) {
    std::uint64_t x = a;  // Newton iteration for 2-adic inverse
    for (int i = 0; i < 6; ++i) x *= 2 - a * x;
    return x & kSlotMask;
}

}  // namespace

DeviceAddress aperture_base_for_seed(std::uint64_t seed) {
    return DeviceAddress{((seed * kSeedMul + kSeedOffset) & kSlotMask) * kApertureSize};
}

std::uint64_t aperture_seed_for_base(DeviceAddress base) {
    const std::uint64_t slot = (base.value / kApertureSize) & kSlotMask;
    return ((slot - kSeedOffset) * inverse_mod_slots(kSeedMul)) & kSlotMask;
}

RuntimeOptions RuntimeOptions::from_env() {
    RuntimeOptions opts;
    if (const char* seed = std::getenv("KCAP_APERTURE_SEED"); seed && *seed) opts.aperture_seed = parse_uint(seed);
    return opts;
}

std::vector<SymbolInfo> Executable::variables() const {
    std::vector<SymbolInfo> out;
    for (const auto& [name, sym] : symbols)
        if (sym.kind == SymbolKind::Variable) out.push_back(sym);
    return out;
}

struct Runtime::LoadedKernel {
    std::vector<Instruction> program;
    std::uint32_t kernarg_segment_size = 0;
    std::vector<DeviceAddress> variable_addresses;
};

struct Runtime::LoadedExecutable {
    Executable info;
    std::map<std::string, LoadedKernel, std::less<>> kernels;
};

class Runtime::MemoryView final : public DeviceMemory {
public:
    explicit MemoryView(Runtime& rt) : rt_(rt) {}

    void read(DeviceAddress address, std::span<std::uint8_t> out) override {
        Allocation& a = locate(address, out.size());
        std::memcpy(out.data(), a.bytes.data() + offset_, out.size());
    }
    void write(DeviceAddress address, ByteView data) override {
        Allocation& a = locate(address, data.size());
        std::memcpy(a.bytes.data() + offset_, data.data(), data.size());
    }

private:
    Allocation& locate(DeviceAddress address, std::size_t len) {
        try {
            Allocation& a = rt_.containing_locked(address, len);
            offset_ = address.value - base_of(address);
            return a;
        } catch (const DeviceError& e) {
            throw DeviceError(DeviceErrc::Fault, "invalid device access at " + hex_address(address.value), address);
        }
    }
    std::uint64_t base_of(DeviceAddress address) const {
        auto it = rt_.allocations_.upper_bound(address.value);
        return std::prev(it)->first;
    }

    Runtime& rt_;
    std::uint64_t offset_ = 0;
};

Runtime::Runtime(RuntimeOptions options) : options_(std::move(options)) {
    const auto& reserved = options_.reserved_ranges;
    for (std::size_t i = 0; i < reserved.size(); ++i) {
        if (reserved[i].size == 0 || reserved[i].end() > kVaLimit || reserved[i].end() < reserved[i].base.value)
            throw DeviceError(DeviceErrc::InvalidArgument, "reserved range outside the VA space");
        for (std::size_t j = 0; j < i; ++j)
            if (reserved[i].overlaps(reserved[j]))
                throw DeviceError(DeviceErrc::InvalidArgument, "reserved ranges overlap");
    }

    const std::uint64_t start_slot = aperture_base_for_seed(options_.aperture_seed).value / kApertureSize;
    bool placed = false;
    for (std::uint64_t i = 0; i < kApertureSlots && !placed; ++i) {
        const AddressRange candidate{DeviceAddress{((start_slot + i) & kSlotMask) * kApertureSize}, kApertureSize};
        const bool clear = std::none_of(reserved.begin(), reserved.end(),
                                        [&](const AddressRange& r) { return r.overlaps(candidate); });
        if (clear) {
            aperture_ = candidate;
            placed = true;
        }
    }
    if (!placed) throw DeviceError(DeviceErrc::VaExhausted, "no aperture position avoids the reserved ranges");
    // Reservations are released here; callers re-reserve exact addresses later.
    install_default_table();
}

Runtime::~Runtime() = default;

void Runtime::install_default_table() {
    api_.pool_allocate = [this](std::uint64_t size) { return pool_allocate(size); };
    api_.vmem_reserve_map = [this](std::optional<DeviceAddress> base, std::uint64_t size) {
        return vmem_reserve_map(base, size);
    };
    api_.free = [this](DeviceAddress base) { free(base); };
    api_.copy_to_device = [this](DeviceAddress dst, ByteView src) { copy_to_device(dst, src); };
    api_.copy_to_host = [this](std::span<std::uint8_t> dst, DeviceAddress src) { copy_to_host(dst, src); };
    api_.copy_on_device = [this](DeviceAddress dst, DeviceAddress src, std::uint64_t n) { copy_on_device(dst, src, n); };
    api_.load_code_object = [this](ByteView bytes) { return load_code_object(bytes); };
    api_.symbol_info = [this](ExecutableId e, std::string_view n, SymbolQuery q) { return symbol_info(e, n, q); };
    api_.queue_create = [this] { return queue_create(); };
    api_.queue_submit = [this](QueueId q, const DispatchPacket& p) { queue_submit(q, p); };
    api_.signal_create = [this](std::int64_t v) { return signal_create(v); };
    api_.signal_subtract = [this](SignalHandle s, std::int64_t v) { signal_subtract(s, v); };
    api_.signal_wait_eq = [this](SignalHandle s, std::int64_t v, std::chrono::milliseconds t) {
        return signal_wait_eq(s, v, t);
    };
}

bool Runtime::range_free_locked(const AddressRange& range) const {
    if (range.end() > kVaLimit || range.end() < range.base.value) return false;
    if (range.overlaps(aperture_)) return false;
    auto it = allocations_.upper_bound(range.base.value);
    if (it != allocations_.begin()) {
        auto prev = std::prev(it);
        if (AddressRange{DeviceAddress{prev->first}, page_round_up(std::max<std::uint64_t>(prev->second.size, 1))}.overlaps(range))
            return false;
    }
    return it == allocations_.end() || it->first >= range.end();
}

std::optional<DeviceAddress> Runtime::find_free_locked(std::uint64_t footprint) const {
    std::vector<AddressRange> occupied;
    occupied.reserve(allocations_.size() + 1);
    for (const auto& [base, a] : allocations_)
        occupied.push_back({DeviceAddress{base}, page_round_up(std::max<std::uint64_t>(a.size, 1))});
    occupied.push_back(aperture_);
    std::sort(occupied.begin(), occupied.end(), [](const auto& l, const auto& r) { return l.base < r.base; });

    const auto scan = [&](std::uint64_t from, std::uint64_t limit) -> std::optional<DeviceAddress> {
        std::uint64_t candidate = from;
        for (const auto& r : occupied) {
            if (r.end() <= candidate) continue;
            if (r.base.value >= candidate + footprint) break;
            candidate = page_round_up(r.end());
        }
        if (candidate + footprint <= limit) return DeviceAddress{candidate};
        return std::nullopt;
    };
    if (auto hit = scan(kAllocationCursor.value, kVaLimit)) return hit;
    return scan(kLowAllocationBase.value, kAllocationCursor.value);
}

DeviceAddress Runtime::allocate_locked(std::uint64_t size, AllocKind kind) {
    const std::uint64_t footprint = page_round_up(std::max<std::uint64_t>(size, 1));
    auto base = find_free_locked(footprint);
    if (!base) throw DeviceError(DeviceErrc::VaExhausted, "no free range of " + std::to_string(footprint) + " bytes");
    allocations_.emplace(base->value, Allocation{size, kind, Bytes(size, 0)});
    return *base;
}

DeviceAddress Runtime::pool_allocate(std::uint64_t size) {
    if (size == 0) throw DeviceError(DeviceErrc::InvalidArgument, "allocation size must be > 0");
    std::lock_guard lock(mu_);
    return allocate_locked(size, AllocKind::Pool);
}

DeviceAddress Runtime::vmem_reserve_map(std::optional<DeviceAddress> requested, std::uint64_t size) {
    if (size == 0) throw DeviceError(DeviceErrc::InvalidArgument, "reservation size must be > 0");
    std::lock_guard lock(mu_);
    if (!requested) return allocate_locked(size, AllocKind::Vmem);
    if (requested->value % kPageSize != 0)
        throw DeviceError(DeviceErrc::InvalidArgument, "requested base " + hex_address(requested->value) + " not page aligned");
    const AddressRange want{*requested, page_round_up(size)};
    if (!range_free_locked(want))
        throw DeviceError(DeviceErrc::ExactAddressUnavailable,
                          "range [" + hex_address(want.base.value) + ", " + hex_address(want.end()) + ") is not free",
                          *requested);
    allocations_.emplace(requested->value, Allocation{size, AllocKind::Vmem, Bytes(size, 0)});
    return *requested;
}

void Runtime::free(DeviceAddress base) {
    std::lock_guard lock(mu_);
    auto it = allocations_.find(base.value);
    if (it == allocations_.end() || it->second.kind == AllocKind::Variable)
        throw DeviceError(DeviceErrc::UnknownBase, "no live allocation at " + hex_address(base.value), base);
    allocations_.erase(it);
}

Runtime::Allocation& Runtime::containing_locked(DeviceAddress addr, std::uint64_t len) {
    auto it = allocations_.upper_bound(addr.value);
    if (it == allocations_.begin())
        throw DeviceError(DeviceErrc::RegionNotTracked, "address " + hex_address(addr.value) + " is not tracked", addr);
    --it;
    Allocation& a = it->second;
    const AddressRange range{DeviceAddress{it->first}, a.size};
    if (addr.value >= range.end() && !(a.size == 0 && addr.value == range.base.value))
        throw DeviceError(DeviceErrc::RegionNotTracked, "address " + hex_address(addr.value) + " is not tracked", addr);
    if (!range.contains(addr, len) && len != 0)
        throw DeviceError(DeviceErrc::OutOfBounds,
                          std::to_string(len) + " bytes at " + hex_address(addr.value) + " exceed allocation " +
                              hex_address(range.base.value) + "+" + std::to_string(a.size),
                          addr);
    return a;
}

void Runtime::copy_to_device(DeviceAddress dst, ByteView src) {
    std::lock_guard lock(mu_);
    Allocation& a = containing_locked(dst, src.size());
    auto it = allocations_.upper_bound(dst.value);
    std::memcpy(a.bytes.data() + (dst.value - std::prev(it)->first), src.data(), src.size());
}

void Runtime::copy_to_host(std::span<std::uint8_t> dst, DeviceAddress src) {
    std::lock_guard lock(mu_);
    Allocation& a = containing_locked(src, dst.size());
    auto it = allocations_.upper_bound(src.value);
    std::memcpy(dst.data(), a.bytes.data() + (src.value - std::prev(it)->first), dst.size());
}

void Runtime::copy_on_device(DeviceAddress dst, DeviceAddress src, std::uint64_t size) {
    std::lock_guard lock(mu_);
    Allocation& s = containing_locked(src, size);
    const std::uint64_t s_off = src.value - std::prev(allocations_.upper_bound(src.value))->first;
    Allocation& d = containing_locked(dst, size);
    const std::uint64_t d_off = dst.value - std::prev(allocations_.upper_bound(dst.value))->first;
    std::memmove(d.bytes.data() + d_off, s.bytes.data() + s_off, size);
}

ExecutableId Runtime::load_code_object(ByteView bytes) {
    kc::ObjectImage image;
    try {
        image = kc::parse_image(bytes);
    } catch (const kc::FormatError& e) {
        throw DeviceError(DeviceErrc::MalformedCodeObject, e.what());
    }
    if (image.kind != kc::ImageKind::CodeObject)
        throw DeviceError(DeviceErrc::MalformedCodeObject, "object file is not a loadable code object");

    auto loaded = std::make_unique<LoadedExecutable>();
    loaded->info.sha256 = sha256_hex(bytes);

    std::lock_guard lock(mu_);
    loaded->info.id = ExecutableId{executables_.size() + 1};
    std::vector<std::uint64_t> placed;
    try {
        for (const auto& var : image.variables) {
            if (loaded->info.symbols.count(var.name))
                throw DeviceError(DeviceErrc::MalformedCodeObject, "duplicate symbol " + var.name);
            const DeviceAddress addr = allocate_locked(var.size, AllocKind::Variable);
            placed.push_back(addr.value);
            std::copy(var.init.begin(), var.init.end(), allocations_.at(addr.value).bytes.begin());
            SymbolInfo sym;
            sym.name = var.name;
            sym.kind = SymbolKind::Variable;
            sym.address = addr;
            sym.size = var.size;
            loaded->info.symbols.emplace(var.name, sym);
        }
        for (const auto& k : image.kernels) {
            if (loaded->info.symbols.count(k.mangled))
                throw DeviceError(DeviceErrc::MalformedCodeObject, "duplicate symbol " + k.mangled);
            LoadedKernel lk;
            try {
                lk.program = decode(k.code);
            } catch (const std::invalid_argument& e) {
                throw DeviceError(DeviceErrc::MalformedCodeObject, k.mangled + ": " + e.what());
            }
            lk.kernarg_segment_size = k.kernarg_segment_size();
            for (const auto& ref : k.varrefs) {
                auto it = loaded->info.symbols.find(ref);
                if (it == loaded->info.symbols.end() || it->second.kind != SymbolKind::Variable)
                    throw DeviceError(DeviceErrc::MalformedCodeObject, k.mangled + " references unknown variable " + ref);
                lk.variable_addresses.push_back(it->second.address);
            }
            SymbolInfo sym;
            sym.name = k.mangled;
            sym.kind = SymbolKind::Kernel;
            sym.kernel_object = KernelObject{next_kernel_handle_};
            next_kernel_handle_ += 0x40;
            sym.kernarg_segment_size = lk.kernarg_segment_size;
            kernel_handles_.emplace(sym.kernel_object.handle, std::make_pair(executables_.size(), k.mangled));
            loaded->info.symbols.emplace(k.mangled, sym);
            loaded->kernels.emplace(k.mangled, std::move(lk));
        }
    } catch (...) {
        for (auto base : placed) allocations_.erase(base);
        for (auto it = kernel_handles_.begin(); it != kernel_handles_.end();)
            it = it->second.first == executables_.size() ? kernel_handles_.erase(it) : std::next(it);
        throw;
    }
    const ExecutableId id = loaded->info.id;
    executables_.push_back(std::move(loaded));
    return id;
}

const Runtime::LoadedExecutable& Runtime::exec_locked(ExecutableId id) const {
    if (id.id == 0 || id.id > executables_.size())
        throw DeviceError(DeviceErrc::InvalidHandle, "unknown executable " + std::to_string(id.id));
    return *executables_[id.id - 1];
}

std::uint64_t Runtime::symbol_info(ExecutableId exec, std::string_view name, SymbolQuery query) {
    std::lock_guard lock(mu_);
    const auto& symbols = exec_locked(exec).info.symbols;
    auto it = symbols.find(std::string(name));
    if (it == symbols.end()) throw DeviceError(DeviceErrc::SymbolNotFound, "symbol " + std::string(name) + " not found");
    const SymbolInfo& s = it->second;
    const bool kernel_query = query == SymbolQuery::KernelObject || query == SymbolQuery::KernargSegmentSize;
    if (kernel_query != (s.kind == SymbolKind::Kernel))
        throw DeviceError(DeviceErrc::InvalidArgument, "query does not apply to symbol " + s.name);
    switch (query) {
        case SymbolQuery::KernelObject: return s.kernel_object.handle;
        case SymbolQuery::KernargSegmentSize: return s.kernarg_segment_size;
        case SymbolQuery::VariableAddress: return s.address.value;
        case SymbolQuery::VariableSize: return s.size;
    }
    return 0;
}

QueueId Runtime::queue_create() {
    std::lock_guard lock(queues_mu_);
    const QueueId id{queues_.size() + 1};
    queues_.emplace(id.id, std::make_unique<std::mutex>());
    return id;
}

void Runtime::queue_submit(QueueId queue, const DispatchPacket& packet) {
    std::mutex* qmu = nullptr;
    {
        std::lock_guard lock(queues_mu_);
        auto it = queues_.find(queue.id);
        if (it == queues_.end()) throw DeviceError(DeviceErrc::InvalidHandle, "unknown queue " + std::to_string(queue.id));
        qmu = it->second.get();
    }
    std::lock_guard qlock(*qmu);
    {
        std::lock_guard lock(mu_);
        auto h = kernel_handles_.find(packet.kernel_object.handle);
        if (h == kernel_handles_.end())
            throw DeviceError(DeviceErrc::InvalidHandle,
                              "unknown kernel object " + hex_address(packet.kernel_object.handle));
        const LoadedExecutable& exec = *executables_[h->second.first];
        const LoadedKernel& kernel = exec.kernels.find(h->second.second)->second;

        Bytes kernarg(kernel.kernarg_segment_size);
        MemoryView view(*this);
        if (!kernarg.empty()) view.read(packet.kernarg_address, kernarg);
        const std::uint64_t retired = interpret_kernel(kernel.program, kernarg, packet.grid, packet.workgroup, view,
                                                       kernel.variable_addresses, options_.interpret);
        trace_.push_back({h->second.second, kc::display_name(h->second.second), retired, queue});
    }
    if (packet.completion_signal.handle != 0) signal_subtract(packet.completion_signal, 1);
}

SignalHandle Runtime::signal_create(std::int64_t initial) {
    std::lock_guard lock(signals_mu_);
    const SignalHandle h{next_signal_++};
    signals_.emplace(h.handle, initial);
    return h;
}

void Runtime::signal_subtract(SignalHandle signal, std::int64_t amount) {
    {
        std::lock_guard lock(signals_mu_);
        auto it = signals_.find(signal.handle);
        if (it == signals_.end()) throw DeviceError(DeviceErrc::InvalidHandle, "unknown signal");
        it->second -= amount;
    }
    signals_cv_.notify_all();
}

std::int64_t Runtime::signal_load(SignalHandle signal) const {
    std::lock_guard lock(signals_mu_);
    auto it = signals_.find(signal.handle);
    if (it == signals_.end()) throw DeviceError(DeviceErrc::InvalidHandle, "unknown signal");
    return it->second;
}

std::int64_t Runtime::signal_wait_eq(SignalHandle signal, std::int64_t value, std::chrono::milliseconds timeout) {
    std::unique_lock lock(signals_mu_);
    auto it = signals_.find(signal.handle);
    if (it == signals_.end()) throw DeviceError(DeviceErrc::InvalidHandle, "unknown signal");
    signals_cv_.wait_for(lock, timeout, [&] { return it->second == value; });
    return it->second;
}

AddressRange Runtime::aperture() const { return aperture_; }

std::vector<AllocationInfo> Runtime::allocations() const {
    std::lock_guard lock(mu_);
    std::vector<AllocationInfo> out;
    for (const auto& [base, a] : allocations_) out.push_back({DeviceAddress{base}, a.size, a.kind});
    return out;
}

std::optional<AllocationInfo> Runtime::find_allocation(DeviceAddress base) const {
    std::lock_guard lock(mu_);
    auto it = allocations_.find(base.value);
    if (it == allocations_.end()) return std::nullopt;
    return AllocationInfo{base, it->second.size, it->second.kind};
}

Executable Runtime::executable(ExecutableId id) const {
    std::lock_guard lock(mu_);
    return exec_locked(id).info;
}

std::vector<Executable> Runtime::executables() const {
    std::lock_guard lock(mu_);
    std::vector<Executable> out;
    for (const auto& e : executables_) out.push_back(e->info);
    return out;
}

std::vector<DispatchTraceEntry> Runtime::trace() const {
    std::lock_guard lock(mu_);
    return trace_;
}

std::uint64_t Runtime::dispatch_count() const {
    std::lock_guard lock(mu_);
    return trace_.size();
}

std::unique_ptr<Runtime> Runtime::clone_memory() const {
    RuntimeOptions opts;
    opts.aperture_seed = options_.aperture_seed;
    opts.interpret = options_.interpret;
    auto copy = std::make_unique<Runtime>(opts);
    std::lock_guard lock(mu_);
    copy->aperture_ = aperture_;
    for (const auto& [base, a] : allocations_)
        if (a.kind != AllocKind::Variable) copy->allocations_.emplace(base, a);
    return copy;
}

}  // namespace kcap::vdev
