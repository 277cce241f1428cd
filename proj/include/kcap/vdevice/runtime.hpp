#pragma once

#include "kcap/common/bytes.hpp"
#include "kcap/vdevice/interpreter.hpp"
#include "kcap/vdevice/types.hpp"

#include <chrono>
#include <condition_variable>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace kcap::vdev {

inline constexpr std::uint64_t kApertureSize = 256ull << 20;
inline constexpr std::uint64_t kApertureSlots = kVaLimit / kApertureSize;
/// First-fit allocation starts here and wraps to kLowAllocationBase.
inline constexpr DeviceAddress kAllocationCursor{0x7f8a00000000};
inline constexpr DeviceAddress kLowAllocationBase{0x10000000};

/// Aperture position chosen by a seed before any reservation is considered.
DeviceAddress aperture_base_for_seed(std::uint64_t seed);
/// Inverse of aperture_base_for_seed for 256 MiB-aligned bases.
std::uint64_t aperture_seed_for_base(DeviceAddress base);

struct RuntimeOptions {
    std::uint64_t aperture_seed = 0;
    /// Ranges the aperture must avoid; released again once init completes.
    std::vector<AddressRange> reserved_ranges;
    InterpretOptions interpret;

    /// Reads KCAP_APERTURE_SEED when set.
    static RuntimeOptions from_env();
};

enum class SymbolKind { Kernel, Variable };
enum class SymbolQuery { KernelObject, KernargSegmentSize, VariableAddress, VariableSize };

struct SymbolInfo {
    std::string name;
    SymbolKind kind = SymbolKind::Kernel;
    KernelObject kernel_object;
    std::uint32_t kernarg_segment_size = 0;
    DeviceAddress address;
    std::uint64_t size = 0;
};

struct Executable {
    ExecutableId id;
    std::string sha256;
    std::map<std::string, SymbolInfo> symbols;

    std::vector<SymbolInfo> variables() const;
};

struct AllocationInfo {
    DeviceAddress base;
    std::uint64_t size = 0;
    AllocKind kind = AllocKind::Pool;
};

struct DispatchPacket {
    KernelObject kernel_object;
    Dim3 grid;
    Dim3 workgroup;
    DeviceAddress kernarg_address;
    SignalHandle completion_signal;
};

struct DispatchTraceEntry {
    std::string mangled;
    std::string kernel_name;
    std::uint64_t instructions = 0;
    QueueId queue;
};

/// Entry points the host calls through. Installing an interposer replaces
/// entries in the live table; the Runtime member functions are the originals.
struct ApiTable {
    std::function<DeviceAddress(std::uint64_t)> pool_allocate;
    std::function<DeviceAddress(std::optional<DeviceAddress>, std::uint64_t)> vmem_reserve_map;
    std::function<void(DeviceAddress)> free;
    std::function<void(DeviceAddress, ByteView)> copy_to_device;
    std::function<void(std::span<std::uint8_t>, DeviceAddress)> copy_to_host;
    std::function<void(DeviceAddress, DeviceAddress, std::uint64_t)> copy_on_device;
    std::function<ExecutableId(ByteView)> load_code_object;
    std::function<std::uint64_t(ExecutableId, std::string_view, SymbolQuery)> symbol_info;
    std::function<QueueId()> queue_create;
    std::function<void(QueueId, const DispatchPacket&)> queue_submit;
    std::function<SignalHandle(std::int64_t)> signal_create;
    std::function<void(SignalHandle, std::int64_t)> signal_subtract;
    std::function<std::int64_t(SignalHandle, std::int64_t, std::chrono::milliseconds)> signal_wait_eq;

    bool intercepted = false;
};

/// Deterministic stand-in for a GPU runtime: a 48-bit device address space,
/// allocation and copy APIs, code-object loading, queues with completion
/// signals, and a serialized bytecode interpreter.
class Runtime {
public:
    explicit Runtime(RuntimeOptions options = {});
    ~Runtime();

    Runtime(const Runtime&) = delete;
    Runtime& operator=(const Runtime&) = delete;

    ApiTable& api() { return api_; }

    DeviceAddress pool_allocate(std::uint64_t size);
    /// With a requested base, returns exactly that base or throws
    /// ExactAddressUnavailable.
    DeviceAddress vmem_reserve_map(std::optional<DeviceAddress> requested, std::uint64_t size);
    void free(DeviceAddress base);

    void copy_to_device(DeviceAddress dst, ByteView src);
    void copy_to_host(std::span<std::uint8_t> dst, DeviceAddress src);
    void copy_on_device(DeviceAddress dst, DeviceAddress src, std::uint64_t size);

    ExecutableId load_code_object(ByteView bytes);
    std::uint64_t symbol_info(ExecutableId exec, std::string_view name, SymbolQuery query);

    QueueId queue_create();
    void queue_submit(QueueId queue, const DispatchPacket& packet);

    SignalHandle signal_create(std::int64_t initial);
    void signal_subtract(SignalHandle signal, std::int64_t amount = 1);
    std::int64_t signal_load(SignalHandle signal) const;
    /// Returns the value observed when the wait ended.
    std::int64_t signal_wait_eq(SignalHandle signal, std::int64_t value, std::chrono::milliseconds timeout);

    AddressRange aperture() const;
    std::vector<AllocationInfo> allocations() const;
    std::optional<AllocationInfo> find_allocation(DeviceAddress base) const;
    Executable executable(ExecutableId id) const;
    std::vector<Executable> executables() const;
    std::vector<DispatchTraceEntry> trace() const;
    std::uint64_t dispatch_count() const;

    /// Fresh runtime with identical aperture and a byte copy of every
    /// pool/vmem allocation at the same addresses. Executables are not copied.
    std::unique_ptr<Runtime> clone_memory() const;

private:
    struct Allocation {
        std::uint64_t size = 0;
        AllocKind kind = AllocKind::Pool;
        Bytes bytes;
    };
    struct LoadedKernel;
    struct LoadedExecutable;
    class MemoryView;

    void install_default_table();
    std::optional<DeviceAddress> find_free_locked(std::uint64_t footprint) const;
    bool range_free_locked(const AddressRange& range) const;
    DeviceAddress allocate_locked(std::uint64_t size, AllocKind kind);
    Allocation& containing_locked(DeviceAddress addr, std::uint64_t len);
    const LoadedExecutable& exec_locked(ExecutableId id) const;

    RuntimeOptions options_;
    ApiTable api_;
    AddressRange aperture_;

    mutable std::mutex mu_;
    std::map<std::uint64_t, Allocation> allocations_;
    std::vector<std::unique_ptr<LoadedExecutable>> executables_;
    std::map<std::uint64_t, std::pair<std::size_t, std::string>> kernel_handles_;
    std::uint64_t next_kernel_handle_ = 0x1000;
    std::vector<DispatchTraceEntry> trace_;

    std::mutex queues_mu_;
    std::map<std::uint64_t, std::unique_ptr<std::mutex>> queues_;

    mutable std::mutex signals_mu_;
    std::condition_variable signals_cv_;
    std::map<std::uint64_t, std::int64_t> signals_;
    std::uint64_t next_signal_ = 1;
};

}  // namespace kcap::vdev
