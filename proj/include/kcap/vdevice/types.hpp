#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>

namespace kcap::vdev {

inline constexpr std::uint64_t kVaLimit = 1ull << 48;
inline constexpr std::uint64_t kPageSize = 4096;

struct DeviceAddress {
    std::uint64_t value = 0;

    constexpr auto operator<=>(const DeviceAddress&) const = default;
    constexpr DeviceAddress operator+(std::uint64_t offset) const { return {value + offset}; }
};

struct AddressRange {
    DeviceAddress base;
    std::uint64_t size = 0;

    constexpr std::uint64_t end() const { return base.value + size; }
    constexpr bool overlaps(const AddressRange& o) const {
        return base.value < o.end() && o.base.value < end();
    }
    constexpr bool contains(DeviceAddress a, std::uint64_t len = 1) const {
        return a.value >= base.value && a.value + len <= end() && a.value + len >= a.value;
    }
};

constexpr std::uint64_t page_round_up(std::uint64_t n) { return (n + kPageSize - 1) & ~(kPageSize - 1); }

struct Dim3 {
    std::uint32_t x = 1;
    std::uint32_t y = 1;
    std::uint32_t z = 1;

    friend bool operator==(const Dim3&, const Dim3&) = default;
    std::uint64_t count() const { return std::uint64_t{x} * y * z; }
};

struct KernelObject {
    std::uint64_t handle = 0;
    auto operator<=>(const KernelObject&) const = default;
};

struct SignalHandle {
    std::uint64_t handle = 0;
    auto operator<=>(const SignalHandle&) const = default;
};

struct QueueId {
    std::uint64_t id = 0;
    auto operator<=>(const QueueId&) const = default;
};

struct ExecutableId {
    std::uint64_t id = 0;
    auto operator<=>(const ExecutableId&) const = default;
};

enum class AllocKind { Pool, Vmem, Variable };

std::string to_string(AllocKind kind);

enum class DeviceErrc {
    InvalidArgument,
    VaExhausted,
    ExactAddressUnavailable,
    RegionNotTracked,
    OutOfBounds,
    UnknownBase,
    MalformedCodeObject,
    SymbolNotFound,
    InvalidHandle,
    Fault,
    DivisionByZero,
    InstructionLimit,
};

std::string to_string(DeviceErrc code);

class DeviceError : public std::runtime_error {
public:
    DeviceError(DeviceErrc code, const std::string& what, std::optional<DeviceAddress> address = std::nullopt)
        : std::runtime_error(to_string(code) + ": " + what), code_(code), address_(address) {}

    DeviceErrc code() const { return code_; }
    std::optional<DeviceAddress> address() const { return address_; }

private:
    DeviceErrc code_;
    std::optional<DeviceAddress> address_;
};

}  // namespace kcap::vdev

template <>
struct std::hash<kcap::vdev::DeviceAddress> {
    std::size_t operator()(const kcap::vdev::DeviceAddress& a) const noexcept { return std::hash<std::uint64_t>{}(a.value); }
};
