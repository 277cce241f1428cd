#pragma once

#include "kcap/common/bytes.hpp"
#include "kcap/vdevice/isa.hpp"
#include "kcap/vdevice/types.hpp"

#include <span>

namespace kcap::vdev {

class DeviceMemory {
public:
    virtual ~DeviceMemory() = default;
    /// Both throw DeviceError(Fault) carrying the first unmapped address.
    virtual void read(DeviceAddress address, std::span<std::uint8_t> out) = 0;
    virtual void write(DeviceAddress address, ByteView data) = 0;
};

struct InterpretOptions {
    std::uint64_t instruction_budget = 1ull << 32;
};

/// Runs every workitem to completion, lexicographically by (z, y, x) global
/// id. Returns the retired instruction count over all workitems.
std::uint64_t interpret_kernel(std::span<const Instruction> program, ByteView kernarg, Dim3 grid, Dim3 workgroup,
                               DeviceMemory& memory, std::span<const DeviceAddress> variable_addresses = {},
                               const InterpretOptions& options = {});

}  // namespace kcap::vdev
