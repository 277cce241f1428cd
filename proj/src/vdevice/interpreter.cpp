#include "kcap/vdevice/interpreter.hpp"

#include "kcap/common/hex.hpp"
#include "kcap/vdevice/half.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <limits>

namespace kcap::vdev {

namespace {

bool is_float(ValueType t) { return t == ValueType::F16 || t == ValueType::F32; }

std::uint64_t truncate_to(ValueType t, std::uint64_t bits) {
    const std::size_t w = width_of(t);
    return w == 8 ? bits : bits & ((1ull << (8 * w)) - 1);
}

float as_f32(std::uint64_t bits) { return std::bit_cast<float>(static_cast<std::uint32_t>(bits)); }
std::uint64_t from_f32(float f) { return std::bit_cast<std::uint32_t>(f); }

double to_double(ValueType t, std::uint64_t bits) {
    switch (t) {
        case ValueType::F16: return half_to_double(static_cast<std::uint16_t>(bits));
        case ValueType::F32: return as_f32(bits);
        case ValueType::I64: return static_cast<double>(static_cast<std::int64_t>(bits));
        default: return static_cast<double>(truncate_to(t, bits));
    }
}

std::uint64_t from_double(ValueType t, double v) {
    switch (t) {
        case ValueType::F16: return half_from_double(v);
        case ValueType::F32: return from_f32(static_cast<float>(v));
        case ValueType::I64: {
            if (std::isnan(v)) return 0;
            if (v >= 9.2233720368547758e18) return static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max());
            if (v <= -9.2233720368547758e18) return static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::min());
            return static_cast<std::uint64_t>(static_cast<std::int64_t>(v));
        }
        default: {
            if (std::isnan(v) || v <= 0) return 0;
            if (v >= 1.8446744073709552e19) return truncate_to(t, ~0ull);
            return truncate_to(t, static_cast<std::uint64_t>(v));
        }
    }
}

class Workitem {
public:
    Workitem(std::span<const Instruction> program, ByteView kernarg, DeviceMemory& memory,
             std::span<const DeviceAddress> vars)
        : program_(program), kernarg_(kernarg), memory_(memory), vars_(vars) {}

    std::uint64_t run(std::uint64_t gx, std::uint64_t gy, std::uint64_t gz, std::uint64_t budget) {
        regs_.fill(0);
        regs_[kRegGidX] = gx;
        regs_[kRegGidY] = gy;
        regs_[kRegGidZ] = gz;
        std::uint64_t retired = 0;
        std::size_t pc = 0;
        while (pc < program_.size()) {
            if (retired >= budget)
                throw DeviceError(DeviceErrc::InstructionLimit, "instruction budget exhausted");
            const Instruction& ins = program_[pc];
            ++retired;
            ++pc;
            if (!step(ins, pc)) break;
        }
        return retired;
    }

private:
    std::uint64_t operand_b(const Instruction& ins) const {
        return ins.b_is_imm ? static_cast<std::uint64_t>(ins.imm) : regs_[ins.b];
    }

    void set(std::uint8_t reg, std::uint64_t value) {
        if (reg < kNumGeneralRegisters) regs_[reg] = value;
    }

    std::uint64_t arith(const Instruction& ins) {
        const std::uint64_t a = regs_[ins.a];
        const std::uint64_t b = operand_b(ins);
        if (ins.type == ValueType::F32) {
            const float x = as_f32(a), y = as_f32(b);
            switch (ins.op) {
                case Opcode::Add: return from_f32(x + y);
                case Opcode::Sub: return from_f32(x - y);
                case Opcode::Mul: return from_f32(x * y);
                default: return from_f32(x / y);
            }
        }
        if (ins.type == ValueType::F16) {
            const double x = half_to_double(static_cast<std::uint16_t>(a));
            const double y = half_to_double(static_cast<std::uint16_t>(b));
            switch (ins.op) {
                case Opcode::Add: return half_from_double(x + y);
                case Opcode::Sub: return half_from_double(x - y);
                case Opcode::Mul: return half_from_double(x * y);
                default: return half_from_double(x / y);
            }
        }
        const auto x = static_cast<std::int64_t>(a), y = static_cast<std::int64_t>(b);
        switch (ins.op) {
            case Opcode::Add: return truncate_to(ins.type, a + b);
            case Opcode::Sub: return truncate_to(ins.type, a - b);
            case Opcode::Mul: return truncate_to(ins.type, a * b);
            default:
                if (y == 0) throw DeviceError(DeviceErrc::DivisionByZero, "integer division by zero");
                if (x == std::numeric_limits<std::int64_t>::min() && y == -1)
                    throw DeviceError(DeviceErrc::DivisionByZero, "integer division overflow");
                return truncate_to(ins.type, static_cast<std::uint64_t>(x / y));
        }
    }

    bool less(const Instruction& ins) const {
        const std::uint64_t a = regs_[ins.a];
        const std::uint64_t b = operand_b(ins);
        if (is_float(ins.type)) return to_double(ins.type, a) < to_double(ins.type, b);
        if (ins.type == ValueType::I64) return static_cast<std::int64_t>(a) < static_cast<std::int64_t>(b);
        return truncate_to(ins.type, a) < truncate_to(ins.type, b);
    }

    // Returns false on HALT.
    bool step(const Instruction& ins, std::size_t& pc) {
        switch (ins.op) {
            case Opcode::Halt: return false;
            case Opcode::LdArg: {
                const std::size_t w = width_of(ins.type);
                const auto off = static_cast<std::uint64_t>(ins.imm);
                if (off + w > kernarg_.size())
                    throw DeviceError(DeviceErrc::Fault, "kernarg read past segment end at offset " + std::to_string(off));
                set(ins.dst, load_le<std::uint64_t>(kernarg_.data() + off, w));
                return true;
            }
            case Opcode::Ld: {
                std::array<std::uint8_t, 8> buf{};
                const std::size_t w = width_of(ins.type);
                memory_.read(DeviceAddress{regs_[ins.a] + static_cast<std::uint64_t>(ins.imm)}, std::span(buf.data(), w));
                set(ins.dst, load_le<std::uint64_t>(buf.data(), w));
                return true;
            }
            case Opcode::St: {
                std::array<std::uint8_t, 8> buf{};
                const std::size_t w = width_of(ins.type);
                store_le(buf.data(), regs_[ins.b], w);
                memory_.write(DeviceAddress{regs_[ins.a] + static_cast<std::uint64_t>(ins.imm)}, ByteView(buf.data(), w));
                return true;
            }
            case Opcode::MovI: set(ins.dst, static_cast<std::uint64_t>(ins.imm)); return true;
            case Opcode::Mov: set(ins.dst, regs_[ins.a]); return true;
            case Opcode::Add:
            case Opcode::Sub:
            case Opcode::Mul:
            case Opcode::Div: set(ins.dst, arith(ins)); return true;
            case Opcode::FAdd16:
                set(ins.dst, half_add(static_cast<std::uint16_t>(regs_[ins.a]), static_cast<std::uint16_t>(operand_b(ins))));
                return true;
            case Opcode::FMul16:
                set(ins.dst, half_mul(static_cast<std::uint16_t>(regs_[ins.a]), static_cast<std::uint16_t>(operand_b(ins))));
                return true;
            case Opcode::Cvt:
                set(ins.dst, from_double(ins.type, to_double(ins.src_type, regs_[ins.a])));
                return true;
            case Opcode::CmpLt: set(ins.dst, less(ins) ? 1 : 0); return true;
            case Opcode::Br: pc = static_cast<std::size_t>(ins.imm); return true;
            case Opcode::Brz:
                if (regs_[ins.a] == 0) pc = static_cast<std::size_t>(ins.imm);
                return true;
            case Opcode::Brnz:
                if (regs_[ins.a] != 0) pc = static_cast<std::size_t>(ins.imm);
                return true;
            case Opcode::LdVar: {
                const auto idx = static_cast<std::size_t>(ins.imm);
                if (idx >= vars_.size())
                    throw DeviceError(DeviceErrc::Fault, "module variable reference " + std::to_string(idx) + " unresolved");
                set(ins.dst, vars_[idx].value);
                return true;
            }
        }
        return false;
    }

    std::span<const Instruction> program_;
    ByteView kernarg_;
    DeviceMemory& memory_;
    std::span<const DeviceAddress> vars_;
    std::array<std::uint64_t, kNumRegisters> regs_{};
};

void validate(std::span<const Instruction> program) {
    for (std::size_t i = 0; i < program.size(); ++i) {
        const Instruction& ins = program[i];
        const bool branch = ins.op == Opcode::Br || ins.op == Opcode::Brz || ins.op == Opcode::Brnz;
        if (branch && (ins.imm < 0 || static_cast<std::uint64_t>(ins.imm) > program.size()))
            throw DeviceError(DeviceErrc::InvalidArgument, "branch target out of range at instruction " + std::to_string(i));
    }
}

}  // namespace

std::uint64_t interpret_kernel(std::span<const Instruction> program, ByteView kernarg, Dim3 grid, Dim3 workgroup,
                               DeviceMemory& memory, std::span<const DeviceAddress> variable_addresses,
                               const InterpretOptions& options) {
    if (grid.count() == 0 || workgroup.count() == 0)
        throw DeviceError(DeviceErrc::InvalidArgument, "grid and workgroup dimensions must be >= 1");
    validate(program);
    Workitem item(program, kernarg, memory, variable_addresses);
    std::uint64_t retired = 0;
    for (std::uint64_t z = 0; z < grid.z; ++z)
        for (std::uint64_t y = 0; y < grid.y; ++y)
            for (std::uint64_t x = 0; x < grid.x; ++x) {
                if (retired >= options.instruction_budget)
                    throw DeviceError(DeviceErrc::InstructionLimit, "instruction budget exhausted");
                retired += item.run(x, y, z, options.instruction_budget - retired);
            }
    return retired;
}

}  // namespace kcap::vdev
