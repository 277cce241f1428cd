#pragma once

#include "kcap/common/bytes.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace kcap::vdev {

enum class Opcode : std::uint8_t {
    Halt = 0,
    LdArg,   // dst <- kernarg[imm .. imm+width(type))
    Ld,      // dst <- mem[a + imm]
    St,      // mem[a + imm] <- b
    MovI,    // dst <- imm
    Mov,     // dst <- a
    Add,
    Sub,
    Mul,
    Div,
    FAdd16,
    FMul16,
    Cvt,     // dst(type) <- a(src_type)
    CmpLt,
    Br,      // pc <- imm
    Brz,     // if a == 0: pc <- imm
    Brnz,
    LdVar,   // dst <- address of the kernel's imm-th referenced module variable
};

enum class ValueType : std::uint8_t { U8 = 0, U16, U32, U64, F16, F32, I64 };

std::size_t width_of(ValueType t);
std::string_view name_of(ValueType t);
std::optional<ValueType> value_type_from(std::string_view name);
std::string_view name_of(Opcode op);

inline constexpr std::uint8_t kNumGeneralRegisters = 32;
inline constexpr std::uint8_t kRegGidX = 32;
inline constexpr std::uint8_t kRegGidY = 33;
inline constexpr std::uint8_t kRegGidZ = 34;
inline constexpr std::uint8_t kNumRegisters = 35;

struct Instruction {
    Opcode op = Opcode::Halt;
    ValueType type = ValueType::U64;
    ValueType src_type = ValueType::U64;
    std::uint8_t dst = 0;
    std::uint8_t a = 0;
    std::uint8_t b = 0;
    bool b_is_imm = false;
    std::int64_t imm = 0;

    friend bool operator==(const Instruction&, const Instruction&) = default;
};

inline constexpr std::size_t kInstructionBytes = 16;

Bytes encode(const std::vector<Instruction>& program);

/// Throws std::invalid_argument on a truncated or invalid stream.
std::vector<Instruction> decode(ByteView bytecode);

std::string disassemble(const Instruction& ins);

}  // namespace kcap::vdev
