#include "kcap/vdevice/isa.hpp"

#include <array>
#include <stdexcept>

namespace kcap::vdev {

namespace {

constexpr std::array<std::string_view, 7> kTypeNames = {"u8", "u16", "u32", "u64", "f16", "f32", "i64"};
constexpr std::array<std::size_t, 7> kTypeWidths = {1, 2, 4, 8, 2, 4, 8};
constexpr std::array<std::string_view, 18> kOpNames = {
    "HALT", "LDARG", "LD",     "ST",     "MOVI", "MOV", "ADD", "SUB",  "MUL",
    "DIV",  "FADD16", "FMUL16", "CVT", "CMPLT", "BR",  "BRZ", "BRNZ", "LDVAR"};

std::string reg_name(std::uint8_t r) {
    switch (r) {
        case kRegGidX: return "gid.x";
        case kRegGidY: return "gid.y";
        case kRegGidZ: return "gid.z";
        default: return "r" + std::to_string(r);
    }
}

}  // namespace

std::size_t width_of(ValueType t) { return kTypeWidths.at(static_cast<std::size_t>(t)); }
std::string_view name_of(ValueType t) { return kTypeNames.at(static_cast<std::size_t>(t)); }
std::string_view name_of(Opcode op) { return kOpNames.at(static_cast<std::size_t>(op)); }

std::optional<ValueType> value_type_from(std::string_view name) {
    for (std::size_t i = 0; i < kTypeNames.size(); ++i)
        if (kTypeNames[i] == name) return static_cast<ValueType>(i);
    return std::nullopt;
}

Bytes encode(const std::vector<Instruction>& program) {
    Bytes out(program.size() * kInstructionBytes, 0);
    for (std::size_t i = 0; i < program.size(); ++i) {
        const Instruction& ins = program[i];
        std::uint8_t* p = out.data() + i * kInstructionBytes;
        p[0] = static_cast<std::uint8_t>(ins.op);
        p[1] = static_cast<std::uint8_t>(ins.type);
        p[2] = static_cast<std::uint8_t>(ins.src_type);
        p[3] = ins.dst;
        p[4] = ins.a;
        p[5] = ins.b;
        p[6] = ins.b_is_imm ? 1 : 0;
        store_le(p + 8, static_cast<std::uint64_t>(ins.imm), 8);
    }
    return out;
}

std::vector<Instruction> decode(ByteView bytecode) {
    if (bytecode.size() % kInstructionBytes != 0)
        throw std::invalid_argument("bytecode length is not a multiple of the instruction size");
    std::vector<Instruction> program;
    program.reserve(bytecode.size() / kInstructionBytes);
    for (std::size_t off = 0; off < bytecode.size(); off += kInstructionBytes) {
        const std::uint8_t* p = bytecode.data() + off;
        if (p[0] >= kOpNames.size() || p[1] >= kTypeNames.size() || p[2] >= kTypeNames.size())
            throw std::invalid_argument("invalid opcode or type at byte " + std::to_string(off));
        if (p[3] >= kNumRegisters || p[4] >= kNumRegisters || p[5] >= kNumRegisters || p[6] > 1)
            throw std::invalid_argument("invalid operand at byte " + std::to_string(off));
        Instruction ins;
        ins.op = static_cast<Opcode>(p[0]);
        ins.type = static_cast<ValueType>(p[1]);
        ins.src_type = static_cast<ValueType>(p[2]);
        ins.dst = p[3];
        ins.a = p[4];
        ins.b = p[5];
        ins.b_is_imm = p[6] != 0;
        ins.imm = load_le<std::int64_t>(p + 8);
        program.push_back(ins);
    }
    return program;
}

std::string disassemble(const Instruction& ins) {
    std::string s(name_of(ins.op));
    const auto b_operand = [&] { return ins.b_is_imm ? std::to_string(ins.imm) : reg_name(ins.b); };
    switch (ins.op) {
        case Opcode::Halt: break;
        case Opcode::LdArg:
            s += "." + std::string(name_of(ins.type)) + " " + reg_name(ins.dst) + ", @" + std::to_string(ins.imm);
            break;
        case Opcode::Ld:
            s += "." + std::string(name_of(ins.type)) + " " + reg_name(ins.dst) + ", [" + reg_name(ins.a) + " + " +
                 std::to_string(ins.imm) + "]";
            break;
        case Opcode::St:
            s += "." + std::string(name_of(ins.type)) + " [" + reg_name(ins.a) + " + " + std::to_string(ins.imm) +
                 "], " + reg_name(ins.b);
            break;
        case Opcode::MovI: s += " " + reg_name(ins.dst) + ", " + std::to_string(ins.imm); break;
        case Opcode::Mov: s += " " + reg_name(ins.dst) + ", " + reg_name(ins.a); break;
        case Opcode::Cvt:
            s += "." + std::string(name_of(ins.type)) + "." + std::string(name_of(ins.src_type)) + " " +
                 reg_name(ins.dst) + ", " + reg_name(ins.a);
            break;
        case Opcode::Br: s += " " + std::to_string(ins.imm); break;
        case Opcode::Brz:
        case Opcode::Brnz: s += " " + reg_name(ins.a) + ", " + std::to_string(ins.imm); break;
        case Opcode::LdVar: s += " " + reg_name(ins.dst) + ", $" + std::to_string(ins.imm); break;
        default:
            if (ins.op != Opcode::FAdd16 && ins.op != Opcode::FMul16) s += "." + std::string(name_of(ins.type));
            s += " " + reg_name(ins.dst) + ", " + reg_name(ins.a) + ", " + b_operand();
            break;
    }
    return s;
}

}  // namespace kcap::vdev
