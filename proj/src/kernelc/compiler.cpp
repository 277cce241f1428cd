#include "kcap/kernelc/compiler.hpp"

#include "kcap/common/files.hpp"
#include "kcap/kernelc/mangle.hpp"
#include "kcap/vdevice/half.hpp"
#include "kcap/vdevice/isa.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cctype>
#include <regex>
#include <set>

namespace kcap::kc {

using vdev::Instruction;
using vdev::Opcode;
using vdev::ValueType;

namespace {

std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

std::string strip_comment(const std::string& s) {
    std::size_t cut = s.size();
    if (auto p = s.find("//"); p != std::string::npos) cut = std::min(cut, p);
    if (auto p = s.find(';'); p != std::string::npos) cut = std::min(cut, p);
    return s.substr(0, cut);
}

std::vector<std::string> split_top(const std::string& s, char sep) {
    std::vector<std::string> out;
    int depth = 0;
    std::string cur;
    for (char c : s) {
        if (c == '[' || c == '(' || c == '<') ++depth;
        if (c == ']' || c == ')' || c == '>') --depth;
        if (c == sep && depth == 0) {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!trim(cur).empty() || !out.empty()) out.push_back(trim(cur));
    return out;
}

bool is_identifier(std::string_view s) {
    if (s.empty() || !(std::isalpha(static_cast<unsigned char>(s[0])) || s[0] == '_')) return false;
    return std::all_of(s.begin(), s.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; });
}

std::optional<std::int64_t> parse_integer(std::string_view s) {
    bool neg = false;
    if (!s.empty() && (s[0] == '-' || s[0] == '+')) {
        neg = s[0] == '-';
        s.remove_prefix(1);
    }
    int base = 10;
    if (s.size() > 2 && s[0] == '0' && (s[1] == 'x' || s[1] == 'X')) {
        base = 16;
        s.remove_prefix(2);
    }
    if (s.empty()) return std::nullopt;
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v, base);
    if (ec != std::errc() || p != s.data() + s.size()) return std::nullopt;
    return neg ? static_cast<std::int64_t>(0 - v) : static_cast<std::int64_t>(v);
}

std::optional<double> parse_real(const std::string& s) {
    try {
        std::size_t used = 0;
        double v = std::stod(s, &used);
        if (used != s.size()) return std::nullopt;
        return v;
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

std::uint64_t encode_scalar(ValueType t, double real) {
    switch (t) {
        case ValueType::F16: return vdev::half_from_double(real);
        case ValueType::F32: return std::bit_cast<std::uint32_t>(static_cast<float>(real));
        default: return static_cast<std::uint64_t>(static_cast<std::int64_t>(real));
    }
}

struct Ctx {
    const SourceLine* at = nullptr;

    [[noreturn]] void fail(const std::string& msg) const {
        if (at) throw SourceError(at->file, at->line, msg);
        throw SourceError("<input>", 0, msg);
    }
};

std::optional<ValueType> scalar_type(std::string_view name) {
    return vdev::value_type_from(name);
}

class BodyAssembler {
public:
    BodyAssembler(const std::vector<KernargSlot>& args, const AssembleContext& context,
                  const std::vector<std::string>& variables)
        : args_(args), context_(context), variables_(variables) {}

    KernelImage run(const std::string& mangled, const std::vector<SourceLine>& body) {
        for (const SourceLine& line : body) {
            ctx_.at = &line;
            std::string text = trim(strip_comment(line.text));
            // Leading labels.
            for (;;) {
                auto colon = text.find(':');
                if (colon == std::string::npos || !is_identifier(trim(text.substr(0, colon)))) break;
                std::string label = trim(text.substr(0, colon));
                if (labels_.count(label)) ctx_.fail("duplicate label '" + label + "'");
                labels_[label] = program_.size();
                text = trim(text.substr(colon + 1));
            }
            if (!text.empty()) instruction(text);
        }
        ctx_.at = body.empty() ? nullptr : &body.back();
        for (const auto& [index, label, at] : fixups_) {
            auto it = labels_.find(label);
            if (it == labels_.end()) {
                ctx_.at = at;
                ctx_.fail("undefined label '" + label + "'");
            }
            program_[index].imm = static_cast<std::int64_t>(it->second);
        }
        program_.push_back(Instruction{});  // trailing HALT
        KernelImage k;
        k.mangled = mangled;
        k.args = args_;
        k.varrefs = varrefs_;
        k.code = vdev::encode(program_);
        return k;
    }

private:
    std::uint8_t reg(const std::string& s) const {
        if (s == "gid.x") return vdev::kRegGidX;
        if (s == "gid.y") return vdev::kRegGidY;
        if (s == "gid.z") return vdev::kRegGidZ;
        if (s.size() >= 2 && s[0] == 'r') {
            if (auto n = parse_integer(s.substr(1)); n && *n >= 0 && *n < vdev::kNumGeneralRegisters)
                return static_cast<std::uint8_t>(*n);
        }
        ctx_.fail("expected a register, got '" + s + "'");
    }

    bool is_reg(const std::string& s) const {
        if (s == "gid.x" || s == "gid.y" || s == "gid.z") return true;
        if (s.size() < 2 || s[0] != 'r') return false;
        auto n = parse_integer(s.substr(1));
        return n && *n >= 0 && *n < vdev::kNumGeneralRegisters;
    }

    std::int64_t imm(const std::string& s) const {
        if (auto n = parse_integer(s)) return *n;
        if (s.size() > 1 && (s.back() == 'f' || s.back() == 'h')) {
            if (auto r = parse_real(s.substr(0, s.size() - 1)))
                return static_cast<std::int64_t>(encode_scalar(s.back() == 'f' ? ValueType::F32 : ValueType::F16, *r));
        }
        if (is_identifier(s)) {
            auto it = context_.constants.find(s);
            if (it != context_.constants.end()) return it->second;
            ctx_.fail(context_.jit ? "unbound constexpr or constant '" + s + "'" : "unknown identifier '" + s + "'");
        }
        ctx_.fail("bad immediate '" + s + "'");
    }

    // "[rA]", "[rA + imm]", "[rA - imm]"
    std::pair<std::uint8_t, std::int64_t> memory(const std::string& s) const {
        if (s.size() < 2 || s.front() != '[' || s.back() != ']') ctx_.fail("expected a memory operand, got '" + s + "'");
        std::string inner = trim(s.substr(1, s.size() - 2));
        auto op = inner.find_first_of("+-");
        if (op == std::string::npos) return {reg(inner), 0};
        std::int64_t off = imm(trim(inner.substr(op + 1)));
        return {reg(trim(inner.substr(0, op))), inner[op] == '-' ? -off : off};
    }

    void expect(const std::vector<std::string>& ops, std::size_t n, const std::string& mnemonic) const {
        if (ops.size() != n)
            ctx_.fail(mnemonic + " expects " + std::to_string(n) + " operand(s), got " + std::to_string(ops.size()));
    }

    ValueType type_suffix(const std::vector<std::string>& parts, std::size_t i, ValueType def) const {
        if (parts.size() <= i) return def;
        auto t = scalar_type(parts[i]);
        if (!t) ctx_.fail("unknown type suffix '" + parts[i] + "'");
        return *t;
    }

    void branch_target(const std::string& label) {
        if (!is_identifier(label)) ctx_.fail("expected a label, got '" + label + "'");
        fixups_.push_back({program_.size() - 1, label, ctx_.at});
    }

    void instruction(const std::string& text) {
        auto space = text.find_first_of(" \t");
        std::string mnemonic = text.substr(0, space);
        std::vector<std::string> ops = space == std::string::npos ? std::vector<std::string>{}
                                                                   : split_top(trim(text.substr(space)), ',');
        std::vector<std::string> parts;
        for (std::size_t b = 0;;) {
            auto d = mnemonic.find('.', b);
            parts.push_back(mnemonic.substr(b, d - b));
            if (d == std::string::npos) break;
            b = d + 1;
        }
        std::string op = parts[0];
        std::transform(op.begin(), op.end(), op.begin(), [](unsigned char c) { return std::toupper(c); });

        Instruction ins;
        if (op == "HALT") {
            expect(ops, 0, op);
            ins.op = Opcode::Halt;
        } else if (op == "LDARG") {
            expect(ops, 2, op);
            auto it = std::find_if(args_.begin(), args_.end(), [&](const KernargSlot& s) { return s.name == ops[1]; });
            if (it == args_.end()) ctx_.fail("unknown kernel argument '" + ops[1] + "'");
            ins.op = Opcode::LdArg;
            ins.dst = reg(ops[0]);
            ins.imm = it->offset;
            switch (it->size) {
                case 1: ins.type = ValueType::U8; break;
                case 2: ins.type = ValueType::U16; break;
                case 4: ins.type = ValueType::U32; break;
                default: ins.type = ValueType::U64; break;
            }
        } else if (op == "LD") {
            expect(ops, 2, op);
            ins.op = Opcode::Ld;
            ins.type = type_suffix(parts, 1, ValueType::U64);
            ins.dst = reg(ops[0]);
            std::tie(ins.a, ins.imm) = memory(ops[1]);
        } else if (op == "ST") {
            expect(ops, 2, op);
            ins.op = Opcode::St;
            ins.type = type_suffix(parts, 1, ValueType::U64);
            std::tie(ins.a, ins.imm) = memory(ops[0]);
            ins.b = reg(ops[1]);
        } else if (op == "MOVI") {
            expect(ops, 2, op);
            ins.op = Opcode::MovI;
            ins.dst = reg(ops[0]);
            ins.imm = imm(ops[1]);
        } else if (op == "MOV") {
            expect(ops, 2, op);
            ins.op = Opcode::Mov;
            ins.dst = reg(ops[0]);
            ins.a = reg(ops[1]);
        } else if (op == "ADD" || op == "SUB" || op == "MUL" || op == "DIV" || op == "FADD16" || op == "FMUL16" ||
                   op == "CMPLT") {
            expect(ops, 3, op);
            static const std::map<std::string, Opcode> kBinary = {
                {"ADD", Opcode::Add},       {"SUB", Opcode::Sub},       {"MUL", Opcode::Mul},    {"DIV", Opcode::Div},
                {"FADD16", Opcode::FAdd16}, {"FMUL16", Opcode::FMul16}, {"CMPLT", Opcode::CmpLt}};
            ins.op = kBinary.at(op);
            const bool half_op = ins.op == Opcode::FAdd16 || ins.op == Opcode::FMul16;
            ins.type = type_suffix(parts, 1, half_op ? ValueType::F16 : ValueType::I64);
            ins.dst = reg(ops[0]);
            ins.a = reg(ops[1]);
            if (is_reg(ops[2])) {
                ins.b = reg(ops[2]);
            } else {
                ins.b_is_imm = true;
                ins.imm = imm(ops[2]);
            }
        } else if (op == "CVT") {
            expect(ops, 2, op);
            if (parts.size() != 3) ctx_.fail("CVT needs .dst.src type suffixes");
            ins.op = Opcode::Cvt;
            ins.type = type_suffix(parts, 1, ValueType::U64);
            ins.src_type = type_suffix(parts, 2, ValueType::U64);
            ins.dst = reg(ops[0]);
            ins.a = reg(ops[1]);
        } else if (op == "BR") {
            expect(ops, 1, op);
            ins.op = Opcode::Br;
            program_.push_back(ins);
            branch_target(ops[0]);
            return;
        } else if (op == "BRZ" || op == "BRNZ") {
            expect(ops, 2, op);
            ins.op = op == "BRZ" ? Opcode::Brz : Opcode::Brnz;
            ins.a = reg(ops[0]);
            program_.push_back(ins);
            branch_target(ops[1]);
            return;
        } else if (op == "LDVAR") {
            expect(ops, 2, op);
            if (std::find(variables_.begin(), variables_.end(), ops[1]) == variables_.end())
                ctx_.fail("undeclared module variable '" + ops[1] + "'");
            auto it = std::find(varrefs_.begin(), varrefs_.end(), ops[1]);
            if (it == varrefs_.end()) it = varrefs_.insert(varrefs_.end(), ops[1]);
            ins.op = Opcode::LdVar;
            ins.dst = reg(ops[0]);
            ins.imm = it - varrefs_.begin();
        } else {
            ctx_.fail("unknown instruction '" + mnemonic + "'");
        }
        program_.push_back(ins);
    }

    struct Fixup {
        std::size_t index;
        std::string label;
        const SourceLine* at;
    };

    const std::vector<KernargSlot>& args_;
    const AssembleContext& context_;
    const std::vector<std::string>& variables_;
    Ctx ctx_;
    std::vector<Instruction> program_;
    std::map<std::string, std::size_t> labels_;
    std::vector<Fixup> fixups_;
    std::vector<std::string> varrefs_;
};

VariableImage parse_variable(const SourceLine& line, const std::string& text) {
    Ctx ctx{&line};
    // __var NAME TYPE COUNT [= v, ...]
    std::string decl = text, init;
    if (auto eq = text.find('='); eq != std::string::npos) {
        decl = text.substr(0, eq);
        init = text.substr(eq + 1);
    }
    std::vector<std::string> words;
    for (std::size_t b = 0; b < decl.size();) {
        while (b < decl.size() && std::isspace(static_cast<unsigned char>(decl[b]))) ++b;
        std::size_t e = b;
        while (e < decl.size() && !std::isspace(static_cast<unsigned char>(decl[e]))) ++e;
        if (e > b) words.push_back(decl.substr(b, e - b));
        b = e;
    }
    if (words.size() != 4 || !is_identifier(words[1])) ctx.fail("malformed __var declaration");
    auto type = scalar_type(words[2]);
    if (!type) ctx.fail("unknown variable type '" + words[2] + "'");
    auto count = parse_integer(words[3]);
    if (!count || *count < 0) ctx.fail("variable count must not be negative");
    const std::size_t width = vdev::width_of(*type);
    VariableImage var;
    var.name = words[1];
    var.size = static_cast<std::uint64_t>(*count) * width;
    if (!trim(init).empty()) {
        auto values = split_top(trim(init), ',');
        if (values.size() > static_cast<std::size_t>(*count)) ctx.fail("too many initializers for '" + var.name + "'");
        var.init.resize(values.size() * width);
        for (std::size_t i = 0; i < values.size(); ++i) {
            std::uint64_t bits;
            if (*type == ValueType::F16 || *type == ValueType::F32) {
                auto r = parse_real(values[i]);
                if (!r) ctx.fail("bad initializer '" + values[i] + "'");
                bits = encode_scalar(*type, *r);
            } else {
                auto n = parse_integer(values[i]);
                if (!n) ctx.fail("bad initializer '" + values[i] + "'");
                bits = static_cast<std::uint64_t>(*n);
            }
            store_le(var.init.data() + i * width, bits, width);
        }
    }
    return var;
}

std::vector<TypedParam> parse_params(const SourceLine& line, const std::string& list) {
    Ctx ctx{&line};
    std::vector<TypedParam> params;
    if (trim(list).empty()) return params;
    for (const std::string& p : split_top(list, ',')) {
        auto colon = p.find(':');
        if (colon == std::string::npos) ctx.fail("parameter '" + p + "' lacks a type");
        std::string name = trim(p.substr(0, colon));
        std::string type = trim(p.substr(colon + 1));
        if (!is_identifier(name)) ctx.fail("bad parameter name '" + name + "'");
        params.emplace_back(name, type);
    }
    return params;
}

}  // namespace

std::vector<KernargSlot> layout_kernargs(const std::vector<TypedParam>& params) {
    std::vector<KernargSlot> slots;
    std::uint32_t offset = 0;
    std::set<std::string> seen;
    for (const auto& [name, type] : params) {
        if (!seen.insert(name).second) throw std::invalid_argument("duplicate parameter '" + name + "'");
        KernargSlot slot;
        slot.name = name;
        slot.offset = offset;
        slot.type = type;
        if (!type.empty() && type[0] == '*') {
            if (!vdev::value_type_from(std::string_view(type).substr(1)))
                throw std::invalid_argument("unknown pointee type in '" + type + "'");
            slot.size = 8;
            slot.value_kind = ValueKind::GlobalBuffer;
        } else {
            auto t = vdev::value_type_from(type);
            if (!t) throw std::invalid_argument("unknown parameter type '" + type + "'");
            slot.size = static_cast<std::uint32_t>(vdev::width_of(*t));
            slot.value_kind = ValueKind::ByValue;
        }
        slots.push_back(slot);
        offset += 8;
    }
    return slots;
}

KernelImage assemble_kernel(const std::string& mangled, std::vector<KernargSlot> args,
                            const std::vector<SourceLine>& body, const AssembleContext& context,
                            const std::vector<std::string>& variables) {
    BodyAssembler assembler(args, context, variables);
    return assembler.run(mangled, body);
}

AssembledUnit assemble(const std::vector<SourceLine>& lines, const AssembleContext& context) {
    static const std::regex kHeader(R"(^\s*__kernel\s+([A-Za-z_]\w*)\s*(?:<([^>]*)>)?\s*\(([^)]*)\)\s*(\{)?\s*$)");
    AssembledUnit unit;
    std::vector<std::string> var_names;
    std::set<std::string> kernel_names;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const SourceLine& line = lines[i];
        const std::string text = trim(strip_comment(line.text));
        if (text.empty()) continue;
        if (text.rfind("__var", 0) == 0) {
            VariableImage var = parse_variable(line, text);
            if (std::find(var_names.begin(), var_names.end(), var.name) != var_names.end())
                throw SourceError(line.file, line.line, "duplicate variable '" + var.name + "'");
            var_names.push_back(var.name);
            unit.variables.push_back(std::move(var));
            continue;
        }
        std::smatch m;
        if (!std::regex_match(line.text, m, kHeader)) {
            // Header lines may carry a trailing comment.
            if (!std::regex_match(text, m, kHeader))
                throw SourceError(line.file, line.line, "expected __kernel or __var, got '" + text + "'");
        }
        std::vector<std::string> targs;
        if (m[2].matched)
            for (const std::string& a : split_top(m[2].str(), ','))
                if (!a.empty()) targs.push_back(a);
        std::vector<KernargSlot> slots;
        try {
            slots = layout_kernargs(parse_params(line, m[3].str()));
        } catch (const std::invalid_argument& e) {
            throw SourceError(line.file, line.line, e.what());
        }
        std::size_t j = i + 1;
        if (!m[4].matched) {
            while (j < lines.size() && trim(strip_comment(lines[j].text)).empty()) ++j;
            if (j >= lines.size() || trim(strip_comment(lines[j].text)) != "{")
                throw SourceError(line.file, line.line, "expected '{' after kernel header");
            ++j;
        }
        std::vector<SourceLine> body;
        for (; j < lines.size() && trim(strip_comment(lines[j].text)) != "}"; ++j) body.push_back(lines[j]);
        if (j >= lines.size()) throw SourceError(line.file, line.line, "unterminated kernel body");
        std::string mangled;
        try {
            mangled = mangle(m[1].str(), targs);
        } catch (const MangleError& e) {
            throw SourceError(line.file, line.line, e.what());
        }
        if (!kernel_names.insert(mangled).second)
            throw SourceError(line.file, line.line, "duplicate kernel '" + demangle(mangled) + "'");
        unit.kernels.push_back(assemble_kernel(mangled, std::move(slots), body, context, var_names));
        i = j;
    }
    return unit;
}

CompileResult compile_tu(const CompileCommand& command, const CompileOptions& options) {
    DriverArgs args = parse_driver_args(command);
    if (!args.source) throw std::invalid_argument("no source file in compile command");
    std::optional<fs::path> overlay_path = options.overlay ? options.overlay : args.overlay;
    std::optional<Overlay> overlay;
    if (overlay_path) overlay = Overlay::load(*overlay_path);
    SourceFs files(std::move(overlay));

    PreprocessResult pp = preprocess(*args.source, args.defines, args.include_dirs, options.max_include_depth, files);
    AssembledUnit unit = assemble(pp.lines);

    CompileResult result;
    result.warnings = args.warnings;
    result.output = args.output;
    ObjectImage& obj = result.image;
    obj.kind = ImageKind::ObjectFile;
    if (args.debug_info) {
        obj.debug_manifest.push_back(normalize(*args.source).string());
        for (const std::string& inc : pp.included) obj.debug_manifest.push_back(inc);
    }
    obj.variables = std::move(unit.variables);
    obj.kernels = std::move(unit.kernels);

    if (options.device_only || args.device_only) {
        result.image = link_images({obj});
        result.code_object = true;
    }
    result.bytes = serialize(result.image);
    result.opened_files = files.open_log();
    return result;
}

ObjectImage link_images(const std::vector<ObjectImage>& objects) {
    ObjectImage out;
    out.kind = ImageKind::CodeObject;
    std::set<std::string> symbols, debug;
    for (const ObjectImage& obj : objects) {
        for (const auto& [k, v] : obj.meta) {
            auto [it, inserted] = out.meta.emplace(k, v);
            if (!inserted && it->second != v) throw LinkError("conflicting metadata '" + k + "'");
        }
        for (const std::string& d : obj.debug_manifest)
            if (debug.insert(d).second) out.debug_manifest.push_back(d);
        for (const VariableImage& v : obj.variables) {
            if (!symbols.insert(v.name).second) throw LinkError("duplicate symbol '" + v.name + "'");
            out.variables.push_back(v);
        }
        for (const KernelImage& k : obj.kernels) {
            if (!symbols.insert(k.mangled).second) throw LinkError("duplicate symbol '" + display_name(k.mangled) + "'");
            out.kernels.push_back(k);
        }
    }
    return out;
}

Bytes link(const std::vector<ObjectImage>& objects) { return serialize(link_images(objects)); }

std::vector<KernargSlot> parse_kernarg_metadata(ByteView code_object, std::string_view mangled) {
    ObjectImage image = parse_image(code_object);
    const KernelImage* k = image.find_kernel(mangled);
    if (!k) throw FormatError("kernel '" + std::string(mangled) + "' not present in code object");
    return k->args;
}

}  // namespace kcap::kc
