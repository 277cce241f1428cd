#include "kcap/kernelc/codeobject.hpp"

#include "kcap/common/digest.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>

namespace kcap::kc {

std::string_view name_of(ValueKind kind) {
    return kind == ValueKind::GlobalBuffer ? "global_buffer" : "by_value";
}

std::uint32_t kernarg_segment_size(const std::vector<KernargSlot>& slots) {
    if (slots.empty()) return 0;
    const KernargSlot& last = slots.back();
    return (last.offset + last.size + 7u) & ~7u;
}

std::vector<std::string> ObjectImage::symbols() const {
    std::vector<std::string> out;
    for (const auto& k : kernels) out.push_back(k.mangled);
    for (const auto& v : variables) out.push_back(v.name);
    return out;
}

const KernelImage* ObjectImage::find_kernel(std::string_view mangled) const {
    auto it = std::find_if(kernels.begin(), kernels.end(), [&](const auto& k) { return k.mangled == mangled; });
    return it == kernels.end() ? nullptr : &*it;
}

const VariableImage* ObjectImage::find_variable(std::string_view name) const {
    auto it = std::find_if(variables.begin(), variables.end(), [&](const auto& v) { return v.name == name; });
    return it == variables.end() ? nullptr : &*it;
}

Bytes serialize(const ObjectImage& image) {
    std::ostringstream out;
    out << (image.kind == ImageKind::CodeObject ? kCodeObjectMagic : kObjectFileMagic) << '\n';
    for (const auto& [key, value] : image.meta) out << "meta " << key << ' ' << value << '\n';
    for (const auto& path : image.debug_manifest) out << "debug " << path << '\n';
    for (const auto& v : image.variables)
        out << "var " << v.name << ' ' << v.size << ' ' << (v.init.empty() ? "-" : base64_encode(v.init)) << '\n';
    for (const auto& k : image.kernels) {
        out << "kernel " << k.mangled << '\n';
        for (const auto& a : k.args)
            out << "arg " << a.name << ' ' << a.offset << ' ' << a.size << ' ' << name_of(a.value_kind) << ' ' << a.type
                << '\n';
        for (const auto& r : k.varrefs) out << "varref " << r << '\n';
        out << "code " << (k.code.empty() ? "-" : base64_encode(k.code)) << '\n';
        out << "end\n";
    }
    const std::string text = out.str();
    return Bytes(text.begin(), text.end());
}

namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && line[i] == ' ') ++i;
        if (i >= line.size()) break;
        const auto j = line.find(' ', i);
        out.push_back(line.substr(i, j - i));
        if (j == std::string_view::npos) break;
        i = j;
    }
    return out;
}

template <typename T>
T to_number(std::string_view s, std::size_t line_no) {
    T v{};
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size())
        throw FormatError("line " + std::to_string(line_no) + ": bad number '" + std::string(s) + "'");
    return v;
}

Bytes decode_section(std::string_view s, std::size_t line_no) {
    if (s == "-") return {};
    try {
        return base64_decode(s);
    } catch (const std::invalid_argument& e) {
        throw FormatError("line " + std::to_string(line_no) + ": " + e.what());
    }
}

}  // namespace

bool looks_like_code_object(ByteView bytes) {
    const std::string_view text = as_chars(bytes);
    return text.starts_with(std::string(kCodeObjectMagic) + "\n");
}

ObjectImage parse_image(ByteView bytes) {
    const std::string_view text = as_chars(bytes);
    ObjectImage image;
    KernelImage* open = nullptr;
    bool saw_code = false;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    bool terminated = true;

    while (pos < text.size()) {
        const auto nl = text.find('\n', pos);
        if (nl == std::string_view::npos) throw FormatError("truncated container: missing final newline");
        const std::string_view line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++line_no;
        const auto where = [&] { return "line " + std::to_string(line_no) + ": "; };

        if (line_no == 1) {
            if (line == kCodeObjectMagic) image.kind = ImageKind::CodeObject;
            else if (line == kObjectFileMagic) image.kind = ImageKind::ObjectFile;
            else throw FormatError("bad magic '" + std::string(line.substr(0, 16)) + "'");
            continue;
        }
        const auto space = line.find(' ');
        const std::string_view tag = line.substr(0, space);
        const std::string_view rest = space == std::string_view::npos ? std::string_view{} : line.substr(space + 1);
        const auto fields = split_fields(rest);

        if (tag == "meta") {
            const auto sp = rest.find(' ');
            if (sp == std::string_view::npos) throw FormatError(where() + "meta needs key and value");
            image.meta.emplace(std::string(rest.substr(0, sp)), std::string(rest.substr(sp + 1)));
        } else if (tag == "debug") {
            if (rest.empty()) throw FormatError(where() + "empty debug path");
            image.debug_manifest.emplace_back(rest);
        } else if (tag == "var") {
            if (fields.size() != 3) throw FormatError(where() + "var needs name, size, init");
            VariableImage v{std::string(fields[0]), to_number<std::uint64_t>(fields[1], line_no),
                            decode_section(fields[2], line_no)};
            if (v.init.size() > v.size) throw FormatError(where() + "variable init larger than its size");
            image.variables.push_back(std::move(v));
        } else if (tag == "kernel") {
            if (open) throw FormatError(where() + "nested kernel");
            if (fields.size() != 1) throw FormatError(where() + "kernel needs a name");
            image.kernels.push_back(KernelImage{std::string(fields[0]), {}, {}, {}});
            open = &image.kernels.back();
            saw_code = false;
            terminated = false;
        } else if (tag == "arg") {
            if (!open || fields.size() != 5) throw FormatError(where() + "malformed arg");
            KernargSlot slot;
            slot.name = std::string(fields[0]);
            slot.offset = to_number<std::uint32_t>(fields[1], line_no);
            slot.size = to_number<std::uint32_t>(fields[2], line_no);
            if (fields[3] == "global_buffer") slot.value_kind = ValueKind::GlobalBuffer;
            else if (fields[3] == "by_value") slot.value_kind = ValueKind::ByValue;
            else throw FormatError(where() + "unknown value kind '" + std::string(fields[3]) + "'");
            slot.type = std::string(fields[4]);
            if (slot.size != 1 && slot.size != 2 && slot.size != 4 && slot.size != 8)
                throw FormatError(where() + "slot size must be 1, 2, 4 or 8");
            if (slot.offset % 8 != 0) throw FormatError(where() + "slot offset not 8-byte aligned");
            if (!open->args.empty() && slot.offset <= open->args.back().offset)
                throw FormatError(where() + "slot offsets must increase");
            open->args.push_back(std::move(slot));
        } else if (tag == "varref") {
            if (!open || fields.size() != 1) throw FormatError(where() + "malformed varref");
            open->varrefs.emplace_back(fields[0]);
        } else if (tag == "code") {
            if (!open || fields.size() != 1 || saw_code) throw FormatError(where() + "malformed code section");
            open->code = decode_section(fields[0], line_no);
            saw_code = true;
        } else if (tag == "end") {
            if (!open || !saw_code) throw FormatError(where() + "end without kernel code");
            open = nullptr;
            terminated = true;
        } else {
            throw FormatError(where() + "unknown record '" + std::string(tag) + "'");
        }
    }
    if (line_no == 0) throw FormatError("empty container");
    if (!terminated) throw FormatError("truncated container: unterminated kernel");
    return image;
}

}  // namespace kcap::kc
