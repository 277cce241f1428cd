#pragma once

#include "kcap/common/bytes.hpp"

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace kcap::kc {

// Container shared by object files and loadable code objects.
//
//   KOBJ1 | KOFILE1
//   meta <key> <value>
//   debug <path>
//   var <name> <size> <base64-init | ->
//   kernel <mangled>
//   arg <name> <offset> <size> <global_buffer|by_value> <type>
//   varref <name>
//   code <base64-bytecode>
//   end
//
// Serialization is deterministic; the identity of a code object is the
// SHA-256 of its serialized bytes.

inline constexpr std::string_view kCodeObjectMagic = "KOBJ1";
inline constexpr std::string_view kObjectFileMagic = "KOFILE1";

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class ValueKind { GlobalBuffer, ByValue };

std::string_view name_of(ValueKind kind);

struct KernargSlot {
    std::string name;
    std::uint32_t offset = 0;
    std::uint32_t size = 0;
    ValueKind value_kind = ValueKind::ByValue;
    std::string type;

    friend bool operator==(const KernargSlot&, const KernargSlot&) = default;
};

/// Segment size: end of the last slot rounded up to the 8-byte slot alignment.
std::uint32_t kernarg_segment_size(const std::vector<KernargSlot>& slots);

struct KernelImage {
    std::string mangled;
    std::vector<KernargSlot> args;
    std::vector<std::string> varrefs;
    Bytes code;

    std::uint32_t kernarg_segment_size() const { return kc::kernarg_segment_size(args); }
};

struct VariableImage {
    std::string name;
    std::uint64_t size = 0;
    Bytes init;  // at most `size` bytes; the remainder is zero
};

enum class ImageKind { ObjectFile, CodeObject };

struct ObjectImage {
    ImageKind kind = ImageKind::CodeObject;
    std::map<std::string, std::string> meta;
    std::vector<std::string> debug_manifest;
    std::vector<VariableImage> variables;
    std::vector<KernelImage> kernels;

    std::vector<std::string> symbols() const;
    const KernelImage* find_kernel(std::string_view mangled) const;
    const VariableImage* find_variable(std::string_view name) const;
};

Bytes serialize(const ObjectImage& image);

/// Throws FormatError naming the offending line.
ObjectImage parse_image(ByteView bytes);

bool looks_like_code_object(ByteView bytes);

}  // namespace kcap::kc
