#pragma once

#include "kcap/common/bytes.hpp"
#include "kcap/kernelc/codeobject.hpp"
#include "kcap/kernelc/compile_db.hpp"
#include "kcap/kernelc/preprocess.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace kcap::kc {

// Kernel DSL, after preprocessing:
//
//   __var <name> <type> <count> [= v0, v1, ...]
//   __kernel <name>[<targ, ...>](<arg>: <type>, ...) {
//   loop:
//       LD.f32 r2, [r1 + 8]      ; comment
//       ...
//   }
//
// Argument types are u8 u16 u32 u64 i64 f16 f32, or a pointer `*<type>`.

using TypedParam = std::pair<std::string, std::string>;  // name, type

/// 8-byte slot alignment; pointers are 8-byte global buffers.
std::vector<KernargSlot> layout_kernargs(const std::vector<TypedParam>& params);

struct AssembleContext {
    /// Identifier immediates (constexpr bindings and module constants).
    std::map<std::string, std::int64_t> constants;
    /// Selects JIT wording for unbound identifiers.
    bool jit = false;
};

struct AssembledUnit {
    std::vector<KernelImage> kernels;
    std::vector<VariableImage> variables;
};

AssembledUnit assemble(const std::vector<SourceLine>& lines, const AssembleContext& context = {});

/// Assembles a bare instruction body. `variables` lists names LDVAR may use.
KernelImage assemble_kernel(const std::string& mangled, std::vector<KernargSlot> args,
                            const std::vector<SourceLine>& body, const AssembleContext& context,
                            const std::vector<std::string>& variables = {});

struct CompileOptions {
    /// Overrides any -ivfsoverlay in the arguments.
    std::optional<fs::path> overlay;
    bool device_only = false;
    unsigned max_include_depth = kDefaultMaxIncludeDepth;
};

struct CompileResult {
    Bytes bytes;
    ObjectImage image;
    bool code_object = false;
    std::optional<fs::path> output;
    std::vector<fs::path> opened_files;
    std::vector<std::string> warnings;
};

/// Compiles one translation unit. Honors -D/-I/-o/-g, -ivfsoverlay, and
/// --device-only/--no-bundle. Throws SourceError on parse failures.
CompileResult compile_tu(const CompileCommand& command, const CompileOptions& options = {});

class LinkError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

ObjectImage link_images(const std::vector<ObjectImage>& objects);
Bytes link(const std::vector<ObjectImage>& objects);

/// Kernarg layout of `mangled` as embedded in the code object.
std::vector<KernargSlot> parse_kernarg_metadata(ByteView code_object, std::string_view mangled);

}  // namespace kcap::kc
