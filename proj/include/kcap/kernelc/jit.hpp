#pragma once

#include "kcap/common/bytes.hpp"
#include "kcap/kernelc/codeobject.hpp"
#include "kcap/kernelc/preprocess.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace kcap::kc {

namespace fs = std::filesystem;

// Scripted kernel modules (*.kpy), line oriented:
//
//   from .common import SCALE
//   WIDTH = 4
//
//   @autotune(configs=[Config(BLOCK=1, num_warps=1, num_stages=1), ...], key=["n"])
//   @jit
//   def reduce_rows(x: *f16, out: *f16, n: i64, BLOCK: constexpr):
//       LDARG r1, x
//       ...
//
// The body is every following indented line. A package is a directory
// holding __init__.kpy.

inline constexpr std::string_view kScriptExtension = ".kpy";
inline constexpr std::string_view kPackageMarker = "__init__.kpy";

struct AutotuneConfig {
    std::map<std::string, std::int64_t> params;
    std::int64_t num_warps = 1;
    std::int64_t num_stages = 1;

    friend bool operator==(const AutotuneConfig&, const AutotuneConfig&) = default;
};

enum class ParamKind { Pointer, Scalar, Constexpr };

std::string_view name_of(ParamKind kind);
std::optional<ParamKind> param_kind_from(std::string_view name);

struct ScriptParam {
    std::string name;
    ParamKind kind = ParamKind::Scalar;
    std::string type;  // "*f16", "i64", or "constexpr"

    friend bool operator==(const ScriptParam&, const ScriptParam&) = default;
};

struct ScriptImport {
    std::string module;  // as written, e.g. ".common", "..util", "pkg.ops"
    std::vector<std::string> names;
    unsigned line = 0;
};

struct ScriptKernel {
    std::string name;
    std::vector<ScriptParam> params;
    std::vector<SourceLine> body;
    bool jit = false;
    bool autotuned = false;
    std::vector<AutotuneConfig> configs;
    std::vector<std::string> key;
    unsigned line = 0;

    std::vector<std::string> constexpr_names() const;
};

struct ScriptModule {
    fs::path path;
    std::map<std::string, std::int64_t> constants;
    std::vector<ScriptImport> imports;
    std::vector<ScriptKernel> kernels;

    const ScriptKernel* find(std::string_view name) const;
};

/// Throws SourceError.
ScriptModule parse_script(const fs::path& path);
ScriptModule parse_script_text(const std::string& text, const fs::path& path);

/// Outermost directory of the package chain containing `module_file`, if any.
std::optional<fs::path> package_root(const fs::path& module_file);

/// Path of the module an import names, when it exists on disk. Absolute
/// imports are looked up beside the outermost package and beside the file.
std::optional<fs::path> resolve_import(const fs::path& module_file, const ScriptImport& import);

/// Module constants plus imported constants, followed transitively.
std::map<std::string, std::int64_t> module_constants(const ScriptModule& module);

struct TensorMeta {
    std::string arg;
    std::string dtype;
    std::vector<std::int64_t> shape;
    std::vector<std::int64_t> strides;

    friend bool operator==(const TensorMeta&, const TensorMeta&) = default;
};

struct NameMapRecord {
    std::string kernel_name;
    std::string source_file;
    std::vector<ScriptParam> signature;
    std::map<std::string, std::int64_t> constexprs;
    std::vector<TensorMeta> tensor_meta;
    std::optional<AutotuneConfig> config;
    /// Keyword names the winning config supplied.
    std::vector<std::string> supplied;
};

struct JitRequest {
    /// Explicit constexpr values; config params fill any not given here.
    std::map<std::string, std::int64_t> constexprs;
    std::optional<AutotuneConfig> config;
    std::vector<TensorMeta> tensor_meta;
    /// Record destination; nothing is recorded when empty.
    std::optional<fs::path> name_map;
};

struct JitResult {
    Bytes bytes;
    std::string sha256;
    std::string mangled;
    NameMapRecord record;
};

class JitError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

JitResult jit_compile(const ScriptModule& module, const ScriptKernel& kernel, const JitRequest& request);

/// Retired-instruction cost of running `code_object` under `config`. Throwing
/// marks the config as failed.
using Benchmarker = std::function<std::uint64_t(const AutotuneConfig& config, const JitResult& compiled)>;

struct AutotuneOutcome {
    AutotuneConfig winner;
    std::size_t index = 0;
    std::vector<std::optional<std::uint64_t>> costs;  // nullopt for failed configs
};

/// Minimum cost wins; ties go to the lowest index.
AutotuneOutcome autotune(const ScriptModule& module, const ScriptKernel& kernel,
                         const std::vector<AutotuneConfig>& configs, const Benchmarker& benchmarker,
                         const JitRequest& base = {});

/// Index selection on its own, shared with autotune().
std::size_t select_config(const std::vector<std::optional<std::uint64_t>>& costs);

/// Per-process cache keyed by kernel and autotune key values.
class AutotuneCache {
public:
    std::optional<AutotuneConfig> get(const std::string& kernel, const std::vector<std::int64_t>& key_values) const;
    void put(const std::string& kernel, const std::vector<std::int64_t>& key_values, AutotuneConfig config);

private:
    std::map<std::pair<std::string, std::vector<std::int64_t>>, AutotuneConfig> entries_;
};

}  // namespace kcap::kc
