#pragma once

#include "kcap/intercept/intercept.hpp"
#include "kcap/kernelc/compile_db.hpp"

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace kcap::sd {

namespace fs = std::filesystem;

enum class Method { DebugManifest, GrepStrict, GrepLoose, Jit };

std::string_view name_of(Method method);

struct SourceResolution {
    Method method = Method::GrepStrict;
    /// File holding the kernel definition.
    fs::path kernel_file;
    /// Every other source the kernel depends on, sorted.
    std::vector<fs::path> dep_files;
    std::optional<fs::path> translation_unit;
    /// -D and -I flags to rebuild the translation unit.
    std::vector<std::string> compile_flags;
    /// The original command when a compilation database supplied one.
    std::optional<kc::CompileCommand> compile_command;

    // Scripted kernels
    std::string jit_kernel;
    std::optional<fs::path> module_file;
    std::vector<fs::path> import_files;
    std::optional<fs::path> package_root;

    std::vector<std::string> warnings;
};

class DiscoveryError : public std::runtime_error {
public:
    enum class Kind { NotFound, NoCandidate, AmbiguousAfterSymbolCheck };
    DiscoveryError(Kind kind, const std::string& message) : std::runtime_error(message), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

/// Rightmost unqualified identifier, ignoring template arguments even when
/// the brackets never close.
std::string extract_base_name(std::string_view demangled);

inline constexpr unsigned kMaxIncludeDepth = 5;

/// Quoted includes reachable from `file` within `max_depth` levels. Files
/// outside `source_dir` are neither returned nor followed (empty means no
/// limit). Missing includes become warnings.
std::vector<fs::path> trace_includes(const fs::path& file, const fs::path& source_dir,
                                     unsigned max_depth = kMaxIncludeDepth,
                                     const std::vector<fs::path>& include_dirs = {},
                                     std::vector<std::string>* warnings = nullptr);

inline const std::vector<std::string> kDefinePrefixes = {"USE_", "ENABLE_", "KC_"};

/// Positive #ifdef guards whose names start with one of `prefixes`, sorted.
std::vector<std::string> infer_defines(const std::vector<fs::path>& files,
                                       const std::vector<std::string>& prefixes = kDefinePrefixes);

struct TuResolution {
    fs::path translation_unit;
    std::vector<std::string> compile_flags;
    std::optional<kc::CompileCommand> command;
};

/// Picks the translation unit that instantiates `mangled` from `header`.
TuResolution resolve_translation_unit(const fs::path& header, const std::optional<std::vector<kc::CompileCommand>>& db,
                                      const std::string& mangled, const fs::path& source_dir);

SourceResolution discover_compiled(const std::string& kernel_name, const std::string& mangled,
                                   const fs::path& source_dir, const std::optional<fs::path>& compile_db);

SourceResolution discover_jit(const std::string& kernel_name, const fs::path& source_dir);

/// jit iff a decorated scripted kernel in `source_dir` matches the name.
icpt::Language detect_language(const fs::path& source_dir, const std::string& kernel_name);

/// Sorted files under `dir` with one of the given extensions.
std::vector<fs::path> list_sources(const fs::path& dir, const std::vector<std::string>& extensions);

}  // namespace kcap::sd
