#pragma once

#include "kcap/kernelc/compile_db.hpp"
#include "kcap/kernelc/jit.hpp"
#include "kcap/srcdisc/srcdisc.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace kcap::rp {

namespace fs = std::filesystem;

// Compiled project:                 JIT project:
//   capture/                          capture/
//   kernel_variant.<ext>              src/<module or package>
//   deps/                             replay_manifest.json
//   vfs.json                          manifest.json
//   manifest.json
inline constexpr const char* kCaptureDir = "capture";
inline constexpr const char* kVariantStem = "kernel_variant";
inline constexpr const char* kDepsDir = "deps";
inline constexpr const char* kOverlayFile = "vfs.json";
inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kVariantObject = "kernel_variant.kobj";
inline constexpr const char* kJitSourceDir = "src";
inline constexpr const char* kReplayManifest = "replay_manifest.json";

inline const std::vector<std::string> kTargets = {"run", "recompile", "run-variant", "validate-variant"};

class GenerateError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// (original absolute path, path the overlay points to)
using OverlayMapping = std::pair<fs::path, std::string>;

/// Overlay text grouped by original directory, directories and files
/// sorted. Throws GenerateError on a duplicate original path.
std::string emit_overlay(std::vector<OverlayMapping> mappings);

/// Local file names under deps/. Shared basenames get directory-prefixed
/// names ("a/util.kh" -> "a_util.kh").
std::map<fs::path, std::string> flatten_names(const std::vector<fs::path>& files);

struct RunnerManifest {
    std::string language;
    std::string kernel_name;
    std::string mangled_symbol;
    /// Working directory of the original compile (compiled projects).
    fs::path compile_directory;
    std::map<std::string, std::vector<std::string>> targets;

    nlohmann::json to_json() const;
    static RunnerManifest from_json(const nlohmann::json& j);
    static RunnerManifest load(const fs::path& project_dir);
};

struct JitArgument {
    std::string name;
    kc::ParamKind kind = kc::ParamKind::Scalar;
    std::string type;
    std::uint32_t offset = 0;
    /// Pointers carry the captured device address; scalars their decoded value.
    nlohmann::json value;
};

struct JitReplayManifest {
    std::string kernel;
    /// Relative to the project root.
    fs::path module;
    std::array<std::uint32_t, 3> grid{1, 1, 1};
    std::array<std::uint32_t, 3> workgroup{1, 1, 1};
    std::vector<JitArgument> args;
    std::map<std::string, std::int64_t> constexprs;
    std::optional<kc::AutotuneConfig> config;
    std::vector<std::string> supplied;
    bool autotuner_bypassed = false;
    std::vector<kc::TensorMeta> tensor_meta;
    std::string code_object_sha256;

    nlohmann::json to_json() const;
    static JitReplayManifest from_json(const nlohmann::json& j);
    static JitReplayManifest load(const fs::path& project_dir);
};

struct ReproducerProject {
    fs::path root;
    RunnerManifest manifest;
    std::optional<JitReplayManifest> jit;
};

ReproducerProject generate_compiled(const fs::path& capture_dir, const sd::SourceResolution& resolution,
                                    const fs::path& out_dir);

/// Needs the name map record of the captured code object.
ReproducerProject generate_jit(const fs::path& capture_dir, const sd::SourceResolution& resolution,
                               const fs::path& out_dir, const fs::path& name_map);

/// Decodes captured kernarg bytes into named arguments using the code
/// object's layout and the recorded signature.
std::vector<JitArgument> reconstruct_arguments(ByteView kernarg, const std::vector<kc::KernargSlot>& layout,
                                               const std::vector<kc::ScriptParam>& signature);

}  // namespace kcap::rp
