#pragma once

#include "kcap/kernelc/jit.hpp"
#include "kcap/vdevice/runtime.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace kcap::host {

namespace fs = std::filesystem;

// Workload scripts (*.kw) drive the device the way an application would.
// One statement per line, '#' starts a comment, paths are relative to the
// script:
//
//   build  <exec> <compile_commands.json>     compile every entry, link, load
//   load   <exec> <file.kobj | file.ks>
//   alloc  <buf> <bytes> [pool|vmem]
//   fill   <buf> <dtype> <v>...               from offset 0
//   fill_at <buf> <offset> <dtype> <v>...
//   random <buf> <seed>
//   ptr    <buf> <offset> <target> [<target offset>]
//   var    <exec> <symbol> <dtype> <v>...     overwrite a module variable
//   dispatch <exec> <kernel> grid=x[,y,z] [wg=x[,y,z]] <arg>...
//   launch <module.kpy> <kernel> grid=... [wg=...] [NAME=value]... <arg>...
//   free   <buf>
//   sleep  <ms>
//   dump   <dir>                              live buffers as region_<hex>.bin
//
// Arguments: @buf or @buf+offset for pointers, numbers otherwise (typed by
// the kernel's kernarg layout). `launch` JIT-compiles a scripted kernel;
// an autotuned kernel without its tuning constexprs is benchmarked on a
// copy of device memory first and the winner is cached per key.

class WorkloadError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Statement {
    unsigned line = 0;
    std::vector<std::string> words;
};

struct Workload {
    fs::path path;
    std::vector<Statement> statements;

    static Workload parse_file(const fs::path& path);
    static Workload parse_text(const std::string& text, const fs::path& path);
    fs::path base_dir() const { return path.parent_path(); }
};

struct HostOptions {
    /// Where JIT compiles record name map entries.
    std::optional<fs::path> name_map;
};

/// Executes workloads against a runtime, always through its live API table.
class Host {
public:
    explicit Host(vdev::Runtime& rt, HostOptions options = {});

    void run(const Workload& workload);
    void execute(const Statement& statement, const fs::path& base_dir);

    std::optional<vdev::DeviceAddress> buffer(const std::string& name) const;
    /// Instruction costs per config index of the last autotune run.
    const std::vector<std::optional<std::uint64_t>>& last_autotune_costs() const { return last_costs_; }

private:
    struct Buffer {
        vdev::DeviceAddress address;
        std::uint64_t size = 0;
    };
    struct Loaded {
        vdev::ExecutableId id;
        Bytes code;
    };
    struct Launch {
        vdev::Dim3 grid{1, 1, 1};
        vdev::Dim3 workgroup{1, 1, 1};
        std::map<std::string, std::int64_t> constexprs;
        std::vector<std::string> args;
    };

    Loaded load(const Bytes& code);
    const Loaded& executable(const std::string& name) const;
    const Buffer& buf(const std::string& name) const;
    Bytes encode_kernarg(const std::vector<kc::KernargSlot>& layout, const std::vector<std::string>& args) const;
    std::uint64_t pointer_value(const std::string& token) const;
    void dispatch(vdev::ApiTable& api, const Bytes& code, const std::string& mangled, const Launch& launch);
    void launch_jit(const fs::path& module_file, const std::string& kernel, const Launch& launch);
    static Launch parse_launch(const std::vector<std::string>& words, std::size_t first, bool allow_constexprs);

    vdev::Runtime& rt_;
    HostOptions options_;
    std::map<std::string, Buffer> buffers_;
    std::map<std::string, Loaded> execs_;
    std::map<std::string, Loaded> jit_loaded_;  // by code object sha
    std::map<fs::path, kc::ScriptModule> modules_;
    kc::AutotuneCache tune_cache_;
    std::vector<std::optional<std::uint64_t>> last_costs_;
    std::optional<vdev::QueueId> queue_;
};

nlohmann::json trace_to_json(const std::vector<vdev::DispatchTraceEntry>& trace);
std::vector<vdev::DispatchTraceEntry> trace_from_json(const nlohmann::json& j);

/// Environment variable naming the file the host writes its dispatch trace to.
inline constexpr const char* kTraceFileEnv = "KCAP_TRACE_FILE";

}  // namespace kcap::host
