#pragma once

#include "kcap/intercept/intercept.hpp"
#include "kcap/kernelc/jit.hpp"
#include "kcap/reprogen/reprogen.hpp"
#include "kcap/vdevice/runtime.hpp"

#include <chrono>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace kcap::cli {

namespace fs = std::filesystem;

class CliError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ProfileRow {
    std::string kernel_name;
    std::uint64_t calls = 0;
    /// Simulated time: retired instructions.
    std::uint64_t total_time = 0;
    double percent = 0.0;
};

/// Rows sorted by total time, descending; ties by name.
std::vector<ProfileRow> aggregate_profile(const std::vector<vdev::DispatchTraceEntry>& trace);
void print_profile(std::ostream& out, const std::vector<ProfileRow>& rows);

struct ChildOptions {
    std::vector<std::string> argv;
    /// Added to the inherited environment.
    std::map<std::string, std::string> env;
    /// Once this file appears the child is terminated.
    std::optional<fs::path> sentinel;
    std::chrono::milliseconds poll{100};
    std::chrono::milliseconds grace{1000};
    /// Sends the child's stdout to /dev/null.
    bool quiet = false;
};

struct ChildOutcome {
    /// Exit status, or -1 when a signal ended the child.
    int exit_code = -1;
    int signal = 0;
    bool sentinel_seen = false;
    /// The watchdog sent SIGTERM (and SIGKILL after the grace period).
    bool terminated = false;
    bool killed = false;
    /// Time from noticing the sentinel to reaping the child.
    std::chrono::milliseconds after_sentinel{0};
};

/// Runs argv[0] (searched on PATH) and waits for it, watching the sentinel.
ChildOutcome run_child(const ChildOptions& options);

/// Splits a --cmd string the way a shell would, without expansion.
std::vector<std::string> split_cmd(const std::string& cmd);

/// Runs the workload with tracing enabled and ranks its kernels.
std::vector<ProfileRow> cmd_profile(const std::string& cmd);

struct ExtractOptions {
    std::string kernel;
    std::string cmd;
    fs::path source_dir;
    fs::path output;
    std::optional<icpt::Language> language;
    std::uint64_t dispatch_index = 1;
    /// Defaults to compile_commands.json in the source dir or its build/.
    std::optional<fs::path> compile_db;
    std::chrono::milliseconds poll{100};
    std::chrono::milliseconds grace{1000};
};

struct ExtractResult {
    fs::path capture_dir;
    icpt::Language language = icpt::Language::Compiled;
    ChildOutcome child;
    bool captured = false;
    std::optional<rp::ReproducerProject> project;
    std::string error;
    /// 0 complete, 2 nothing captured, 3 captured but no project.
    int exit_code = 0;
};

ExtractResult cmd_extract(const ExtractOptions& options);

inline constexpr const char* kNameMapFile = "name_map.json";
inline constexpr const char* kValidateDir = "validate";

/// Compiles a JIT replay manifest's kernel with its pinned values; entries
/// in `overrides` replace constexprs.
kc::JitResult jit_compile_manifest(const fs::path& replay_manifest,
                                   const std::map<std::string, std::int64_t>& overrides = {});

/// Executes one runner-manifest target in-process. Returns the exit status.
int run_manifest_target(const fs::path& project_dir, const std::string& target, std::ostream& out);

/// Prints and returns the replay outcome of `kcap replay`.
int cmd_replay(const fs::path& capture_dir, const std::optional<fs::path>& code_object, std::uint32_t iterations, bool recopy,
               bool dump_output, std::ostream& out);

/// Smoke test without a variant, variant validation with one.
int cmd_validate(const fs::path& capture_dir, const std::optional<fs::path>& code_object, double atol, double rtol,
                 std::ostream& out);

}  // namespace kcap::cli
