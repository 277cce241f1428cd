#include "kcap/cli/cli.hpp"

#include "kcap/capture/bundle.hpp"
#include "kcap/common/files.hpp"
#include "kcap/common/hex.hpp"
#include "kcap/host/workload.hpp"
#include "kcap/kernelc/compile_db.hpp"
#include "kcap/kernelc/compiler.hpp"
#include "kcap/replayer/replayer.hpp"
#include "kcap/srcdisc/srcdisc.hpp"
#include "kcap/validator/validator.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <iomanip>
#include <thread>

#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

namespace kcap::cli {

using Clock = std::chrono::steady_clock;
using nlohmann::json;

std::vector<ProfileRow> aggregate_profile(const std::vector<vdev::DispatchTraceEntry>& trace) {
    std::map<std::string, ProfileRow> by_name;
    std::uint64_t total = 0;
    for (const auto& t : trace) {
        ProfileRow& row = by_name[t.kernel_name];
        row.kernel_name = t.kernel_name;
        ++row.calls;
        row.total_time += t.instructions;
        total += t.instructions;
    }
    std::vector<ProfileRow> rows;
    for (auto& [name, row] : by_name) {
        row.percent = total ? 100.0 * static_cast<double>(row.total_time) / static_cast<double>(total) : 0.0;
        rows.push_back(row);
    }
    std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.total_time > b.total_time; });
    return rows;
}

void print_profile(std::ostream& out, const std::vector<ProfileRow>& rows) {
    std::size_t width = 6;
    for (const auto& r : rows) width = std::max(width, r.kernel_name.size());
    out << std::left << std::setw(static_cast<int>(width)) << "kernel" << "  " << std::right << std::setw(8) << "calls"
        << "  " << std::setw(16) << "sim_time(instr)" << "  " << std::setw(7) << "%" << "\n";
    for (const auto& r : rows)
        out << std::left << std::setw(static_cast<int>(width)) << r.kernel_name << "  " << std::right << std::setw(8)
            << r.calls << "  " << std::setw(16) << r.total_time << "  " << std::setw(7) << std::fixed
            << std::setprecision(2) << r.percent << "\n";
}

std::vector<std::string> split_cmd(const std::string& cmd) {
    auto argv = kc::split_command_line(cmd);
    if (argv.empty()) throw CliError("empty --cmd");
    return argv;
}

ChildOutcome run_child(const ChildOptions& options) {
    if (options.argv.empty()) throw CliError("no command to run");
    std::vector<std::string> env_strings;
    for (const auto& [k, v] : options.env) env_strings.push_back(k + "=" + v);

    const pid_t pid = fork();
    if (pid < 0) throw CliError(std::string("fork failed: ") + std::strerror(errno));
    if (pid == 0) {
        // Own process group, so termination reaches anything the workload spawned.
        setpgid(0, 0);
        for (const auto& kv : env_strings) putenv(const_cast<char*>(kv.c_str()));
        if (options.quiet)
            if (int fd = open("/dev/null", O_WRONLY); fd >= 0) dup2(fd, STDOUT_FILENO);
        std::vector<char*> argv;
        for (const auto& a : options.argv) argv.push_back(const_cast<char*>(a.c_str()));
        argv.push_back(nullptr);
        execvp(argv[0], argv.data());
        std::fprintf(stderr, "kcap: cannot run %s: %s\n", argv[0], std::strerror(errno));
        _exit(127);
    }

    setpgid(pid, pid);
    ChildOutcome out;
    std::optional<Clock::time_point> seen_at, term_at;
    int status = 0;
    for (;;) {
        const pid_t r = waitpid(pid, &status, WNOHANG);
        if (r == pid) break;
        if (r < 0 && errno != EINTR) throw CliError(std::string("waitpid failed: ") + std::strerror(errno));
        const auto now = Clock::now();
        if (!seen_at && options.sentinel && fs::exists(*options.sentinel)) {
            seen_at = now;
            out.sentinel_seen = true;
            out.terminated = true;
            term_at = now;
            kill(-pid, SIGTERM);
        } else if (term_at && !out.killed && now - *term_at >= options.grace) {
            out.killed = true;
            kill(-pid, SIGKILL);
        }
        std::this_thread::sleep_for(seen_at ? std::chrono::milliseconds(5) : options.poll);
    }
    // Leftovers of a group whose leader already exited.
    if (out.terminated) kill(-pid, SIGKILL);
    if (seen_at) out.after_sentinel = std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - *seen_at);
    if (!out.sentinel_seen && options.sentinel && fs::exists(*options.sentinel)) out.sentinel_seen = true;
    if (WIFEXITED(status)) out.exit_code = WEXITSTATUS(status);
    if (WIFSIGNALED(status)) out.signal = WTERMSIG(status);
    return out;
}

std::vector<ProfileRow> cmd_profile(const std::string& cmd) {
    TempDir tmp("kcap-profile");
    const fs::path trace_file = tmp.path() / "trace.json";
    ChildOptions child;
    child.argv = split_cmd(cmd);
    child.env[host::kTraceFileEnv] = trace_file.string();
    const ChildOutcome o = run_child(child);
    if (o.exit_code != 0)
        throw CliError("workload failed (" + (o.signal ? "signal " + std::to_string(o.signal) : "exit " + std::to_string(o.exit_code)) + ")");
    if (!fs::exists(trace_file)) throw CliError("workload produced no dispatch trace");
    return aggregate_profile(host::trace_from_json(json::parse(read_text(trace_file))));
}

namespace {

std::optional<fs::path> find_compile_db(const fs::path& source_dir) {
    for (const fs::path& p : {source_dir / "compile_commands.json", source_dir / "build/compile_commands.json"})
        if (fs::is_regular_file(p)) return p;
    return std::nullopt;
}

}  // namespace

ExtractResult cmd_extract(const ExtractOptions& options) {
    ExtractOptions o = options;
    o.source_dir = kc::normalize(fs::absolute(o.source_dir));
    if (o.compile_db) o.compile_db = fs::absolute(*o.compile_db);
    if (o.kernel.empty()) throw CliError("no kernel name given");
    if (!fs::is_directory(o.source_dir)) throw CliError("source dir not found: " + o.source_dir.string());
    ExtractResult res;
    const fs::path out = fs::absolute(o.output);
    fs::create_directories(out);
    res.capture_dir = out / rp::kCaptureDir;
    // A stale sentinel would end the next run early.
    fs::remove_all(res.capture_dir);
    res.language = o.language.value_or(sd::detect_language(o.source_dir, o.kernel));
    const fs::path name_map = out / kNameMapFile;

    ChildOptions child;
    child.argv = split_cmd(o.cmd);
    child.env = {{"KERNCAP_KERNEL", o.kernel},
                 {"KERNCAP_OUTPUT", res.capture_dir.string()},
                 {"KERNCAP_DISPATCH_INDEX", std::to_string(o.dispatch_index)},
                 {"KERNCAP_LANGUAGE", std::string(icpt::name_of(res.language))},
                 {"KERNCAP_NAME_MAP", name_map.string()}};
    child.sentinel = res.capture_dir / cap::kSentinelFile;
    child.poll = o.poll;
    child.grace = o.grace;
    spdlog::info("extract: running {} ({} kernel '{}')", o.cmd, icpt::name_of(res.language), o.kernel);
    res.child = run_child(child);
    res.captured = fs::exists(res.capture_dir / cap::kSentinelFile);
    if (!res.captured) {
        res.error = "target kernel '" + o.kernel + "' was not dispatched (dispatch " + std::to_string(o.dispatch_index) +
                    "); workload " + (res.child.signal ? "ended by signal " + std::to_string(res.child.signal)
                                                        : "exited with status " + std::to_string(res.child.exit_code));
        res.exit_code = 2;
        return res;
    }

    try {
        const auto bundle = cap::CaptureBundle::load(res.capture_dir);
        if (res.language == icpt::Language::Jit) {
            const auto resolution = sd::discover_jit(o.kernel, o.source_dir);
            res.project = rp::generate_jit(res.capture_dir, resolution, out, name_map);
        } else {
            const auto db = o.compile_db ? o.compile_db : find_compile_db(o.source_dir);
            const auto resolution =
                sd::discover_compiled(bundle.dispatch.kernel_name, bundle.dispatch.mangled_symbol, o.source_dir, db);
            res.project = rp::generate_compiled(res.capture_dir, resolution, out);
        }
    } catch (const std::exception& e) {
        res.error = std::string("capture kept at ") + res.capture_dir.string() + "; reproducer not generated: " + e.what();
        res.exit_code = 3;
    }
    return res;
}

kc::JitResult jit_compile_manifest(const fs::path& replay_manifest, const std::map<std::string, std::int64_t>& overrides) {
    const fs::path project = replay_manifest.parent_path();
    const auto jm = rp::JitReplayManifest::from_json(json::parse(read_text(replay_manifest)));
    const auto module = kc::parse_script(project / jm.module);
    const kc::ScriptKernel* kernel = module.find(jm.kernel);
    if (!kernel) throw CliError("kernel '" + jm.kernel + "' not found in " + (project / jm.module).string());
    kc::JitRequest req;
    req.constexprs = jm.constexprs;
    for (const auto& [k, v] : overrides) req.constexprs[k] = v;
    req.config = jm.config;
    req.tensor_meta = jm.tensor_meta;
    return kc::jit_compile(module, *kernel, req);
}

int cmd_replay(const fs::path& capture_dir, const std::optional<fs::path>& code_object, std::uint32_t iterations, bool recopy,
               bool dump_output, std::ostream& out) {
    rpl::ReplayOptions opts;
    opts.code_object_override = code_object;
    opts.iterations = iterations;
    opts.recopy = recopy;
    opts.dump_output = dump_output;
    try {
        const auto report = rpl::replay(capture_dir, opts);
        std::uint64_t sum = 0;
        for (auto n : report.instructions) sum += n;
        out << "replayed " << report.restored_regions << " regions (" << report.skipped_regions << " skipped), "
            << report.restored_variables << " module variables\n";
        out << "code object " << report.code_object_sha256 << "\n";
        out << "iterations " << report.instructions.size() << ", average sim_time(instr) "
            << sum / report.instructions.size() << "\n";
        if (report.output_dir) out << "output written to " << report.output_dir->string() << "\n";
        return 0;
    } catch (const rpl::ReplayError& e) {
        out << "replay failed [" << rpl::name_of(e.kind()) << "]: " << e.what() << "\n";
        return 1;
    }
}

int cmd_validate(const fs::path& capture_dir, const std::optional<fs::path>& code_object, double atol, double rtol,
                 std::ostream& out) {
    if (!code_object) {
        const auto s = val::smoke(capture_dir);
        out << (s.pass ? "smoke: PASS" : "smoke: FAIL: " + s.error) << "\n";
        return s.pass ? 0 : 1;
    }
    try {
        const auto report = val::validate_variant(capture_dir, *code_object, fs::absolute(capture_dir).parent_path() / kValidateDir,
                                                  std::pair{atol, rtol});
        for (const auto& r : report.diff.regions) {
            if (!r.missing_in.empty()) {
                out << r.file << ": missing in " << r.missing_in << "\n";
                continue;
            }
            out << r.file << ": " << r.differing_bytes << " / " << r.total_bytes << " bytes differ (" << std::fixed
                << std::setprecision(4) << r.percent << "%)\n";
        }
        bool tol_pass = true;
        for (const auto& [arg, t] : report.tolerance) {
            out << "  " << arg << ": " << t.message << "\n";
            tol_pass = tol_pass && t.pass;
        }
        out << "byte-exact: " << (report.diff.pass ? "PASS" : "FAIL") << "\n";
        out << std::defaultfloat << "tolerance (atol=" << atol << ", rtol=" << rtol << "): " << (tol_pass ? "PASS" : "FAIL") << "\n";
        return report.diff.pass ? 0 : 1;
    } catch (const rpl::ReplayError& e) {
        out << "validation failed [" << rpl::name_of(e.kind()) << "]: " << e.what() << "\n";
        return 1;
    }
}

int run_manifest_target(const fs::path& project_dir, const std::string& target, std::ostream& out) {
    const fs::path root = kc::normalize(project_dir);
    const auto m = rp::RunnerManifest::load(root);
    if (!m.targets.contains(target)) throw CliError("unknown target '" + target + "'");
    const fs::path capture = root / rp::kCaptureDir;
    const fs::path variant = root / rp::kVariantObject;
    if ((target == "run-variant" || target == "validate-variant") && !fs::exists(variant))
        throw CliError("missing variant object " + variant.string() + "; run the recompile target first");

    if (target == "run") return cmd_replay(capture, std::nullopt, 1, true, false, out);
    if (target == "run-variant") return cmd_replay(capture, variant, 1, true, false, out);
    if (target == "validate-variant") return cmd_validate(capture, variant, val::kDefaultAtol, val::kDefaultRtol, out);

    // recompile: the variant object always lands in the project, whatever -o says.
    Bytes bytes;
    if (m.language == "jit") {
        bytes = jit_compile_manifest(root / rp::kReplayManifest).bytes;
    } else {
        kc::CompileCommand cmd;
        cmd.directory = m.compile_directory;
        cmd.arguments = m.targets.at("recompile");
        const auto driver = kc::parse_driver_args(cmd);
        if (!driver.source) throw CliError("recompile command names no source file");
        cmd.file = *driver.source;
        kc::CompileOptions copts;
        copts.overlay = root / rp::kOverlayFile;
        auto res = kc::compile_tu(cmd, copts);
        for (const auto& w : res.warnings) out << "warning: " << w << "\n";
        bytes = std::move(res.bytes);
    }
    write_file(variant, bytes);
    out << "wrote " << variant.string() << " (" << bytes.size() << " bytes)\n";
    return 0;
}

}  // namespace kcap::cli
