#include "kcap/cli/cli.hpp"
#include "kcap/common/files.hpp"
#include "kcap/validator/validator.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <iostream>

using namespace kcap;

namespace {

std::map<std::string, std::int64_t> parse_sets(const std::vector<std::string>& sets) {
    std::map<std::string, std::int64_t> out;
    for (const auto& s : sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos || eq == 0) throw cli::CliError("--set expects NAME=VALUE, got '" + s + "'");
        out[s.substr(0, eq)] = std::stoll(s.substr(eq + 1), nullptr, 0);
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Kernel capture, reproducer generation and replay"};
    app.require_subcommand(1);
    bool verbose = false;
    app.add_flag("-v,--verbose", verbose, "Debug logging");

    std::string cmd;
    auto* profile = app.add_subcommand("profile", "Rank the kernels of a workload by simulated time");
    profile->add_option("--cmd", cmd, "Workload command")->required();

    cli::ExtractOptions ex;
    std::string language;
    unsigned poll_ms = 100, grace_ms = 1000;
    std::string compile_db;
    auto* extract = app.add_subcommand("extract", "Capture one dispatch and build a reproducer project");
    extract->add_option("kernel", ex.kernel, "Kernel name (substring of the demangled name)")->required();
    extract->add_option("--cmd", ex.cmd, "Workload command")->required();
    extract->add_option("--source-dir", ex.source_dir, "Source tree to search")->required();
    extract->add_option("--output,-o", ex.output, "Project directory")->required();
    extract->add_option("--language", language, "compiled or jit; detected when omitted")
        ->check(CLI::IsMember({"compiled", "jit"}));
    extract->add_option("--dispatch-index", ex.dispatch_index, "Which matching dispatch to capture (from 1)")
        ->check(CLI::PositiveNumber);
    extract->add_option("--compile-db", compile_db, "compile_commands.json for compiled kernels");
    extract->add_option("--poll-ms", poll_ms, "Sentinel poll interval");
    extract->add_option("--grace-ms", grace_ms, "Delay between SIGTERM and SIGKILL");

    fs::path dir;
    std::string code_object;
    std::uint32_t iterations = 1;
    bool no_recopy = false, dump_output = false;
    auto* replay = app.add_subcommand("replay", "Replay a capture");
    replay->add_option("dir", dir, "Capture directory")->required();
    replay->add_option("--hsaco", code_object, "Replacement code object");
    replay->add_option("--iterations", iterations, "Dispatch count")->check(CLI::PositiveNumber);
    replay->add_flag("--no-recopy", no_recopy, "Keep device memory between iterations");
    replay->add_flag("--dump-output", dump_output, "Write post-dispatch regions to output/");

    double atol = val::kDefaultAtol, rtol = val::kDefaultRtol;
    auto* validate = app.add_subcommand("validate", "Smoke-test a capture or compare a variant against it");
    validate->add_option("dir", dir, "Capture directory")->required();
    validate->add_option("--hsaco", code_object, "Variant code object");
    validate->add_option("--atol", atol, "Absolute tolerance");
    validate->add_option("--rtol", rtol, "Relative tolerance");

    std::string target;
    auto* run = app.add_subcommand("run", "Execute a reproducer project target");
    run->add_option("project", dir, "Project directory")->required();
    run->add_option("target", target, "run, recompile, run-variant or validate-variant")->required();

    fs::path out;
    std::vector<std::string> sets;
    auto* jit = app.add_subcommand("jit-compile", "Compile a JIT reproducer's kernel");
    jit->add_option("manifest", dir, "replay_manifest.json")->required();
    jit->add_option("-o", out, "Output code object")->required();
    jit->add_option("--set", sets, "Override a constexpr, NAME=VALUE");

    CLI11_PARSE(app, argc, argv);
    spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::warn);
    const auto code_object_path = code_object.empty() ? std::nullopt : std::optional<fs::path>(code_object);

    try {
        if (*profile) {
            cli::print_profile(std::cout, cli::cmd_profile(cmd));
            return 0;
        }
        if (*extract) {
            if (!language.empty()) ex.language = icpt::language_from(language);
            if (!compile_db.empty()) ex.compile_db = fs::path(compile_db);
            ex.poll = std::chrono::milliseconds(poll_ms);
            ex.grace = std::chrono::milliseconds(grace_ms);
            const auto res = cli::cmd_extract(ex);
            if (res.exit_code) {
                std::cerr << "kcap extract: " << res.error << "\n";
                return res.exit_code;
            }
            std::cout << "captured " << icpt::name_of(res.language) << " kernel into " << res.capture_dir.string()
                      << "\nreproducer project at " << res.project->root.string() << "\n";
            return 0;
        }
        if (*replay) return cli::cmd_replay(dir, code_object_path, iterations, !no_recopy, dump_output, std::cout);
        if (*validate) return cli::cmd_validate(dir, code_object_path, atol, rtol, std::cout);
        if (*run) return cli::run_manifest_target(dir, target, std::cout);
        if (*jit) {
            const auto res = cli::jit_compile_manifest(dir, parse_sets(sets));
            write_file_mkdirs(out, res.bytes);
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "kcap: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
