#include "support.hpp"

#include "kcap/cli/cli.hpp"
#include "kcap/srcdisc/srcdisc.hpp"

#include <doctest.h>

#include <algorithm>
#include <set>
#include <sstream>

#include <signal.h>

using namespace kcap;
using cli::ProfileRow;
using vdev::DispatchTraceEntry;

namespace {

DispatchTraceEntry entry(const std::string& name, std::uint64_t instr) { return {"_k$" + name, name, instr, {}}; }

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("profile ranks by total time and counts calls") {
    auto rows = cli::aggregate_profile({entry("a", 50), entry("b", 30), entry("a", 50)});
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].kernel_name == "a");
    CHECK(rows[0].calls == 2);
    CHECK(rows[0].total_time == 100);
    CHECK(rows[0].percent == doctest::Approx(100.0 * 100 / 130));
    CHECK(rows[1].kernel_name == "b");
    CHECK(cli::aggregate_profile({}).empty());
    std::ostringstream out;
    cli::print_profile(out, rows);
    CHECK(out.str().find("sim_time(instr)") != std::string::npos);
}

TEST_CASE("property: profile equals a brute-force recount") {
    auto gen = test::rng(17);
    for (int round = 0; round < 200; ++round) {
        std::vector<DispatchTraceEntry> trace;
        const int n = static_cast<int>(gen() % 40);
        for (int i = 0; i < n; ++i) trace.push_back(entry("k" + std::to_string(gen() % 6), gen() % 1000));
        auto rows = cli::aggregate_profile(trace);

        std::set<std::string> names;
        for (const auto& t : trace) names.insert(t.kernel_name);
        REQUIRE(rows.size() == names.size());
        double pct = 0;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            std::uint64_t calls = 0, total = 0;
            for (const auto& t : trace)
                if (t.kernel_name == rows[i].kernel_name) ++calls, total += t.instructions;
            CHECK(rows[i].calls == calls);
            CHECK(rows[i].total_time == total);
            if (i) CHECK(rows[i - 1].total_time >= rows[i].total_time);
            pct += rows[i].percent;
        }
        std::uint64_t sum = 0;
        for (const auto& t : trace) sum += t.instructions;
        if (sum) CHECK(pct == doctest::Approx(100.0));
    }
}

TEST_CASE("child runner reports exit codes, env and signals") {
    TempDir dir;
    const fs::path flag = dir.path() / "flag";
    cli::ChildOptions o;
    o.argv = {"sh", "-c", "echo $KCAP_X > " + flag.string() + "; exit 3"};
    o.env["KCAP_X"] = "hello";
    o.poll = std::chrono::milliseconds(5);
    auto r = cli::run_child(o);
    CHECK(r.exit_code == 3);
    CHECK_FALSE(r.terminated);
    CHECK(read_text(flag) == "hello\n");

    o.argv = {"kcap-definitely-missing-binary"};
    CHECK(cli::run_child(o).exit_code == 127);
}

TEST_CASE("the watchdog ends the child soon after the sentinel appears") {
    TempDir dir;
    const fs::path sentinel = dir.path() / "done";
    cli::ChildOptions o;
    o.argv = {"sh", "-c", "touch " + sentinel.string() + "; sleep 30"};
    o.sentinel = sentinel;
    o.poll = std::chrono::milliseconds(20);
    const auto start = std::chrono::steady_clock::now();
    auto r = cli::run_child(o);
    CHECK(r.sentinel_seen);
    CHECK(r.terminated);
    CHECK(r.signal != 0);
    CHECK(std::chrono::steady_clock::now() - start < std::chrono::seconds(5));
    CHECK(r.after_sentinel <= o.poll + o.grace);
}

TEST_CASE("a child ignoring SIGTERM is killed after the grace period") {
    TempDir dir;
    const fs::path sentinel = dir.path() / "done";
    cli::ChildOptions o;
    o.argv = {"sh", "-c", "trap '' TERM; touch " + sentinel.string() + "; while true; do sleep 0.05; done"};
    o.sentinel = sentinel;
    o.poll = std::chrono::milliseconds(10);
    o.grace = std::chrono::milliseconds(200);
    auto r = cli::run_child(o);
    CHECK(r.killed);
    CHECK(r.signal == SIGKILL);
    CHECK(r.after_sentinel >= o.grace);
    CHECK(r.after_sentinel < std::chrono::seconds(2));
}

TEST_CASE("manifest targets reject unknown names and missing variants") {
    TempDir dir;
    rp::RunnerManifest m;
    m.language = "compiled";
    m.kernel_name = "k";
    m.mangled_symbol = "_k$k";
    m.targets = {{"run", {"kcap", "replay", "capture"}}, {"recompile", {"kcc"}},
                 {"run-variant", {"kcap"}}, {"validate-variant", {"kcap"}}};
    write_text(dir.path() / rp::kManifestFile, m.to_json().dump());
    std::ostringstream out;
    CHECK_THROWS_WITH_AS(cli::run_manifest_target(dir.path(), "deploy", out), doctest::Contains("unknown target"),
                         cli::CliError);
    CHECK_THROWS_WITH_AS(cli::run_manifest_target(dir.path(), "run-variant", out),
                         doctest::Contains(rp::kVariantObject), cli::CliError);
    CHECK_THROWS_WITH_AS(cli::run_manifest_target(dir.path(), "validate-variant", out),
                         doctest::Contains(rp::kVariantObject), cli::CliError);
}

TEST_CASE("manifest targets on a generated project") {
    test::LlamaCapture lc;
    const fs::path out_dir = lc.tree.dir.path() / "project";
    auto res = sd::discover_compiled("mul_mat_vec_q<39>", lc.mangled, lc.tree.root, lc.tree.db_path());
    rp::generate_compiled(lc.capture, res, out_dir);
    std::ostringstream out;
    CHECK(cli::run_manifest_target(out_dir, "run", out) == 0);
    CHECK(cli::run_manifest_target(out_dir, "recompile", out) == 0);
    CHECK(fs::exists(out_dir / rp::kVariantObject));
    CHECK(cli::run_manifest_target(out_dir, "run-variant", out) == 0);
    CHECK(cli::run_manifest_target(out_dir, "validate-variant", out) == 0);
    CHECK(out.str().find("byte-exact: PASS") != std::string::npos);
}

TEST_CASE("extract reports a target that never ran") {
    TempDir dir;
    write_text(dir.path() / "k.ks", "__kernel idle(p: *u32) {\n    LDARG r1, p\n}\n");
    cli::ExtractOptions o;
    o.kernel = "never_dispatched";
    o.cmd = "true";
    o.source_dir = dir.path();
    o.output = dir.path() / "out";
    o.poll = std::chrono::milliseconds(5);
    auto r = cli::cmd_extract(o);
    CHECK(r.exit_code == 2);
    CHECK_FALSE(r.captured);
    CHECK(r.error.find("not dispatched") != std::string::npos);
    CHECK_FALSE(fs::exists(r.capture_dir / cap::kSentinelFile));
}

}
