#include "support.hpp"

#include "kcap/common/hex.hpp"
#include "kcap/kernelc/jit.hpp"
#include "kcap/kernelc/namemap.hpp"
#include "kcap/kernelc/overlay.hpp"
#include "kcap/reprogen/reprogen.hpp"
#include "kcap/srcdisc/srcdisc.hpp"

#include <doctest.h>

#include <set>

using namespace kcap;
using namespace kcap::rp;
using nlohmann::json;

namespace {

std::map<fs::path, Bytes> snapshot_tree(const fs::path& root) {
    std::map<fs::path, Bytes> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out[fs::relative(e.path(), root)] = read_file(e.path());
    return out;
}

sd::SourceResolution llama_resolution(const test::LlamaCapture& lc) {
    return sd::discover_compiled("mul_mat_vec_q<39>", lc.mangled, lc.tree.root, lc.tree.db_path());
}

kc::CompileResult recompile(const ReproducerProject& p) {
    kc::CompileCommand cmd;
    cmd.directory = p.manifest.compile_directory;
    cmd.arguments = p.manifest.targets.at("recompile");
    cmd.file = *kc::parse_driver_args(cmd).source;
    kc::CompileOptions opts;
    opts.overlay = p.root / kOverlayFile;
    return kc::compile_tu(cmd, opts);
}

// Captures one JIT dispatch of `kernel` from `module_file`; the name map
// record lands next to the capture.
struct JitCapture {
    fs::path capture;
    fs::path name_map;
    kc::JitResult compiled;
    vdev::DeviceAddress buffer;
};

JitCapture capture_jit(const fs::path& work, const fs::path& module_file, const std::string& kernel,
                       kc::JitRequest request, const std::function<Bytes(vdev::DeviceAddress)>& kernarg,
                       std::uint32_t grid, std::size_t buffer_bytes) {
    JitCapture jc;
    jc.capture = work / "capture";
    jc.name_map = work / "name_map.json";
    request.name_map = jc.name_map;
    auto mod = kc::parse_script(module_file);
    jc.compiled = kc::jit_compile(mod, *mod.find(kernel), request);
    vdev::Runtime rt;
    cap::CaptureOptions opts;
    opts.output_dir = jc.capture;
    opts.name_map = jc.name_map;
    auto state = icpt::InterceptState::install(rt, {kernel}, cap::make_capture_sink(opts));
    auto exec = rt.api().load_code_object(jc.compiled.bytes);
    jc.buffer = rt.api().pool_allocate(buffer_bytes);
    Bytes fill(buffer_bytes);
    for (std::size_t i = 0; i < fill.size(); ++i) fill[i] = static_cast<std::uint8_t>(i % 7);
    rt.api().copy_to_device(jc.buffer, fill);
    test::Dispatcher{rt, exec}.run(jc.compiled.mangled, {grid, 1, 1}, kernarg(jc.buffer));
    REQUIRE_FALSE(state->capture_error());
    return jc;
}

}  // namespace

TEST_SUITE("reprogen") {

TEST_CASE("overlay: one-file golden listing") {
    const std::string golden = "{\"version\": 0, \"roots\": [\n"
                               "  {\"type\": \"directory\",\n"
                               "   \"name\": \"/original/src/kernels\",\n"
                               "   \"contents\": [\n"
                               "     {\"type\": \"file\",\n"
                               "      \"name\": \"gemm.cuh\",\n"
                               "      \"external-contents\": \"/isolated/deps/gemm.cuh\"}\n"
                               "   ]}\n"
                               "]}";
    CHECK(emit_overlay({{"/original/src/kernels/gemm.cuh", "/isolated/deps/gemm.cuh"}}) == golden);
    auto parsed = json::parse(golden);
    CHECK(parsed["version"] == 0);
}

TEST_CASE("overlay: grouping, ordering and errors") {
    auto text = emit_overlay({{"/b/y.kh", "deps/y.kh"}, {"/a/z.kh", "deps/z.kh"}, {"/b/x.kh", "deps/x.kh"}});
    auto j = json::parse(text);
    REQUIRE(j["roots"].size() == 2);
    CHECK(j["roots"][0]["name"] == "/a");
    CHECK(j["roots"][1]["name"] == "/b");
    REQUIRE(j["roots"][1]["contents"].size() == 2);
    CHECK(j["roots"][1]["contents"][0]["name"] == "x.kh");
    CHECK(j["roots"][1]["contents"][1]["name"] == "y.kh");
    // Input order does not matter.
    CHECK(emit_overlay({{"/b/x.kh", "deps/x.kh"}, {"/a/z.kh", "deps/z.kh"}, {"/b/y.kh", "deps/y.kh"}}) == text);

    auto overlay = kc::Overlay::parse(text, "/proj");
    CHECK(*overlay.lookup("/b/y.kh") == fs::path("/proj/deps/y.kh"));

    CHECK_THROWS_AS(emit_overlay({{"/a/x.kh", "1"}, {"/a/./x.kh", "2"}}), GenerateError);
    CHECK_THROWS_AS(emit_overlay({{"rel/x.kh", "1"}}), GenerateError);
}

TEST_CASE("flattened dependency names") {
    auto names = flatten_names({"/s/a/util.kh", "/s/b/util.kh", "/s/common.kh"});
    CHECK(names.at("/s/a/util.kh") == "a_util.kh");
    CHECK(names.at("/s/b/util.kh") == "b_util.kh");
    CHECK(names.at("/s/common.kh") == "common.kh");
    auto deep = flatten_names({"/s/x/in/util.kh", "/s/y/in/util.kh"});
    CHECK(deep.at("/s/x/in/util.kh") == "x_in_util.kh");
    CHECK(deep.at("/s/y/in/util.kh") == "y_in_util.kh");
}

TEST_CASE("property: flattened names are unique") {
    auto gen = test::rng(5);
    const std::vector<std::string> parts = {"a", "b", "c", "util.kh", "x.kh"};
    for (int round = 0; round < 100; ++round) {
        std::set<fs::path> files;
        for (std::size_t n = 1 + gen() % 8; files.size() < n;) {
            fs::path p = "/root";
            for (std::size_t d = gen() % 3; d > 0; --d) p /= parts[gen() % 3];
            files.insert(p / parts[3 + gen() % 2]);
        }
        auto names = flatten_names({files.begin(), files.end()});
        std::set<std::string> distinct;
        for (const auto& [f, name] : names) {
            distinct.insert(name);
            CHECK(name.size() >= f.filename().string().size());
            CHECK(name.ends_with(f.filename().string()));
        }
        CHECK(distinct.size() == files.size());
    }
}

TEST_CASE("compiled project layout, overlay and manifest") {
    test::LlamaCapture lc;
    auto res = llama_resolution(lc);
    REQUIRE(res.method == sd::Method::DebugManifest);
    const fs::path out = lc.tree.dir.path() / "project";
    auto project = generate_compiled(lc.capture, res, out);

    CHECK(fs::exists(out / kCaptureDir / cap::kSentinelFile));
    CHECK(fs::exists(out / "kernel_variant.ks"));
    CHECK(read_text(out / "kernel_variant.ks") == read_text(*res.translation_unit));
    std::set<std::string> deps;
    for (const auto& e : fs::directory_iterator(out / kDepsDir)) deps.insert(e.path().filename().string());
    CHECK(deps == std::set<std::string>{"common.kh", "ggml-types.kh", "mmq.kh"});

    auto overlay = kc::Overlay::load(out / kOverlayFile);
    CHECK(overlay.mappings().size() == 4);
    CHECK(*overlay.lookup(*res.translation_unit) == kc::normalize(out / "kernel_variant.ks"));
    CHECK(*overlay.lookup(lc.tree.root / test::kMmqDir / "mmq.kh") == kc::normalize(out / "deps/mmq.kh"));

    auto m = RunnerManifest::load(out);
    CHECK(m.language == "compiled");
    CHECK(m.mangled_symbol == lc.mangled);
    std::set<std::string> targets;
    for (const auto& [name, cmd] : m.targets) targets.insert(name);
    CHECK(targets == std::set<std::string>(kTargets.begin(), kTargets.end()));
    // The original arguments, unchanged, then the overlay and device-only flags.
    auto expected = test::instance_command(lc.tree.root, "q8_0").arguments;
    for (const char* f : {"-ivfsoverlay", "vfs.json", "--device-only", "--no-bundle"}) expected.push_back(f);
    CHECK(m.targets.at("recompile") == expected);
    CHECK(m.targets.at("run-variant").back() == kVariantObject);
    CHECK(m.compile_directory == kc::normalize(lc.tree.root));
}

TEST_CASE("compiled project: recompile reads only project copies") {
    test::LlamaCapture lc;
    const fs::path out = lc.tree.dir.path() / "project";
    auto project = generate_compiled(lc.capture, llama_resolution(lc), out);
    auto baseline = recompile(project);
    REQUIRE(baseline.code_object);
    for (const fs::path& f : baseline.opened_files) {
        INFO(f.string());
        CHECK(kc::normalize(f).string().starts_with(kc::normalize(out).string()));
    }
    // Same bytes as compiling the original TU with the same flags.
    auto original = test::instance_command(lc.tree.root, "q8_0");
    original.arguments.push_back("--device-only");
    original.arguments.push_back("--no-bundle");
    auto direct = kc::compile_tu(original);
    CHECK(direct.bytes == baseline.bytes);

    // An edit to a local dependency shows up in the recompiled object.
    std::string mmq = read_text(out / "deps/mmq.kh");
    const auto pos = mmq.find("MOVI r6, 0.0f");
    REQUIRE(pos != std::string::npos);
    mmq.replace(pos, 13, "MOVI r6, 1.0f");
    write_text(out / "deps/mmq.kh", mmq);
    CHECK(recompile(project).bytes != baseline.bytes);
    CHECK(read_text(lc.tree.root / test::kMmqDir / "mmq.kh").find("MOVI r6, 0.0f") != std::string::npos);
}

TEST_CASE("compiled project is relocatable and deterministic") {
    test::LlamaCapture lc;
    auto res = llama_resolution(lc);
    const fs::path one = lc.tree.dir.path() / "one", two = lc.tree.dir.path() / "elsewhere/two";
    generate_compiled(lc.capture, res, one);
    generate_compiled(lc.capture, res, two);
    auto a = snapshot_tree(one), b = snapshot_tree(two);
    CHECK(a == b);
    for (const auto& [rel, bytes] : a) {
        INFO(rel.string());
        CHECK(as_chars(bytes).find(one.string()) == std::string_view::npos);
    }
    // Regenerating in place over an existing project gives the same files.
    generate_compiled(one / kCaptureDir, res, one);
    CHECK(snapshot_tree(one) == a);
}

TEST_CASE("compiled project: single file kernel and missing inputs") {
    test::LlamaCapture lc;
    const fs::path single = lc.tree.dir.path() / "single/only.ks";
    fs::create_directories(single.parent_path());
    write_text(single, "__kernel only(p: *u32) {\n    LDARG r1, p\n}\n");
    sd::SourceResolution res;
    res.kernel_file = single;
    res.translation_unit = single;
    auto project = generate_compiled(lc.capture, res, lc.tree.dir.path() / "p");
    CHECK(fs::is_empty(project.root / kDepsDir));
    auto overlay = kc::Overlay::load(project.root / kOverlayFile);
    CHECK(overlay.mappings().size() == 1);
    CHECK(project.manifest.targets.at("recompile") ==
          std::vector<std::string>{"kcc", "-c", kc::normalize(single).string(), "-ivfsoverlay", "vfs.json",
                                   "--device-only", "--no-bundle"});

    fs::remove(lc.capture / cap::kSentinelFile);
    CHECK_THROWS_AS(generate_compiled(lc.capture, res, lc.tree.dir.path() / "q"), GenerateError);
    write_text(lc.capture / cap::kSentinelFile, "");
    res.dep_files = {lc.tree.dir.path() / "single/gone.kh"};
    CHECK_THROWS_AS(generate_compiled(lc.capture, res, lc.tree.dir.path() / "r"), GenerateError);
}

TEST_CASE("JIT project: autotuned package kernel pins its config") {
    TempDir dir;
    copy_tree(test::fixtures_dir() / "jitpkg", dir.path() / "src");
    const fs::path kernels = dir.path() / "src/reduce/kernels.kpy";
    kc::JitRequest req;
    req.config = kc::AutotuneConfig{{{"BLOCK", 64}}, 4, 2};
    req.tensor_meta = {kc::TensorMeta{"x", "f16", {2, 64}, {64, 1}}};
    const std::size_t rows = 2, n = 64;
    auto jc = capture_jit(
        dir.path(), kernels, "row_sum", req,
        [&](vdev::DeviceAddress buf) {
            Bytes ka;
            test::put_u64(ka, 0, buf.value);
            test::put_u64(ka, 8, buf.value + rows * n * 2);
            test::put_u64(ka, 16, n);
            return ka;
        },
        rows, rows * n * 2 + rows * 2);

    auto res = sd::discover_jit("row_sum", dir.path() / "src");
    const fs::path out = dir.path() / "project";
    auto project = generate_jit(jc.capture, res, out, jc.name_map);
    REQUIRE(project.jit.has_value());
    const auto jm = JitReplayManifest::load(out);
    CHECK(jm.kernel == "row_sum");
    CHECK(jm.module == fs::path("src/reduce/kernels.kpy"));
    REQUIRE(jm.config.has_value());
    CHECK(*jm.config == kc::AutotuneConfig{{{"BLOCK", 64}}, 4, 2});
    CHECK(jm.autotuner_bypassed);
    CHECK(jm.constexprs == std::map<std::string, std::int64_t>{{"BLOCK", 64}});
    CHECK(jm.supplied == std::vector<std::string>{"BLOCK", "num_stages", "num_warps"});
    CHECK(jm.grid == std::array<std::uint32_t, 3>{2, 1, 1});
    CHECK(jm.tensor_meta == req.tensor_meta);
    CHECK(jm.code_object_sha256 == jc.compiled.sha256);
    REQUIRE(jm.args.size() == 3);
    CHECK(jm.args[0].name == "x");
    CHECK(jm.args[0].value == hex_address(jc.buffer.value));
    CHECK(jm.args[1].value == hex_address(jc.buffer.value + rows * n * 2));
    CHECK(jm.args[2].value == 64);
    // The package is copied whole, so its relative import still resolves.
    for (const char* f : {"__init__.kpy", "common.kpy", "kernels.kpy"}) CHECK(fs::exists(out / "src/reduce" / f));
    auto mod = kc::parse_script(out / jm.module);
    CHECK(kc::module_constants(mod).at("ELEM_BYTES") == 2);

    // The pinned values rebuild the captured code object exactly.
    kc::JitRequest again;
    again.constexprs = jm.constexprs;
    again.config = jm.config;
    CHECK(kc::jit_compile(mod, *mod.find(jm.kernel), again).sha256 == jm.code_object_sha256);

    auto m = RunnerManifest::load(out);
    CHECK(m.language == "jit");
    CHECK(m.targets.at("recompile") ==
          std::vector<std::string>{"kcap", "jit-compile", kReplayManifest, "-o", kVariantObject});
}

TEST_CASE("JIT project: plain module kernel and missing record") {
    TempDir dir;
    copy_tree(test::fixtures_dir() / "jitmod", dir.path() / "src");
    kc::JitRequest req;
    req.constexprs = {{"FACTOR", 3}};
    auto jc = capture_jit(
        dir.path(), dir.path() / "src/scale.kpy", "scale_f32", req,
        [](vdev::DeviceAddress buf) {
            Bytes ka;
            test::put_u64(ka, 0, buf.value);
            test::put_u64(ka, 8, 4);
            return ka;
        },
        4, 16);
    auto res = sd::discover_jit("scale", dir.path() / "src");
    auto project = generate_jit(jc.capture, res, dir.path() / "project", jc.name_map);
    const auto& jm = *project.jit;
    CHECK_FALSE(jm.config.has_value());
    CHECK_FALSE(jm.autotuner_bypassed);
    CHECK(jm.constexprs == std::map<std::string, std::int64_t>{{"FACTOR", 3}});
    CHECK(jm.module == fs::path("src/scale.kpy"));
    CHECK(fs::exists(dir.path() / "project/src/scale.kpy"));
    CHECK(JitReplayManifest::from_json(jm.to_json()).to_json() == jm.to_json());

    TempDir empty;
    try {
        generate_jit(jc.capture, res, dir.path() / "other", empty.path() / "name_map.json");
        FAIL("expected GenerateError");
    } catch (const GenerateError& e) {
        CHECK(std::string(e.what()).find(jc.compiled.sha256) != std::string::npos);
    }
}

TEST_CASE("argument reconstruction decodes scalars by type") {
    std::vector<kc::KernargSlot> layout = {{"p", 0, 8, kc::ValueKind::GlobalBuffer, "*f32"},
                                           {"s", 8, 4, kc::ValueKind::ByValue, "f32"},
                                           {"n", 16, 8, kc::ValueKind::ByValue, "i64"},
                                           {"h", 24, 2, kc::ValueKind::ByValue, "f16"}};
    std::vector<kc::ScriptParam> sig = {{"p", kc::ParamKind::Pointer, "*f32"},
                                        {"s", kc::ParamKind::Scalar, "f32"},
                                        {"n", kc::ParamKind::Scalar, "i64"},
                                        {"h", kc::ParamKind::Scalar, "f16"},
                                        {"B", kc::ParamKind::Constexpr, "constexpr"}};
    Bytes ka(32);
    store_le(ka.data(), 0x7f8a00001000, 8);
    store_le(ka.data() + 8, std::bit_cast<std::uint32_t>(2.5f), 4);
    store_le(ka.data() + 16, static_cast<std::uint64_t>(-7), 8);
    store_le(ka.data() + 24, 0x3c00, 2);
    auto args = reconstruct_arguments(ka, layout, sig);
    REQUIRE(args.size() == 4);
    CHECK(args[0].value == "0x7f8a00001000");
    CHECK(args[1].value == 2.5);
    CHECK(args[2].value == -7);
    CHECK(args[3].value == 1.0);
    CHECK_THROWS_AS(reconstruct_arguments(Bytes(8), layout, sig), GenerateError);
}

}
