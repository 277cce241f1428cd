#include "half_oracle.hpp"
#include "support.hpp"

#include "kcap/common/digest.hpp"
#include "kcap/kernelc/codeobject.hpp"
#include "kcap/kernelc/compile_db.hpp"
#include "kcap/kernelc/jit.hpp"
#include "kcap/kernelc/mangle.hpp"
#include "kcap/kernelc/namemap.hpp"
#include "kcap/kernelc/overlay.hpp"
#include "kcap/kernelc/preprocess.hpp"
#include "kcap/vdevice/half.hpp"

#include <doctest.h>

#include <algorithm>
#include <thread>

using namespace kcap;
using namespace kcap::kc;
using test::instance_command;
using test::kMmqDir;
using test::LlamaTree;

namespace {

struct JitTree {
    TempDir dir{"kcap-jit"};
    fs::path root = dir.path();
    JitTree() {
        copy_tree(test::fixtures_dir() / "jitpkg", root / "jitpkg");
        copy_tree(test::fixtures_dir() / "jitmod", root / "jitmod");
    }
    fs::path kernels() const { return root / "jitpkg/reduce/kernels.kpy"; }
};

void write(const fs::path& p, const std::string& text) {
    fs::create_directories(p.parent_path());
    write_text(p, text);
}

// Input rows for the reduction: row r starts with 2048 followed by ones.
Bytes reduction_rows(std::size_t rows, std::size_t n) {
    Bytes data(rows * n * 2);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j)
            store_le(data.data() + 2 * (r * n + j), vdev::half_from_double(j == 0 ? 2048.0 + 2.0 * r : 1.0), 2);
    return data;
}

struct ReductionRun {
    std::uint64_t instructions = 0;
    std::vector<std::uint16_t> out;
};

ReductionRun run_reduction(const JitResult& compiled, std::size_t rows, std::size_t n) {
    vdev::Runtime rt;
    auto exec = rt.load_code_object(compiled.bytes);
    const Bytes input = reduction_rows(rows, n);
    auto x = rt.pool_allocate(input.size());
    auto out = rt.pool_allocate(rows * 2);
    rt.copy_to_device(x, input);
    Bytes ka;
    test::put_u64(ka, 0, x.value);
    test::put_u64(ka, 8, out.value);
    test::put_u64(ka, 16, n);
    ReductionRun run;
    run.instructions = test::Dispatcher{rt, exec}.run(compiled.mangled, {static_cast<std::uint32_t>(rows), 1, 1}, ka);
    Bytes got = test::read_device(rt, out, rows * 2);
    for (std::size_t r = 0; r < rows; ++r) run.out.push_back(load_le<std::uint16_t>(got.data() + 2 * r));
    return run;
}

// Oracle: blocks summed in single precision, each block total rounded to
// binary16, then accumulated with one binary16 rounding per addition.
std::uint16_t reduction_oracle(const Bytes& rows, std::size_t row, std::size_t n, std::size_t block) {
    const auto& t = test::half_table();
    auto h2d = [&](std::uint16_t h) {
        const double mag = t.finite[h & 0x7fff].first;
        return (h & 0x8000) ? -mag : mag;
    };
    std::uint16_t acc = 0;
    for (std::size_t j = 0; j < n; j += block) {
        float s = 0.0f;
        for (std::size_t k = 0; k < block; ++k)
            s += static_cast<float>(h2d(load_le<std::uint16_t>(rows.data() + 2 * (row * n + j + k))));
        acc = t.round(h2d(acc) + h2d(t.round(s)));
    }
    return acc;
}

}  // namespace

TEST_SUITE("kernelc") {

TEST_CASE("mangle examples") {
    CHECK(mangle("Run") == "_k$Run");
    CHECK(demangle("_k$Run") == "Run");
    CHECK(mangle("mul_mat_vec_q", {"39"}) == "_k$mul_mat_vec_q$t$39");
    CHECK(demangle("_k$mul_mat_vec_q$t$39") == "mul_mat_vec_q<39>");
    CHECK_THROWS_AS(demangle("garbage"), MangleError);
    CHECK_THROWS_AS(mangle(""), MangleError);
    CHECK_THROWS_AS(mangle("a$b"), MangleError);
    CHECK(display_name("garbage") == "garbage");
}

TEST_CASE("property: mangle round trip") {
    auto gen = test::rng(11);
    const std::string alpha = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_";
    auto word = [&](std::size_t min_len) {
        std::string s;
        const std::size_t len = min_len + gen() % 12;
        for (std::size_t i = 0; i < len; ++i) s += alpha[gen() % alpha.size()];
        return s;
    };
    for (int i = 0; i < 500; ++i) {
        const std::string base = word(1);
        std::vector<std::string> args;
        for (std::size_t k = gen() % 4; k > 0; --k) args.push_back(word(1));
        const std::string m = mangle(base, args);
        const DemangledName d = demangle_parts(m);
        CHECK(d.base == base);
        CHECK(d.template_args == args);
        CHECK(mangle(d.base, d.template_args) == m);
    }
}

TEST_CASE("preprocess includes, defines and depth") {
    TempDir dir;
    const fs::path p = dir.path();
    write(p / "a.kh", "#pragma once\nA_LINE\n");
    write(p / "tu.ks", "#include \"a.kh\"\n#include \"a.kh\"\n#ifdef USE_HIP\nhip_only\n#else\nother\n#endif\n");
    auto r = preprocess(p / "tu.ks");
    CHECK(r.included.size() == 1);
    CHECK(r.text().find("other") != std::string::npos);
    CHECK(r.text().find("hip_only") == std::string::npos);
    auto h = preprocess(p / "tu.ks", {{"USE_HIP", ""}});
    CHECK(h.text().find("hip_only") != std::string::npos);
    CHECK(h.text().find("other") == std::string::npos);

    // chain of six nested includes below the TU
    for (int i = 1; i <= 6; ++i)
        write(p / ("d" + std::to_string(i) + ".kh"), i < 6 ? "#include \"d" + std::to_string(i + 1) + ".kh\"\n" : "leaf\n");
    write(p / "deep.ks", "#include \"d1.kh\"\n");
    CHECK_THROWS_AS(preprocess(p / "deep.ks", {}, {}, 5), SourceError);
    CHECK(preprocess(p / "deep.ks", {}, {}, 6).included.size() == 6);
    write(p / "d6.kh", "leaf\n");
    write(p / "d5.kh", "leaf\n");
    CHECK(preprocess(p / "deep.ks", {}, {}, 5).included.size() == 5);

    write(p / "missing.ks", "#include \"nope.kh\"\n");
    try {
        preprocess(p / "missing.ks");
        FAIL("expected SourceError");
    } catch (const SourceError& e) {
        CHECK(e.line() == 1);
    }
}

TEST_CASE("compile instance TU with a parameterized header") {
    LlamaTree tree;
    auto res = compile_tu(instance_command(tree.root, "q8_0"));
    CHECK(res.image.kind == ImageKind::ObjectFile);
    CHECK(res.image.symbols() == std::vector<std::string>{mangle("mul_mat_vec_q", {"39"})});
    CHECK(std::string(res.bytes.begin(), res.bytes.begin() + 7) == "KOFILE1");
    // debug manifest: the TU and every header it pulled in
    const auto& dm = res.image.debug_manifest;
    REQUIRE(dm.size() == 4);
    CHECK(dm[0] == (tree.root / kMmqDir / "template-instances/mmq-instance-q8_0.ks").string());
    CHECK(std::find(dm.begin(), dm.end(), (tree.root / kMmqDir / "mmq.kh").string()) != dm.end());
    CHECK(std::find(dm.begin(), dm.end(), (tree.root / "ggml/include/ggml-types.kh").string()) != dm.end());

    auto dev = compile_tu(instance_command(tree.root, "q8_0", {"--device-only", "--no-bundle"}));
    CHECK(dev.code_object);
    CHECK(looks_like_code_object(dev.bytes));
    CHECK(std::string(dev.bytes.begin(), dev.bytes.begin() + 5) == "KOBJ1");
}

TEST_CASE("overlay substitutes edited copies without opening the originals") {
    LlamaTree tree;
    const fs::path header = tree.root / kMmqDir / "mmq.kh";
    const fs::path local = tree.dir.path() / "repro/deps/mmq.kh";
    std::string edited = read_text(header);
    edited.replace(edited.find("MOVI r6, 0.0f"), 13, "MOVI r6, 1.0f");
    write(local, edited);
    write(tree.dir.path() / "repro/vfs.json", R"({"version": 0, "roots": [{"type": "directory", "name": ")" +
                                                header.parent_path().string() +
                                                R"(", "contents": [{"type": "file", "name": "mmq.kh", "external-contents": "deps/mmq.kh"}]}]})");
    auto base = compile_tu(instance_command(tree.root, "q4_0", {"--device-only"}));
    CompileOptions opts;
    opts.overlay = tree.dir.path() / "repro/vfs.json";
    auto over = compile_tu(instance_command(tree.root, "q4_0", {"--device-only"}), opts);
    CHECK(over.image.symbols() == base.image.symbols());
    CHECK(over.image.kernels[0].code != base.image.kernels[0].code);
    CHECK(std::find(over.opened_files.begin(), over.opened_files.end(), header) == over.opened_files.end());
    CHECK(std::find(over.opened_files.begin(), over.opened_files.end(), normalize(local)) != over.opened_files.end());
    // The flag spelling in the arguments works the same way.
    auto flagged = compile_tu(
        instance_command(tree.root, "q4_0", {"--device-only", "-ivfsoverlay", (tree.dir.path() / "repro/vfs.json").string()}));
    CHECK(flagged.bytes == over.bytes);
}

TEST_CASE("compile errors carry file and line") {
    TempDir dir;
    write(dir.path() / "bad.ks", "__kernel k(a: *f32) {\n    LDARG r1, a\n    FROB r2\n}\n");
    CompileCommand cmd{dir.path(), {"kcc", "-Wextra", "--fancy", (dir.path() / "bad.ks").string()}, dir.path() / "bad.ks"};
    try {
        compile_tu(cmd);
        FAIL("expected SourceError");
    } catch (const SourceError& e) {
        CHECK(e.line() == 3);
        CHECK(e.file() == (dir.path() / "bad.ks").string());
    }
    write(dir.path() / "ok.ks", "__kernel k() {\n}\n");
    CompileCommand ok{dir.path(), {"kcc", "--fancy", "ok.ks"}, dir.path() / "ok.ks"};
    auto res = compile_tu(ok);
    CHECK(res.warnings.size() == 1);
}

TEST_CASE("kernarg layout") {
    // Hand layout: each slot starts on an 8-byte boundary.
    const Bytes obj = test::compile_text("__kernel k(out: *f32, in: *f32, n: i64, alpha: f32) {\n}\n");
    auto slots = parse_kernarg_metadata(obj, mangle("k"));
    REQUIRE(slots.size() == 4);
    const std::uint32_t offsets[] = {0, 8, 16, 24};
    const std::uint32_t sizes[] = {8, 8, 8, 4};
    const ValueKind kinds[] = {ValueKind::GlobalBuffer, ValueKind::GlobalBuffer, ValueKind::ByValue, ValueKind::ByValue};
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(slots[i].offset == offsets[i]);
        CHECK(slots[i].size == sizes[i]);
        CHECK(slots[i].value_kind == kinds[i]);
    }
    CHECK(slots[3].type == "f32");
    CHECK(kernarg_segment_size(slots) == 32);

    const Bytes empty = test::compile_text("__kernel z() {\n}\n");
    CHECK(parse_kernarg_metadata(empty, mangle("z")).empty());
    CHECK(kernarg_segment_size({}) == 0);
    CHECK_THROWS_AS(parse_kernarg_metadata(empty, mangle("nope")), FormatError);
}

TEST_CASE("property: kernarg slots are aligned and increasing") {
    auto gen = test::rng(5);
    const char* types[] = {"u8", "u16", "u32", "u64", "f16", "f32", "i64", "*f16", "*f32", "*u8"};
    for (int i = 0; i < 300; ++i) {
        std::vector<TypedParam> params;
        for (std::size_t k = gen() % 9; k > 0; --k) params.emplace_back("p" + std::to_string(params.size()), types[gen() % 10]);
        auto slots = layout_kernargs(params);
        for (std::size_t s = 0; s < slots.size(); ++s) {
            CHECK(slots[s].offset % 8 == 0);
            if (s) CHECK(slots[s].offset > slots[s - 1].offset);
            CHECK((slots[s].size == 1 || slots[s].size == 2 || slots[s].size == 4 || slots[s].size == 8));
        }
        const std::uint32_t expect = slots.empty() ? 0 : (slots.back().offset + slots.back().size + 7) / 8 * 8;
        CHECK(kernarg_segment_size(slots) == expect);
    }
}

TEST_CASE("link") {
    auto a = parse_image(test::compile_text("__kernel a() {\n}\n"));
    auto b = parse_image(test::compile_text("__var v u8 3 = 1\n__kernel b(x: i64) {\n}\n"));
    auto one = parse_image(link({a}));
    CHECK(one.symbols() == a.symbols());
    auto both = parse_image(link({a, b}));
    auto syms = both.symbols();
    std::sort(syms.begin(), syms.end());
    CHECK(syms == std::vector<std::string>{"_k$a", "_k$b", "v"});
    CHECK_THROWS_AS(link({a, a}), LinkError);
    CHECK(link({a, b}) == link({a, b}));
}

TEST_CASE("property: serialization is stable") {
    auto gen = test::rng(21);
    for (int i = 0; i < 200; ++i) {
        ObjectImage img;
        img.kind = gen() % 2 ? ImageKind::CodeObject : ImageKind::ObjectFile;
        for (std::size_t k = gen() % 3; k > 0; --k) img.meta["key" + std::to_string(k)] = std::to_string(gen() % 1000);
        for (std::size_t k = gen() % 3; k > 0; --k) img.debug_manifest.push_back("/src/f" + std::to_string(gen() % 50) + ".kh");
        for (std::size_t k = gen() % 3; k > 0; --k) {
            VariableImage v{"var" + std::to_string(img.variables.size()), 1 + gen() % 64, {}};
            for (std::size_t b = gen() % (v.size + 1); b > 0; --b) v.init.push_back(static_cast<std::uint8_t>(gen()));
            img.variables.push_back(v);
        }
        for (std::size_t k = gen() % 3; k > 0; --k) {
            KernelImage ker;
            ker.mangled = mangle("k" + std::to_string(img.kernels.size()));
            std::vector<TypedParam> params;
            for (std::size_t p = gen() % 4; p > 0; --p) params.emplace_back("a" + std::to_string(params.size()), "i64");
            ker.args = layout_kernargs(params);
            ker.code = vdev::encode(std::vector<vdev::Instruction>(gen() % 5));
            img.kernels.push_back(ker);
        }
        const Bytes once = serialize(img);
        const Bytes twice = serialize(parse_image(once));
        CHECK(once == twice);
        CHECK(sha256_hex(once) == sha256_hex(twice));
        if (once.size() > 8) CHECK_THROWS(parse_image(Bytes(once.begin(), once.end() - 4)));
    }
}

TEST_CASE("compile database") {
    TempDir dir;
    write(dir.path() / "compile_commands.json",
          R"([{"directory": ")" + dir.path().string() +
              R"(", "command": "kcc -DFOO=1 -I inc \"-DNAME=a b\" -c k.ks -o out/k.o", "file": "k.ks"}])");
    auto db = load_compile_db(dir.path() / "compile_commands.json");
    REQUIRE(db.size() == 1);
    CHECK(db[0].arguments == std::vector<std::string>{"kcc", "-DFOO=1", "-I", "inc", "-DNAME=a b", "-c", "k.ks", "-o", "out/k.o"});
    CHECK(db[0].absolute_file() == dir.path() / "k.ks");
    auto args = parse_driver_args(db[0]);
    CHECK(args.defines.at("FOO") == "1");
    CHECK(args.defines.at("NAME") == "a b");
    REQUIRE(args.include_dirs.size() == 1);
    CHECK(args.include_dirs[0] == dir.path() / "inc");
    CHECK(*args.output == dir.path() / "out/k.o");
    save_compile_db(dir.path() / "copy.json", db);
    auto again = load_compile_db(dir.path() / "copy.json");
    CHECK(again[0].arguments == db[0].arguments);
}

TEST_CASE("script parsing and imports") {
    JitTree tree;
    auto mod = parse_script(tree.kernels());
    const ScriptKernel* k = mod.find("row_sum");
    REQUIRE(k);
    CHECK(k->jit);
    CHECK(k->autotuned);
    REQUIRE(k->configs.size() == 2);
    CHECK(k->configs[1].params.at("BLOCK") == 64);
    CHECK(k->configs[1].num_warps == 4);
    CHECK(k->configs[1].num_stages == 2);
    CHECK(k->key == std::vector<std::string>{"n"});
    CHECK(k->constexpr_names() == std::vector<std::string>{"BLOCK"});
    REQUIRE(mod.imports.size() == 1);
    CHECK(*resolve_import(mod.path, mod.imports[0]) == normalize(tree.root / "jitpkg/reduce/common.kpy"));
    CHECK(*package_root(tree.kernels()) == normalize(tree.root / "jitpkg/reduce"));
    CHECK_FALSE(package_root(tree.root / "jitmod/scale.kpy").has_value());
    CHECK(module_constants(mod).at("ELEM_BYTES") == 2);
    ScriptImport abs{"reduce.common", {"ELEM_BYTES"}, 1};
    CHECK(*resolve_import(mod.path, abs) == normalize(tree.root / "jitpkg/reduce/common.kpy"));

    CHECK_THROWS_AS(parse_script_text("@jit\nx = 1\n", "m.kpy"), SourceError);
    CHECK_THROWS_AS(parse_script_text("@autotune(configs=[Config(BLOCK=0)])\n@jit\ndef f(B: constexpr):\n  HALT\n", "m.kpy"),
                    SourceError);
}

TEST_CASE("jit compile: constexpr substitution and name map records") {
    JitTree tree;
    auto mod = parse_script(tree.kernels());
    const ScriptKernel& k = *mod.find("row_sum");
    const fs::path nm = tree.root / "cap/name_map.json";
    JitRequest req;
    req.name_map = nm;
    req.config = AutotuneConfig{{{"BLOCK", 32}}, 1, 1};
    auto r32 = jit_compile(mod, k, req);
    req.config = AutotuneConfig{{{"BLOCK", 64}}, 4, 2};
    req.tensor_meta = {TensorMeta{"x", "f16", {4, 64}, {64, 1}}};
    auto r64 = jit_compile(mod, k, req);
    CHECK(r32.sha256 != r64.sha256);
    auto again = jit_compile(mod, k, req);
    CHECK(again.sha256 == r64.sha256);
    auto map = load_name_map(nm);
    CHECK(map.size() == 2);
    const NameMapRecord& rec = map.at(r64.sha256);
    CHECK(rec.kernel_name == "row_sum");
    CHECK(rec.constexprs.at("BLOCK") == 64);
    REQUIRE(rec.config.has_value());
    CHECK(*rec.config == AutotuneConfig{{{"BLOCK", 64}}, 4, 2});
    CHECK(rec.supplied == std::vector<std::string>{"BLOCK", "num_stages", "num_warps"});
    REQUIRE(rec.signature.size() == 4);
    CHECK(rec.signature[3].kind == ParamKind::Constexpr);
    CHECK(rec.tensor_meta == req.tensor_meta);
    CHECK(parse_kernarg_metadata(r64.bytes, r64.mangled).size() == 3);

    JitRequest unbound;
    CHECK_THROWS_AS(jit_compile(mod, k, unbound), JitError);
    auto bad = parse_script_text("@jit\ndef f(x: *f32):\n    MOVI r1, UNDECLARED\n", tree.root / "bad.kpy");
    CHECK_THROWS_AS(jit_compile(bad, bad.kernels[0], {}), SourceError);
}

TEST_CASE("name map updates from concurrent writers keep every record") {
    TempDir dir;
    const fs::path nm = dir.path() / "name_map.json";
    std::vector<std::thread> threads;
    for (int t = 0; t < 4; ++t)
        threads.emplace_back([&, t] {
            for (int i = 0; i < 10; ++i) {
                NameMapRecord r;
                r.kernel_name = "k" + std::to_string(t);
                update_name_map(nm, "sha" + std::to_string(t * 100 + i), r);
            }
        });
    for (auto& th : threads) th.join();
    CHECK(load_name_map(nm).size() == 40);
}

TEST_CASE("autotune on the binary16 reduction") {
    JitTree tree;
    auto mod = parse_script(tree.kernels());
    const ScriptKernel& k = *mod.find("row_sum");
    const std::size_t rows = 4, n = 64;
    Benchmarker bench = [&](const AutotuneConfig&, const JitResult& r) { return run_reduction(r, rows, n).instructions; };
    auto outcome = autotune(mod, k, k.configs, bench);
    CHECK(outcome.index == 1);
    CHECK(outcome.winner.params.at("BLOCK") == 64);
    // Cost model by hand: 14 per row plus (n / B) * (8 + 7B).
    CHECK(*outcome.costs[0] == rows * (14 + n * 15));
    CHECK(*outcome.costs[1] == rows * (14 + 1 * (8 + 7 * 64)));

    const Bytes input = reduction_rows(rows, n);
    for (std::size_t cfg = 0; cfg < 2; ++cfg) {
        JitRequest req;
        req.config = k.configs[cfg];
        auto run = run_reduction(jit_compile(mod, k, req), rows, n);
        const std::size_t block = static_cast<std::size_t>(k.configs[cfg].params.at("BLOCK"));
        for (std::size_t r = 0; r < rows; ++r) CHECK(run.out[r] == reduction_oracle(input, r, n, block));
    }
    // Row 0 by hand: BLOCK=1 absorbs every +1 into 2048; BLOCK=64 rounds 2111 to 2112.
    JitRequest b1;
    b1.config = k.configs[0];
    JitRequest b64;
    b64.config = k.configs[1];
    CHECK(vdev::half_to_double(run_reduction(jit_compile(mod, k, b1), 1, n).out[0]) == 2048.0);
    CHECK(vdev::half_to_double(run_reduction(jit_compile(mod, k, b64), 1, n).out[0]) == 2112.0);

    auto single = autotune(mod, k, {k.configs[0]}, bench);
    CHECK(single.index == 0);
    Benchmarker flat = [](const AutotuneConfig&, const JitResult&) { return std::uint64_t{7}; };
    CHECK(autotune(mod, k, k.configs, flat).index == 0);
    Benchmarker failing = [](const AutotuneConfig&, const JitResult&) -> std::uint64_t { throw std::runtime_error("x"); };
    CHECK_THROWS_AS(autotune(mod, k, k.configs, failing), JitError);
    std::vector<AutotuneConfig> with_bad = {AutotuneConfig{{{"NOPE", 1}}, 1, 1}, k.configs[1]};
    CHECK(autotune(mod, k, with_bad, bench).index == 1);
}

TEST_CASE("property: autotune selection is invariant under positive scaling") {
    auto gen = test::rng(17);
    for (int i = 0; i < 500; ++i) {
        std::vector<std::optional<std::uint64_t>> costs;
        for (std::size_t c = 1 + gen() % 6; c > 0; --c) {
            if (gen() % 5 == 0)
                costs.push_back(std::nullopt);
            else
                costs.push_back(1 + gen() % 50);
        }
        if (std::none_of(costs.begin(), costs.end(), [](const auto& c) { return c.has_value(); })) costs[0] = 3;
        const std::uint64_t scale = 1 + gen() % 1000;
        auto scaled = costs;
        for (auto& c : scaled)
            if (c) *c *= scale;
        CHECK(select_config(costs) == select_config(scaled));
    }
}

TEST_CASE("autotune cache") {
    AutotuneCache cache;
    CHECK_FALSE(cache.get("row_sum", {64}).has_value());
    cache.put("row_sum", {64}, AutotuneConfig{{{"BLOCK", 64}}, 4, 2});
    CHECK(cache.get("row_sum", {64})->num_warps == 4);
    CHECK_FALSE(cache.get("row_sum", {32}).has_value());
}

}
