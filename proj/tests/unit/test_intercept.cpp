#include "support.hpp"

#include "kcap/common/digest.hpp"
#include "kcap/common/hex.hpp"
#include "kcap/intercept/intercept.hpp"
#include "kcap/kernelc/mangle.hpp"

#include <doctest.h>

#include <set>

using namespace kcap;
using namespace kcap::vdev;
using icpt::InterceptState;
using icpt::TargetSpec;

namespace {

const char* kTwoKernels = R"(
__kernel store_gid(out: *u64) {
    LDARG r1, out
    MUL r2, gid.x, 8
    ADD r1, r1, r2
    ST.u64 [r1], gid.x
}
__kernel add_one(buf: *u64) {
    LDARG r1, buf
    MUL r2, gid.x, 8
    ADD r1, r1, r2
    LD.u64 r3, [r1]
    ADD r3, r3, 1
    ST.u64 [r1], r3
}
)";

icpt::CaptureSink counting_sink(int& calls) {
    return [&calls](const icpt::CaptureContext&) { ++calls; };
}

struct Bench {
    Runtime rt;
    ExecutableId exec;
    DeviceAddress buf;

    explicit Bench(bool load = true) {
        if (load) exec = rt.api().load_code_object(test::compile_text(kTwoKernels));
    }
    void setup() { buf = rt.api().pool_allocate(64); }
    std::uint64_t run(const std::string& base, std::uint32_t grid = 4) {
        Bytes ka;
        test::put_u64(ka, 0, buf.value);
        return test::Dispatcher{rt, exec}.run(kc::mangle(base), {grid, 1, 1}, ka);
    }
};

}  // namespace

TEST_SUITE("intercept") {

TEST_CASE("install wraps the table and tracks allocations and blobs") {
    Runtime rt;
    int calls = 0;
    auto state = InterceptState::install(rt, {"nothing"}, counting_sink(calls));
    CHECK(rt.api().intercepted);
    CHECK_THROWS_AS(InterceptState::install(rt, {"again"}, counting_sink(calls)), icpt::InstallError);

    auto a = rt.api().pool_allocate(4096);
    auto v = rt.api().vmem_reserve_map(std::nullopt, 8192);
    auto regions = state->ptr_size();
    REQUIRE(regions.size() == 2);
    CHECK(regions.at(a.value).kind == AllocKind::Pool);
    CHECK(regions.at(v.value).size == 8192);
    CHECK(regions.at(v.value).kind == AllocKind::Vmem);

    rt.api().free(a);
    CHECK(state->ptr_size().size() == 1);
    rt.api().free(v);
    CHECK(state->ptr_size().empty());

    // Untracked free: forwarded, warned, maps untouched.
    auto direct = rt.pool_allocate(16);
    rt.api().free(direct);
    CHECK(state->warnings().size() == 1);
    CHECK(state->ptr_size().empty());

    const Bytes obj = test::compile_text(kTwoKernels);
    rt.api().load_code_object(obj);
    REQUIRE(state->blob_shas().size() == 1);
    CHECK(state->blob_shas()[0] == sha256_hex(obj));
    CHECK(*state->blob(sha256_hex(obj)) == obj);

    state.reset();
    CHECK_FALSE(rt.api().intercepted);
    CHECK_NOTHROW(InterceptState::install(rt, {"x"}, counting_sink(calls)));
}

TEST_CASE("kernel object queries bind handles to symbols") {
    Bench b;
    int calls = 0;
    auto state = InterceptState::install(b.rt, {"nothing"}, counting_sink(calls));
    const std::string sha = b.rt.executable(b.exec).sha256;
    const auto handle = b.rt.api().symbol_info(b.exec, kc::mangle("add_one"), SymbolQuery::KernelObject);
    auto bound = state->handle_to_symbol();
    // The executable was loaded before install, so no blob is known for it.
    REQUIRE(bound.count(handle) == 1);
    CHECK(bound.at(handle).mangled == kc::mangle("add_one"));
    CHECK(bound.at(handle).executable_sha256 == sha);
    CHECK_FALSE(state->blob(sha).has_value());
}

TEST_CASE("target matching counts occurrences") {
    Bench b(false);
    int calls = 0;
    TargetSpec spec{"add_one", 2};
    auto state = InterceptState::install(b.rt, spec, counting_sink(calls));
    b.exec = b.rt.api().load_code_object(test::compile_text(kTwoKernels));
    b.setup();
    b.run("store_gid");
    CHECK(state->match_count() == 0);
    b.run("add_one");
    CHECK(state->match_count() == 1);
    CHECK(calls == 0);
    b.run("add_one");
    CHECK(calls == 1);
    CHECK(state->captured());
    // Later matches are forwarded untouched and no longer counted.
    b.run("add_one");
    CHECK(calls == 1);
    CHECK(state->match_count() == 2);
}

TEST_CASE("the sink sees post-execution memory and the host proceeds afterwards") {
    Bench b(false);
    std::optional<Bytes> seen;
    std::uint32_t kernarg_size = 0;
    std::size_t region_count = 0;
    auto state = InterceptState::install(b.rt, {"store_gid"}, [&](const icpt::CaptureContext& ctx) {
        seen = Bytes(32);
        ctx.originals.copy_to_host(*seen, b.buf);
        kernarg_size = ctx.kernarg_segment_size;
        region_count = ctx.regions.size();
        CHECK(ctx.symbol.mangled == kc::mangle("store_gid"));
        CHECK(ctx.dispatch_index == 1);
    });
    b.exec = b.rt.api().load_code_object(test::compile_text(kTwoKernels));
    b.setup();
    b.run("store_gid");
    REQUIRE(seen);
    for (std::uint64_t i = 0; i < 4; ++i) CHECK(load_le<std::uint64_t>(seen->data() + 8 * i) == i);
    CHECK(kernarg_size == 8);
    CHECK(region_count == 2);  // the buffer and the kernarg allocation
}

TEST_CASE("sink failure still releases the host") {
    Bench b(false);
    auto state = InterceptState::install(b.rt, {"add_one"},
                                         [](const icpt::CaptureContext&) { throw std::runtime_error("disk full"); });
    b.exec = b.rt.api().load_code_object(test::compile_text(kTwoKernels));
    b.setup();
    auto& api = b.rt.api();
    KernelObject ko{api.symbol_info(b.exec, kc::mangle("add_one"), SymbolQuery::KernelObject)};
    auto ka = api.pool_allocate(8);
    Bytes arg;
    test::put_u64(arg, 0, b.buf.value);
    api.copy_to_device(ka, arg);
    auto sig = api.signal_create(1);
    api.queue_submit(api.queue_create(), {ko, {2, 1, 1}, {1, 1, 1}, ka, sig});
    CHECK(b.rt.signal_load(sig) == 0);
    REQUIRE(state->capture_error());
    CHECK(state->capture_error()->find("disk full") != std::string::npos);
}

TEST_CASE("property: a never-matching target is transparent") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        auto run = [&](bool instrument) {
            Bench b(false);
            std::unique_ptr<InterceptState> state;
            int calls = 0;
            if (instrument) state = InterceptState::install(b.rt, {"no_such_kernel"}, counting_sink(calls));
            b.exec = b.rt.api().load_code_object(test::compile_text(kTwoKernels));
            auto gen = test::rng(seed);
            std::vector<DeviceAddress> live;
            for (int step = 0; step < 12; ++step) {
                switch (gen() % 3) {
                    case 0: live.push_back(b.rt.api().pool_allocate(8 * (1 + gen() % 64))); break;
                    case 1:
                        if (!live.empty()) {
                            const std::size_t i = gen() % live.size();
                            b.rt.api().free(live[i]);
                            live.erase(live.begin() + static_cast<std::ptrdiff_t>(i));
                        }
                        break;
                    default:
                        if (!live.empty()) {
                            b.buf = live[gen() % live.size()];
                            b.run(gen() % 2 ? "add_one" : "store_gid", 1);
                        }
                }
            }
            CHECK(calls == 0);
            if (state) {
                // Tracking soundness: every live allocation went through the table.
                std::set<std::uint64_t> tracked, actual;
                for (const auto& [base, r] : state->ptr_size()) tracked.insert(base);
                for (const auto& a : b.rt.allocations())
                    if (a.kind != AllocKind::Variable) actual.insert(a.base.value);
                CHECK(tracked == actual);
            }
            std::vector<std::pair<std::string, Bytes>> snapshot;
            for (const auto& a : b.rt.allocations())
                snapshot.emplace_back(hex_digits(a.base.value), test::read_device(b.rt, a.base, a.size));
            std::vector<std::string> trace;
            for (const auto& t : b.rt.trace()) trace.push_back(t.mangled + "/" + std::to_string(t.instructions));
            return std::make_pair(snapshot, trace);
        };
        CHECK(run(false) == run(true));
    }
}

}
