#pragma once

#include "kcap/common/bytes.hpp"
#include "kcap/common/files.hpp"
#include "kcap/capture/capture.hpp"
#include "kcap/kernelc/compile_db.hpp"
#include "kcap/kernelc/compiler.hpp"
#include "kcap/kernelc/mangle.hpp"
#include "kcap/vdevice/runtime.hpp"

#include <bit>
#include <map>
#include <random>
#include <string>

namespace kcap::test {

inline fs::path fixtures_dir() { return KCAP_TEST_FIXTURES; }

/// Compiles DSL text (written to a scratch TU) straight to a code object.
inline Bytes compile_text(const std::string& text, const std::map<std::string, std::string>& defines = {}) {
    TempDir dir("kcap-test");
    const fs::path src = dir.path() / "k.ks";
    write_text(src, text);
    kc::CompileCommand cmd;
    cmd.directory = dir.path();
    cmd.file = src;
    cmd.arguments = {"kcc"};
    for (const auto& [k, v] : defines) cmd.arguments.push_back("-D" + k + (v.empty() ? "" : "=" + v));
    cmd.arguments.push_back("--device-only");
    cmd.arguments.push_back(src.string());
    return kc::compile_tu(cmd).bytes;
}

inline const fs::path kMmqDir = "ggml/src/ggml-cuda";
inline const std::vector<std::string> kQuantTypes = {"q4_0", "q5_0", "q8_0"};

inline kc::CompileCommand instance_command(const fs::path& root, const std::string& type,
                                           std::vector<std::string> extra = {}, bool debug = true) {
    kc::CompileCommand cmd;
    cmd.directory = root;
    cmd.file = root / kMmqDir / "template-instances" / ("mmq-instance-" + type + ".ks");
    cmd.arguments = {"kcc", "-O2", "-I" + (root / "ggml/include").string()};
    if (debug) cmd.arguments.push_back("-g");
    cmd.arguments.push_back("-c");
    for (auto& e : extra) cmd.arguments.push_back(e);
    cmd.arguments.push_back("-o");
    cmd.arguments.push_back((root / "build" / ("mmq-" + type + ".o")).string());
    cmd.arguments.push_back(cmd.file.string());
    return cmd;
}

/// A scratch copy of the llama-like source tree.
struct LlamaTree {
    TempDir dir{"kcap-llama"};
    fs::path root = dir.path() / "llama";
    LlamaTree() { copy_tree(fixtures_dir() / "llama", root); }

    fs::path db_path() const { return root / "build/compile_commands.json"; }

    /// Writes the compilation database and, when `objects`, builds every entry.
    std::vector<kc::CompileCommand> build(bool debug, bool objects = true) const {
        std::vector<kc::CompileCommand> db;
        for (const auto& t : kQuantTypes) db.push_back(instance_command(root, t, {}, debug));
        fs::create_directories(root / "build");
        kc::save_compile_db(db_path(), db);
        if (objects)
            for (const auto& cmd : db) {
                auto res = kc::compile_tu(cmd);
                write_file(*res.output, res.bytes);
            }
        return db;
    }
};

inline void put_u64(Bytes& buf, std::size_t offset, std::uint64_t v) {
    if (buf.size() < offset + 8) buf.resize(offset + 8);
    store_le(buf.data() + offset, v, 8);
}

struct Dispatcher {
    vdev::Runtime& rt;
    vdev::ExecutableId exec;
    vdev::QueueId queue = rt.queue_create();

    /// Synchronous dispatch through the live API table. Returns retired instructions.
    std::uint64_t run(const std::string& mangled, vdev::Dim3 grid, const Bytes& kernarg, vdev::Dim3 wg = {1, 1, 1}) {
        auto& api = rt.api();
        vdev::KernelObject ko{api.symbol_info(exec, mangled, vdev::SymbolQuery::KernelObject)};
        const std::uint64_t size = std::max<std::uint64_t>(kernarg.size(), 8);
        vdev::DeviceAddress ka = api.pool_allocate(size);
        Bytes padded = kernarg;
        padded.resize(size);
        api.copy_to_device(ka, padded);
        vdev::SignalHandle sig = api.signal_create(1);
        const std::size_t before = rt.trace().size();
        api.queue_submit(queue, vdev::DispatchPacket{ko, grid, wg, ka, sig});
        api.signal_wait_eq(sig, 0, std::chrono::milliseconds(10000));
        api.free(ka);
        auto trace = rt.trace();
        return trace.size() > before ? trace.back().instructions : 0;
    }
};

inline Bytes read_device(vdev::Runtime& rt, vdev::DeviceAddress a, std::size_t n) {
    Bytes out(n);
    rt.copy_to_host(out, a);
    return out;
}

inline std::mt19937_64 rng(std::uint64_t seed) { return std::mt19937_64(seed); }

inline Bytes f32_bytes(const std::vector<float>& v) {
    Bytes out(v.size() * 4);
    for (std::size_t i = 0; i < v.size(); ++i) store_le(out.data() + 4 * i, std::bit_cast<std::uint32_t>(v[i]), 4);
    return out;
}

inline float f32_at(const Bytes& b, std::size_t i) { return std::bit_cast<float>(load_le<std::uint32_t>(b.data() + 4 * i)); }

/// The q8_0 matrix-vector kernel of the llama tree, captured from an
/// application that links all three instances into one code object.
struct LlamaCapture {
    static constexpr std::uint32_t kRows = 4, kCols = 8;
    static constexpr std::int64_t kQType = 39;

    LlamaTree tree;
    std::vector<kc::CompileCommand> db;
    fs::path capture = tree.dir.path() / "capture";
    std::string mangled = kc::mangle("mul_mat_vec_q", {std::to_string(kQType)});
    Bytes a, x;
    vdev::DeviceAddress y_addr;
    /// Device state right after the target dispatch, per buffer base.
    std::map<std::uint64_t, Bytes> post;

    explicit LlamaCapture(bool debug = true) {
        db = tree.build(debug);
        std::vector<kc::ObjectImage> images;
        for (const auto& cmd : db) images.push_back(kc::compile_tu(cmd).image);
        vdev::Runtime rt;
        cap::CaptureOptions opts;
        opts.output_dir = capture;
        auto state = icpt::InterceptState::install(rt, {"mul_mat_vec_q<39>"}, cap::make_capture_sink(opts));
        auto& api = rt.api();
        const auto exec = api.load_code_object(kc::link(images));
        std::vector<float> av, xv;
        for (std::uint32_t i = 0; i < kRows * kCols; ++i) av.push_back(static_cast<float>(i % 5));
        for (std::uint32_t j = 0; j < kCols; ++j) xv.push_back(static_cast<float>(j % 3 + 1));
        a = f32_bytes(av);
        x = f32_bytes(xv);
        const auto a_addr = api.pool_allocate(a.size()), x_addr = api.pool_allocate(x.size());
        y_addr = api.pool_allocate(kRows * 4);
        api.copy_to_device(a_addr, a);
        api.copy_to_device(x_addr, x);
        api.copy_to_device(y_addr, Bytes(kRows * 4));
        Bytes ka;
        put_u64(ka, 0, a_addr.value);
        put_u64(ka, 8, x_addr.value);
        put_u64(ka, 16, y_addr.value);
        put_u64(ka, 24, kCols);
        Dispatcher{rt, exec}.run(mangled, {kRows, 1, 1}, ka);
        if (state->capture_error()) throw std::runtime_error("llama capture failed: " + *state->capture_error());
        post[a_addr.value] = read_device(rt, a_addr, a.size());
        post[x_addr.value] = read_device(rt, x_addr, x.size());
        post[y_addr.value] = read_device(rt, y_addr, kRows * 4);
    }

    /// y[row] = QTYPE * sum_j a[row][j] * x[j], accumulated left to right in f32.
    float expected_y(std::uint32_t row, float qtype = static_cast<float>(kQType)) const {
        float s = 0.0f;
        for (std::uint32_t j = 0; j < kCols; ++j) s += f32_at(a, row * kCols + j) * f32_at(x, j);
        return s * qtype;
    }
};

}  // namespace kcap::test
