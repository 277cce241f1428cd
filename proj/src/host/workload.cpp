#include "kcap/host/workload.hpp"

#include "kcap/common/files.hpp"
#include "kcap/common/hex.hpp"
#include "kcap/kernelc/compile_db.hpp"
#include "kcap/kernelc/compiler.hpp"
#include "kcap/kernelc/mangle.hpp"
#include "kcap/vdevice/half.hpp"

#include <spdlog/spdlog.h>

#include <bit>
#include <random>
#include <sstream>
#include <thread>

namespace kcap::host {

using namespace vdev;
using nlohmann::json;

namespace {

std::int64_t parse_int(const std::string& s) {
    if (s.starts_with("-")) return -static_cast<std::int64_t>(parse_uint(s.substr(1)));
    return static_cast<std::int64_t>(parse_uint(s));
}

Dim3 parse_dims(const std::string& s) {
    std::vector<std::uint32_t> v;
    std::stringstream in(s);
    for (std::string part; std::getline(in, part, ',');) v.push_back(static_cast<std::uint32_t>(parse_uint(part)));
    if (v.empty() || v.size() > 3) throw WorkloadError("bad dimensions '" + s + "'");
    v.resize(3, 1);
    return {v[0], v[1], v[2]};
}

// Little-endian encoding of one scalar of the given type.
Bytes encode_scalar(const std::string& type, const std::string& text) {
    if (type == "f32") {
        Bytes b(4);
        store_le(b.data(), std::bit_cast<std::uint32_t>(std::stof(text)), 4);
        return b;
    }
    if (type == "f64") {
        Bytes b(8);
        store_le(b.data(), std::bit_cast<std::uint64_t>(std::stod(text)), 8);
        return b;
    }
    if (type == "f16") {
        Bytes b(2);
        store_le(b.data(), half_from_double(std::stod(text)), 2);
        return b;
    }
    std::size_t width = 0;
    if (type == "u8" || type == "i8") width = 1;
    else if (type == "u16" || type == "i16") width = 2;
    else if (type == "u32" || type == "i32") width = 4;
    else if (type == "u64" || type == "i64") width = 8;
    else throw WorkloadError("unknown dtype '" + type + "'");
    Bytes b(width);
    store_le(b.data(), static_cast<std::uint64_t>(parse_int(text)), width);
    return b;
}

void need(const Statement& s, std::size_t n, const char* usage) {
    if (s.words.size() < n) throw WorkloadError(std::string("usage: ") + usage);
}

}  // namespace

Workload Workload::parse_file(const fs::path& path) {
    if (!fs::is_regular_file(path)) throw WorkloadError("workload not found: " + path.string());
    return parse_text(read_text(path), fs::absolute(path));
}

Workload Workload::parse_text(const std::string& text, const fs::path& path) {
    Workload w;
    w.path = path;
    std::stringstream in(text);
    unsigned line = 0;
    for (std::string raw; std::getline(in, raw);) {
        ++line;
        if (auto hash = raw.find('#'); hash != std::string::npos) raw.resize(hash);
        Statement s{line, {}};
        std::stringstream words(raw);
        for (std::string word; words >> word;) s.words.push_back(word);
        if (!s.words.empty()) w.statements.push_back(std::move(s));
    }
    return w;
}

Host::Host(Runtime& rt, HostOptions options) : rt_(rt), options_(std::move(options)) {}

void Host::run(const Workload& workload) {
    for (const Statement& s : workload.statements) {
        try {
            execute(s, workload.base_dir());
        } catch (const std::exception& e) {
            throw WorkloadError(workload.path.filename().string() + ":" + std::to_string(s.line) + ": " + e.what());
        }
    }
}

std::optional<DeviceAddress> Host::buffer(const std::string& name) const {
    auto it = buffers_.find(name);
    if (it == buffers_.end()) return std::nullopt;
    return it->second.address;
}

const Host::Buffer& Host::buf(const std::string& name) const {
    auto it = buffers_.find(name);
    if (it == buffers_.end()) throw WorkloadError("unknown buffer '" + name + "'");
    return it->second;
}

const Host::Loaded& Host::executable(const std::string& name) const {
    auto it = execs_.find(name);
    if (it == execs_.end()) throw WorkloadError("unknown executable '" + name + "'");
    return it->second;
}

Host::Loaded Host::load(const Bytes& code) { return {rt_.api().load_code_object(code), code}; }

std::uint64_t Host::pointer_value(const std::string& token) const {
    if (!token.starts_with("@")) return parse_uint(token);
    const auto plus = token.find('+');
    const std::string name = token.substr(1, plus == std::string::npos ? std::string::npos : plus - 1);
    const std::uint64_t off = plus == std::string::npos ? 0 : parse_uint(token.substr(plus + 1));
    return buf(name).address.value + off;
}

Bytes Host::encode_kernarg(const std::vector<kc::KernargSlot>& layout, const std::vector<std::string>& args) const {
    if (args.size() != layout.size())
        throw WorkloadError("kernel takes " + std::to_string(layout.size()) + " arguments, got " +
                            std::to_string(args.size()));
    Bytes ka(kc::kernarg_segment_size(layout));
    for (std::size_t i = 0; i < layout.size(); ++i) {
        const auto& slot = layout[i];
        Bytes v = slot.value_kind == kc::ValueKind::GlobalBuffer ? encode_scalar("u64", std::to_string(pointer_value(args[i])))
                                                                 : encode_scalar(slot.type, args[i]);
        v.resize(slot.size);
        std::copy(v.begin(), v.end(), ka.begin() + slot.offset);
    }
    return ka;
}

void Host::dispatch(ApiTable& api, const Bytes& code, const std::string& mangled, const Launch& launch) {
    const Bytes ka = encode_kernarg(kc::parse_kernarg_metadata(code, mangled), launch.args);
    // Finds the kernel among every executable loaded through this table.
    std::optional<KernelObject> ko;
    for (const auto& [name, loaded] : execs_)
        if (loaded.code == code) ko = KernelObject{api.symbol_info(loaded.id, mangled, SymbolQuery::KernelObject)};
    for (const auto& [sha, loaded] : jit_loaded_)
        if (!ko && loaded.code == code) ko = KernelObject{api.symbol_info(loaded.id, mangled, SymbolQuery::KernelObject)};
    if (!ko) throw WorkloadError("kernel " + kc::display_name(mangled) + " is not loaded");
    if (!queue_) queue_ = api.queue_create();
    const DeviceAddress kernarg = api.pool_allocate(std::max<std::uint64_t>(ka.size(), 8));
    if (!ka.empty()) api.copy_to_device(kernarg, ka);
    const SignalHandle sig = api.signal_create(1);
    api.queue_submit(*queue_, DispatchPacket{*ko, launch.grid, launch.workgroup, kernarg, sig});
    if (api.signal_wait_eq(sig, 0, std::chrono::milliseconds(60000)) != 0)
        throw WorkloadError("dispatch of " + kc::display_name(mangled) + " did not complete");
    api.free(kernarg);
}

Host::Launch Host::parse_launch(const std::vector<std::string>& words, std::size_t first, bool allow_constexprs) {
    Launch l;
    bool have_grid = false;
    for (std::size_t i = first; i < words.size(); ++i) {
        const std::string& w = words[i];
        const auto eq = w.find('=');
        if (w.starts_with("grid=")) {
            l.grid = parse_dims(w.substr(5));
            have_grid = true;
        } else if (w.starts_with("wg=")) {
            l.workgroup = parse_dims(w.substr(3));
        } else if (allow_constexprs && eq != std::string::npos && !w.starts_with("@")) {
            l.constexprs[w.substr(0, eq)] = parse_int(w.substr(eq + 1));
        } else {
            l.args.push_back(w);
        }
    }
    if (!have_grid) throw WorkloadError("missing grid=");
    return l;
}

void Host::launch_jit(const fs::path& module_file, const std::string& kernel_name, const Launch& launch) {
    auto mit = modules_.find(module_file);
    if (mit == modules_.end()) mit = modules_.emplace(module_file, kc::parse_script(module_file)).first;
    const kc::ScriptModule& module = mit->second;
    const kc::ScriptKernel* kernel = module.find(kernel_name);
    if (!kernel) throw WorkloadError("no scripted kernel '" + kernel_name + "' in " + module_file.string());

    std::vector<std::string> runtime_params;
    for (const auto& p : kernel->params)
        if (p.kind != kc::ParamKind::Constexpr) runtime_params.push_back(p.name);
    if (launch.args.size() != runtime_params.size())
        throw WorkloadError(kernel_name + " takes " + std::to_string(runtime_params.size()) + " arguments, got " +
                            std::to_string(launch.args.size()));

    kc::JitRequest request;
    request.constexprs = launch.constexprs;
    bool missing = false;
    for (const auto& name : kernel->constexpr_names()) missing |= !launch.constexprs.contains(name);
    if (kernel->autotuned && missing) {
        std::vector<std::int64_t> key;
        for (const auto& k : kernel->key) {
            auto pos = std::find(runtime_params.begin(), runtime_params.end(), k);
            if (pos == runtime_params.end()) throw WorkloadError("autotune key '" + k + "' is not an argument");
            key.push_back(parse_int(launch.args[static_cast<std::size_t>(pos - runtime_params.begin())]));
        }
        std::optional<kc::AutotuneConfig> config = tune_cache_.get(kernel_name, key);
        if (!config) {
            // Benchmarks run on a private copy of device memory, outside any interposer.
            kc::Benchmarker bench = [&](const kc::AutotuneConfig&, const kc::JitResult& compiled) {
                auto clone = rt_.clone_memory();
                Host scratch(*clone);
                scratch.buffers_ = buffers_;
                scratch.jit_loaded_[compiled.sha256] = scratch.load(compiled.bytes);
                scratch.dispatch(clone->api(), compiled.bytes, compiled.mangled, launch);
                return clone->trace().back().instructions;
            };
            kc::JitRequest base;
            base.constexprs = launch.constexprs;
            auto outcome = kc::autotune(module, *kernel, kernel->configs, bench, base);
            last_costs_ = outcome.costs;
            config = outcome.winner;
            tune_cache_.put(kernel_name, key, *config);
            spdlog::info("host: autotuned {} -> config {}", kernel_name, outcome.index);
        }
        request.config = config;
    }
    request.name_map = options_.name_map;
    const kc::JitResult compiled = kc::jit_compile(module, *kernel, request);
    auto it = jit_loaded_.find(compiled.sha256);
    if (it == jit_loaded_.end()) it = jit_loaded_.emplace(compiled.sha256, load(compiled.bytes)).first;
    dispatch(rt_.api(), compiled.bytes, compiled.mangled, launch);
}

void Host::execute(const Statement& s, const fs::path& base_dir) {
    auto& api = rt_.api();
    const std::string& cmd = s.words[0];
    auto path = [&](const std::string& p) { return kc::normalize(base_dir / p); };

    if (cmd == "build") {
        need(s, 3, "build <exec> <compile_commands.json>");
        std::vector<kc::ObjectImage> images;
        for (const auto& entry : kc::load_compile_db(path(s.words[2]))) {
            auto res = kc::compile_tu(entry);
            if (res.output) write_file_mkdirs(*res.output, res.bytes);
            images.push_back(res.image);
        }
        execs_[s.words[1]] = load(kc::link(images));
    } else if (cmd == "load") {
        need(s, 3, "load <exec> <file>");
        const fs::path file = path(s.words[2]);
        Bytes code;
        if (file.extension() == ".ks") {
            kc::CompileCommand c{file.parent_path(), {"kcc", "--device-only", file.string()}, file};
            code = kc::compile_tu(c).bytes;
        } else {
            code = read_file(file);
        }
        execs_[s.words[1]] = load(code);
    } else if (cmd == "alloc") {
        need(s, 3, "alloc <buf> <bytes> [pool|vmem]");
        const std::uint64_t size = parse_uint(s.words[2]);
        const std::string kind = s.words.size() > 3 ? s.words[3] : "pool";
        DeviceAddress a;
        if (kind == "pool") a = api.pool_allocate(size);
        else if (kind == "vmem") a = api.vmem_reserve_map(std::nullopt, size);
        else throw WorkloadError("unknown allocation kind '" + kind + "'");
        buffers_[s.words[1]] = {a, size};
    } else if (cmd == "fill" || cmd == "fill_at") {
        const bool at = cmd == "fill_at";
        need(s, at ? 5 : 4, at ? "fill_at <buf> <offset> <dtype> <v>..." : "fill <buf> <dtype> <v>...");
        const Buffer& b = buf(s.words[1]);
        const std::uint64_t off = at ? parse_uint(s.words[2]) : 0;
        const std::string& dtype = s.words[at ? 3 : 2];
        Bytes data;
        for (std::size_t i = at ? 4 : 3; i < s.words.size(); ++i) {
            Bytes v = encode_scalar(dtype, s.words[i]);
            data.insert(data.end(), v.begin(), v.end());
        }
        if (off + data.size() > b.size) throw WorkloadError("fill overruns buffer '" + s.words[1] + "'");
        api.copy_to_device(DeviceAddress{b.address.value + off}, data);
    } else if (cmd == "random") {
        need(s, 3, "random <buf> <seed>");
        const Buffer& b = buf(s.words[1]);
        std::mt19937_64 gen(parse_uint(s.words[2]));
        Bytes data(b.size);
        for (auto& v : data) v = static_cast<std::uint8_t>(gen());
        api.copy_to_device(b.address, data);
    } else if (cmd == "ptr") {
        need(s, 4, "ptr <buf> <offset> <target> [<target offset>]");
        const Buffer& b = buf(s.words[1]);
        const std::uint64_t off = parse_uint(s.words[2]);
        const std::uint64_t target = buf(s.words[3]).address.value + (s.words.size() > 4 ? parse_uint(s.words[4]) : 0);
        if (off + 8 > b.size) throw WorkloadError("ptr overruns buffer '" + s.words[1] + "'");
        api.copy_to_device(DeviceAddress{b.address.value + off}, encode_scalar("u64", std::to_string(target)));
    } else if (cmd == "var") {
        need(s, 5, "var <exec> <symbol> <dtype> <v>...");
        const Loaded& e = executable(s.words[1]);
        const DeviceAddress a{api.symbol_info(e.id, s.words[2], SymbolQuery::VariableAddress)};
        const std::uint64_t size = api.symbol_info(e.id, s.words[2], SymbolQuery::VariableSize);
        Bytes data;
        for (std::size_t i = 4; i < s.words.size(); ++i) {
            Bytes v = encode_scalar(s.words[3], s.words[i]);
            data.insert(data.end(), v.begin(), v.end());
        }
        if (data.size() > size) throw WorkloadError("variable " + s.words[2] + " holds only " + std::to_string(size) + " bytes");
        api.copy_to_device(a, data);
    } else if (cmd == "dispatch") {
        need(s, 4, "dispatch <exec> <kernel> grid=... [wg=...] <arg>...");
        const Loaded& e = executable(s.words[1]);
        std::string mangled = s.words[2];
        if (!mangled.starts_with("_k$")) {
            std::optional<std::string> found;
            for (const auto& [name, sym] : rt_.executable(e.id).symbols)
                if (sym.kind == SymbolKind::Kernel && kc::display_name(name) == s.words[2]) found = name;
            if (!found) throw WorkloadError("no kernel '" + s.words[2] + "' in executable '" + s.words[1] + "'");
            mangled = *found;
        }
        dispatch(api, e.code, mangled, parse_launch(s.words, 3, false));
    } else if (cmd == "launch") {
        need(s, 4, "launch <module.kpy> <kernel> grid=... [wg=...] [NAME=value]... <arg>...");
        launch_jit(path(s.words[1]), s.words[2], parse_launch(s.words, 3, true));
    } else if (cmd == "free") {
        need(s, 2, "free <buf>");
        api.free(buf(s.words[1]).address);
        buffers_.erase(s.words[1]);
    } else if (cmd == "sleep") {
        need(s, 2, "sleep <ms>");
        std::this_thread::sleep_for(std::chrono::milliseconds(parse_uint(s.words[1])));
    } else if (cmd == "dump") {
        need(s, 2, "dump <dir>");
        const fs::path dir = path(s.words[1]);
        fs::create_directories(dir);
        for (const auto& [name, b] : buffers_) {
            Bytes data(b.size);
            api.copy_to_host(data, b.address);
            write_file(dir / ("region_" + hex_digits(b.address.value) + ".bin"), data);
        }
    } else {
        throw WorkloadError("unknown statement '" + cmd + "'");
    }
}

json trace_to_json(const std::vector<DispatchTraceEntry>& trace) {
    json out = json::array();
    for (const auto& t : trace)
        out.push_back({{"kernel", t.kernel_name}, {"mangled", t.mangled}, {"instructions", t.instructions}});
    return out;
}

std::vector<DispatchTraceEntry> trace_from_json(const json& j) {
    std::vector<DispatchTraceEntry> out;
    for (const json& t : j)
        out.push_back({t.at("mangled").get<std::string>(), t.at("kernel").get<std::string>(),
                       t.at("instructions").get<std::uint64_t>(), {}});
    return out;
}

}  // namespace kcap::host
