#include "kcap/replayer/replayer.hpp"

#include "kcap/common/files.hpp"
#include "kcap/common/hex.hpp"

#include <spdlog/spdlog.h>

#include <chrono>

namespace kcap::rpl {

using namespace vdev;

namespace {

struct Restorable {
    DeviceAddress address;
    Bytes data;
};

void warn(ReplayReport& report, const std::string& message) {
    spdlog::warn("replay: {}", message);
    report.warnings.push_back(message);
}

}  // namespace

std::string_view name_of(ReplayError::Kind kind) {
    switch (kind) {
        case ReplayError::Kind::Bundle: return "bundle";
        case ReplayError::Kind::AddressUnavailable: return "ExactAddressUnavailable";
        case ReplayError::Kind::CodeObject: return "code_object";
        case ReplayError::Kind::Symbol: return "symbol";
        case ReplayError::Kind::Kernarg: return "kernarg";
        case ReplayError::Kind::Dispatch: return "dispatch";
    }
    return "bundle";
}

fs::path dump_path(const fs::path& output_dir, DeviceAddress base) {
    return output_dir / fs::path(cap::region_data_file(base)).filename();
}

ReplayReport replay(const fs::path& capture_dir, const ReplayOptions& options) {
    if (options.iterations < 1) throw std::invalid_argument("iterations must be >= 1");
    ReplayReport report;

    // Stage 1: metadata.
    cap::CaptureBundle bundle;
    try {
        bundle = cap::CaptureBundle::load(capture_dir);
    } catch (const std::exception& e) {
        throw ReplayError(ReplayError::Kind::Bundle, e.what());
    }

    // Stages 2 and 3: the runtime places its aperture around the captured
    // ranges, which are released again once initialization completes.
    RuntimeOptions rt_options = RuntimeOptions::from_env();
    if (options.aperture_seed) rt_options.aperture_seed = *options.aperture_seed;
    if (options.pre_reserve)
        for (const auto& r : bundle.regions) rt_options.reserved_ranges.push_back({r.base, page_round_up(r.size)});
    std::unique_ptr<Runtime> rt;
    try {
        rt = std::make_unique<Runtime>(rt_options);
    } catch (const DeviceError& e) {
        throw ReplayError(ReplayError::Kind::AddressUnavailable, std::string("runtime init: ") + e.what());
    }

    // Stage 4: every region at its exact captured address, or nothing runs.
    for (const auto& r : bundle.regions) {
        try {
            rt->vmem_reserve_map(r.base, r.size);
        } catch (const DeviceError& e) {
            if (e.code() != DeviceErrc::ExactAddressUnavailable) throw;
            throw ReplayError(ReplayError::Kind::AddressUnavailable,
                              "ExactAddressUnavailable: cannot map captured range [" + hex_address(r.base.value) + ", " +
                                  hex_address(r.base.value + r.size) + ") at its original address");
        }
    }

    // Stage 5: memory, code object, module variables, kernarg, dispatch.
    std::vector<Restorable> inputs;
    for (const auto& r : bundle.regions) {
        if (!bundle.region_captured(r)) {
            ++report.skipped_regions;
            warn(report, "region " + hex_address(r.base.value) + " has no captured data; left zeroed");
            continue;
        }
        Bytes data = read_file(bundle.region_path(r));
        if (data.size() != r.size)
            throw ReplayError(ReplayError::Kind::Bundle, "region file " + r.data_file + " holds " +
                                                             std::to_string(data.size()) + " bytes, expected " +
                                                             std::to_string(r.size));
        inputs.push_back({r.base, std::move(data)});
        ++report.restored_regions;
    }

    Bytes code = bundle.code_object;
    if (options.code_object_override) {
        if (!fs::is_regular_file(*options.code_object_override))
            throw ReplayError(ReplayError::Kind::CodeObject,
                              "variant code object not found: " + options.code_object_override->string());
        code = read_file(*options.code_object_override);
    }
    ExecutableId exec;
    try {
        exec = rt->load_code_object(code);
    } catch (const std::exception& e) {
        throw ReplayError(ReplayError::Kind::CodeObject, std::string("cannot load code object: ") + e.what());
    }
    const Executable loaded = rt->executable(exec);
    report.code_object_sha256 = loaded.sha256;

    // Variables come from the directory of the loaded executable's SHA; a
    // variant stands in for the captured executable when it has none.
    const auto captured_vars = bundle.module_vars();
    const std::map<std::string, fs::path>* var_files = nullptr;
    if (auto it = captured_vars.find(loaded.sha256); it != captured_vars.end())
        var_files = &it->second;
    else if (auto fb = captured_vars.find(bundle.dispatch.code_object_sha256); fb != captured_vars.end())
        var_files = &fb->second;
    for (const SymbolInfo& var : loaded.variables()) {
        const fs::path* file = nullptr;
        if (var_files)
            if (auto f = var_files->find(var.name); f != var_files->end()) file = &f->second;
        if (!file) {
            warn(report, "no captured contents for module variable " + var.name + "; keeping its initializer");
            continue;
        }
        Bytes data = read_file(*file);
        if (data.size() != var.size) {
            warn(report, "module variable " + var.name + " changed size; keeping its initializer");
            continue;
        }
        inputs.push_back({var.address, std::move(data)});
        ++report.restored_variables;
    }

    const std::string& mangled = bundle.dispatch.mangled_symbol;
    KernelObject ko;
    std::uint64_t kernarg_size = 0;
    try {
        ko = KernelObject{rt->symbol_info(exec, mangled, SymbolQuery::KernelObject)};
        kernarg_size = rt->symbol_info(exec, mangled, SymbolQuery::KernargSegmentSize);
    } catch (const DeviceError&) {
        throw ReplayError(ReplayError::Kind::Symbol, "kernel symbol " + mangled + " not found in code object");
    }
    if (kernarg_size != bundle.kernarg.size())
        throw ReplayError(ReplayError::Kind::Kernarg, "kernarg segment is " + std::to_string(kernarg_size) +
                                                          " bytes but the capture holds " +
                                                          std::to_string(bundle.kernarg.size()));
    const DeviceAddress kernarg = rt->pool_allocate(std::max<std::uint64_t>(kernarg_size, 8));
    if (!bundle.kernarg.empty()) rt->copy_to_device(kernarg, bundle.kernarg);

    const auto& d = bundle.dispatch;
    const QueueId queue = rt->queue_create();
    for (std::uint32_t i = 0; i < options.iterations; ++i) {
        if (i == 0 || options.recopy)
            for (const Restorable& in : inputs) rt->copy_to_device(in.address, in.data);
        const SignalHandle sig = rt->signal_create(1);
        const std::size_t before = rt->trace().size();
        try {
            rt->queue_submit(queue, {ko, {d.grid[0], d.grid[1], d.grid[2]},
                                     {d.workgroup[0], d.workgroup[1], d.workgroup[2]}, kernarg, sig});
        } catch (const DeviceError& e) {
            throw ReplayError(ReplayError::Kind::Dispatch, std::string("dispatch failed: ") + e.what());
        }
        rt->signal_wait_eq(sig, 0, std::chrono::milliseconds(60000));
        const auto trace = rt->trace();
        report.instructions.push_back(trace.size() > before ? trace.back().instructions : 0);
    }

    // Stage 6: every captured region back to the host.
    if (options.dump_output) {
        const fs::path out = options.output_dir.value_or(capture_dir.parent_path() / "output");
        fs::remove_all(out);
        fs::create_directories(out);
        for (const auto& r : bundle.regions) {
            Bytes data(r.size);
            rt->copy_to_host(data, r.base);
            write_file(dump_path(out, r.base), data);
        }
        report.output_dir = out;
    }
    return report;
}

}  // namespace kcap::rpl
