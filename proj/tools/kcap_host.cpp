// Runs a .kw workload on a fresh simulated runtime. Capture hooks are
// installed when KERNCAP_KERNEL is set, the way a preloaded library would be.
#include "kcap/capture/capture.hpp"
#include "kcap/common/files.hpp"
#include "kcap/host/workload.hpp"
#include "kcap/intercept/intercept.hpp"

#include <spdlog/spdlog.h>

#include <cstdlib>
#include <iostream>

using namespace kcap;

int main(int argc, char** argv) {
    spdlog::set_level(spdlog::level::warn);
    if (argc != 2) {
        std::cerr << "usage: kcap-host <workload.kw>\n";
        return 64;
    }
    try {
        const auto workload = host::Workload::parse_file(argv[1]);
        vdev::Runtime rt(vdev::RuntimeOptions::from_env());
        std::unique_ptr<icpt::InterceptState> intercept;
        if (auto target = icpt::TargetSpec::from_env())
            intercept = icpt::InterceptState::install(rt, *target, cap::make_capture_sink(cap::CaptureOptions::from_env()));

        host::HostOptions opts;
        if (const char* nm = std::getenv("KERNCAP_NAME_MAP"); nm && *nm) opts.name_map = fs::path(nm);
        host::Host h(rt, opts);
        h.run(workload);

        if (const char* tf = std::getenv(host::kTraceFileEnv); tf && *tf)
            write_text(tf, host::trace_to_json(rt.trace()).dump(2));
        if (intercept && intercept->capture_error()) {
            spdlog::error("capture failed: {}", *intercept->capture_error());
            return 1;
        }
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "kcap-host: " << e.what() << "\n";
        return 1;
    }
}
