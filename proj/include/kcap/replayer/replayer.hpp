#pragma once

#include "kcap/capture/bundle.hpp"
#include "kcap/vdevice/runtime.hpp"

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace kcap::rpl {

namespace fs = std::filesystem;

struct ReplayOptions {
    /// Variant code object to run instead of the captured one.
    std::optional<fs::path> code_object_override;
    std::uint32_t iterations = 1;
    /// Restore captured inputs before every iteration after the first.
    bool recopy = true;
    bool dump_output = false;
    /// Where dumps go; defaults to "output" beside the capture directory.
    std::optional<fs::path> output_dir;
    /// Reserve captured ranges before the runtime places its aperture.
    /// Only tests turn this off.
    bool pre_reserve = true;
    /// Falls back to KCAP_APERTURE_SEED, then 0.
    std::optional<std::uint64_t> aperture_seed;
};

struct ReplayReport {
    /// Retired instructions per iteration.
    std::vector<std::uint64_t> instructions;
    std::size_t restored_regions = 0;
    std::size_t skipped_regions = 0;
    std::size_t restored_variables = 0;
    std::string code_object_sha256;
    std::optional<fs::path> output_dir;
    std::vector<std::string> warnings;
};

class ReplayError : public std::runtime_error {
public:
    enum class Kind { Bundle, AddressUnavailable, CodeObject, Symbol, Kernarg, Dispatch };
    ReplayError(Kind kind, const std::string& message) : std::runtime_error(message), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

std::string_view name_of(ReplayError::Kind kind);

/// Output file for a region: "<dir>/region_<hex>.bin".
fs::path dump_path(const fs::path& output_dir, vdev::DeviceAddress base);

ReplayReport replay(const fs::path& capture_dir, const ReplayOptions& options = {});

}  // namespace kcap::rpl
