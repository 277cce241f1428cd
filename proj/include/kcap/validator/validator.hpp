#pragma once

#include "kcap/common/bytes.hpp"
#include "kcap/replayer/replayer.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace kcap::val {

namespace fs = std::filesystem;

inline constexpr double kDefaultAtol = 1e-6;
inline constexpr double kDefaultRtol = 1e-5;

struct RegionDiff {
    std::string file;
    std::uint64_t differing_bytes = 0;
    std::uint64_t total_bytes = 0;
    double percent = 0.0;
    /// Set when the region exists on one side only.
    std::string missing_in;
};

struct DiffReport {
    std::vector<RegionDiff> regions;
    bool pass = false;
};

/// Byte comparison of two dump directories. A region file present on only
/// one side fails the report.
DiffReport compare_byte_exact(const fs::path& baseline_dir, const fs::path& variant_dir);

// Typed-array file: one JSON header line {"dtype": ..., "count": N}, then
// N little-endian elements.
struct TypedArray {
    std::string dtype;
    Bytes payload;

    std::size_t count() const;
    double at(std::size_t i) const;
};

std::size_t dtype_width(std::string_view dtype);
void save_typed_array(const fs::path& path, const TypedArray& array);
TypedArray load_typed_array(const fs::path& path);

struct ToleranceReport {
    double max_abs_error = 0.0;
    std::uint64_t mismatch_count = 0;
    std::uint64_t nan_count_expected = 0;
    std::uint64_t nan_count_actual = 0;
    bool nan_positions_match = true;
    bool pass = false;
    std::string message;
};

/// Element i passes iff |a - e| <= atol + rtol * |e|. NaNs are counted
/// separately and fail the comparison unless both sides hold them at the
/// same positions.
ToleranceReport compare_tolerance(const TypedArray& expected, const TypedArray& actual, double atol = kDefaultAtol,
                                  double rtol = kDefaultRtol);
ToleranceReport compare_tolerance(const fs::path& expected, const fs::path& actual, double atol = kDefaultAtol,
                                  double rtol = kDefaultRtol);

struct SmokeResult {
    bool pass = false;
    std::string error;
    std::uint64_t instructions = 0;
};

SmokeResult smoke(const fs::path& capture_dir);

struct VariantReport {
    DiffReport diff;
    fs::path baseline_dir;
    fs::path variant_dir;
    /// Per pointer argument, typed by the kernel's kernarg layout.
    std::vector<std::pair<std::string, ToleranceReport>> tolerance;
};

/// Two replays (captured object, then the variant), both dumped, then
/// compared. Tolerance reports are filled when `tolerance` is given.
VariantReport validate_variant(const fs::path& capture_dir, const fs::path& variant_code_object,
                               const fs::path& work_dir,
                               std::optional<std::pair<double, double>> tolerance = std::nullopt);

}  // namespace kcap::val
