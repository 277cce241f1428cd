#include "kcap/validator/validator.hpp"

#include "kcap/capture/bundle.hpp"
#include "kcap/common/files.hpp"
#include "kcap/kernelc/compiler.hpp"
#include "kcap/vdevice/half.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <set>
#include <sstream>

namespace kcap::val {

using nlohmann::json;

namespace {

std::map<std::string, fs::path> region_files(const fs::path& dir) {
    std::map<std::string, fs::path> out;
    if (!fs::is_directory(dir)) return out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".bin") out[e.path().filename().string()] = e.path();
    return out;
}

}  // namespace

DiffReport compare_byte_exact(const fs::path& baseline_dir, const fs::path& variant_dir) {
    const auto base = region_files(baseline_dir), var = region_files(variant_dir);
    std::set<std::string> names;
    for (const auto& [n, p] : base) names.insert(n);
    for (const auto& [n, p] : var) names.insert(n);
    DiffReport report;
    report.pass = true;
    for (const std::string& name : names) {
        RegionDiff d;
        d.file = name;
        auto b = base.find(name), v = var.find(name);
        if (b == base.end() || v == var.end()) {
            d.missing_in = b == base.end() ? "baseline" : "variant";
            report.pass = false;
            report.regions.push_back(d);
            continue;
        }
        const Bytes x = read_file(b->second), y = read_file(v->second);
        d.total_bytes = std::max(x.size(), y.size());
        const std::size_t common = std::min(x.size(), y.size());
        for (std::size_t i = 0; i < common; ++i) d.differing_bytes += x[i] != y[i];
        d.differing_bytes += d.total_bytes - common;
        d.percent = d.total_bytes ? 100.0 * static_cast<double>(d.differing_bytes) / static_cast<double>(d.total_bytes) : 0.0;
        if (d.differing_bytes) report.pass = false;
        report.regions.push_back(d);
    }
    return report;
}

std::size_t dtype_width(std::string_view dtype) {
    if (dtype == "u8" || dtype == "i8") return 1;
    if (dtype == "f16" || dtype == "u16" || dtype == "i16") return 2;
    if (dtype == "f32" || dtype == "u32" || dtype == "i32") return 4;
    if (dtype == "f64" || dtype == "u64" || dtype == "i64") return 8;
    throw std::invalid_argument("unknown dtype '" + std::string(dtype) + "'");
}

std::size_t TypedArray::count() const { return payload.size() / dtype_width(dtype); }

double TypedArray::at(std::size_t i) const {
    const std::size_t w = dtype_width(dtype);
    const std::uint8_t* p = payload.data() + i * w;
    if (dtype == "f16") return vdev::half_to_double(load_le<std::uint16_t>(p));
    if (dtype == "f32") return std::bit_cast<float>(load_le<std::uint32_t>(p));
    if (dtype == "f64") return std::bit_cast<double>(load_le<std::uint64_t>(p));
    const std::uint64_t raw = load_le<std::uint64_t>(p, w);
    if (dtype[0] == 'i') {
        const unsigned shift = 64 - 8 * static_cast<unsigned>(w);
        return static_cast<double>(static_cast<std::int64_t>(raw << shift) >> shift);
    }
    return static_cast<double>(raw);
}

void save_typed_array(const fs::path& path, const TypedArray& array) {
    std::string text = json{{"dtype", array.dtype}, {"count", array.count()}}.dump() + "\n";
    text.append(reinterpret_cast<const char*>(array.payload.data()), array.payload.size());
    write_text(path, text);
}

TypedArray load_typed_array(const fs::path& path) {
    const std::string text = read_text(path);
    const auto nl = text.find('\n');
    if (nl == std::string::npos) throw std::runtime_error(path.string() + ": missing typed-array header");
    const json header = json::parse(text.substr(0, nl));
    TypedArray a;
    a.dtype = header.at("dtype").get<std::string>();
    const std::size_t count = header.at("count").get<std::size_t>();
    const std::size_t bytes = count * dtype_width(a.dtype);
    if (text.size() - nl - 1 != bytes)
        throw std::runtime_error(path.string() + ": payload holds " + std::to_string(text.size() - nl - 1) +
                                 " bytes, header promises " + std::to_string(bytes));
    a.payload.assign(text.begin() + static_cast<std::ptrdiff_t>(nl + 1), text.end());
    return a;
}

ToleranceReport compare_tolerance(const TypedArray& expected, const TypedArray& actual, double atol, double rtol) {
    if (expected.dtype != actual.dtype)
        throw std::invalid_argument("dtype mismatch: " + expected.dtype + " vs " + actual.dtype);
    if (expected.count() != actual.count())
        throw std::invalid_argument("element count mismatch: " + std::to_string(expected.count()) + " vs " +
                                    std::to_string(actual.count()));
    ToleranceReport r;
    for (std::size_t i = 0; i < expected.count(); ++i) {
        const double e = expected.at(i), a = actual.at(i);
        const bool en = std::isnan(e), an = std::isnan(a);
        r.nan_count_expected += en;
        r.nan_count_actual += an;
        if (en || an) {
            if (en != an) r.nan_positions_match = false;
            continue;
        }
        if (e == a) continue;  // covers equal infinities
        const double err = std::fabs(a - e);
        r.max_abs_error = std::max(r.max_abs_error, err);
        if (std::isinf(e) || std::isinf(a) || !(err <= atol + rtol * std::fabs(e))) ++r.mismatch_count;
    }
    r.pass = r.mismatch_count == 0 && r.nan_count_expected == r.nan_count_actual && r.nan_positions_match;
    std::ostringstream msg;
    msg << (r.pass ? "PASS" : "FAIL") << ": " << r.mismatch_count << " of " << expected.count()
        << " elements outside tolerance, max_abs_error=" << r.max_abs_error;
    if (r.nan_count_expected || r.nan_count_actual)
        msg << "; NaN count expected=" << r.nan_count_expected << " actual=" << r.nan_count_actual
            << (r.nan_positions_match ? "" : " at differing positions");
    r.message = msg.str();
    return r;
}

ToleranceReport compare_tolerance(const fs::path& expected, const fs::path& actual, double atol, double rtol) {
    return compare_tolerance(load_typed_array(expected), load_typed_array(actual), atol, rtol);
}

SmokeResult smoke(const fs::path& capture_dir) {
    SmokeResult s;
    try {
        auto report = rpl::replay(capture_dir);
        s.instructions = report.instructions.front();
        s.pass = true;
    } catch (const std::exception& e) {
        s.error = e.what();
    }
    return s;
}

VariantReport validate_variant(const fs::path& capture_dir, const fs::path& variant_code_object,
                               const fs::path& work_dir, std::optional<std::pair<double, double>> tolerance) {
    VariantReport out;
    out.baseline_dir = work_dir / "baseline";
    out.variant_dir = work_dir / "variant";
    rpl::ReplayOptions opts;
    opts.dump_output = true;
    opts.output_dir = out.baseline_dir;
    rpl::replay(capture_dir, opts);
    opts.output_dir = out.variant_dir;
    opts.code_object_override = variant_code_object;
    rpl::replay(capture_dir, opts);
    out.diff = compare_byte_exact(out.baseline_dir, out.variant_dir);
    if (!tolerance) return out;

    // Every typed pointer argument, read from its address to the end of its region.
    const auto bundle = cap::CaptureBundle::load(capture_dir);
    for (const kc::KernargSlot& slot : kc::parse_kernarg_metadata(bundle.code_object, bundle.dispatch.mangled_symbol)) {
        if (slot.value_kind != kc::ValueKind::GlobalBuffer || slot.type.size() < 2 || slot.type[0] != '*') continue;
        const std::string dtype = slot.type.substr(1);
        const std::uint64_t ptr = load_le<std::uint64_t>(bundle.kernarg.data() + slot.offset, 8);
        for (const auto& r : bundle.regions) {
            if (ptr < r.base.value || ptr >= r.base.value + r.size) continue;
            const std::string file = rpl::dump_path("", r.base).string();
            const Bytes b = read_file(out.baseline_dir / file), v = read_file(out.variant_dir / file);
            const std::size_t off = ptr - r.base.value;
            const std::size_t len = (r.size - off) / dtype_width(dtype) * dtype_width(dtype);
            TypedArray e{dtype, Bytes(b.begin() + static_cast<std::ptrdiff_t>(off), b.begin() + static_cast<std::ptrdiff_t>(off + len))};
            TypedArray a{dtype, Bytes(v.begin() + static_cast<std::ptrdiff_t>(off), v.begin() + static_cast<std::ptrdiff_t>(off + len))};
            out.tolerance.emplace_back(slot.name, compare_tolerance(e, a, tolerance->first, tolerance->second));
            break;
        }
    }
    return out;
}

}  // namespace kcap::val
