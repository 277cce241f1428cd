#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

namespace kcap::test {

// Independent reference for binary16 rounding: search the table of every
// finite half value for the nearest one, preferring an even mantissa on ties.
struct HalfTable {
    std::vector<std::pair<double, std::uint16_t>> finite;  // non-negative, sorted

    HalfTable() {
        for (std::uint32_t b = 0; b < 0x7c00; ++b) {
            const int exp = static_cast<int>(b >> 10);
            const int man = static_cast<int>(b & 0x3ff);
            const double v = exp == 0 ? std::ldexp(man, -24) : std::ldexp(1024 + man, exp - 25);
            finite.emplace_back(v, static_cast<std::uint16_t>(b));
        }
    }

    std::uint16_t round(double x) const {
        if (std::isnan(x)) return 0x7e00;
        const std::uint16_t sign = std::signbit(x) ? 0x8000 : 0;
        const double a = std::fabs(x);
        // Anything at or beyond max + half an ulp (65504 + 16) overflows.
        if (a >= 65520.0) return sign | 0x7c00;
        auto it = std::lower_bound(finite.begin(), finite.end(), a,
                                   [](const auto& e, double v) { return e.first < v; });
        if (it == finite.end()) return sign | 0x7c00;
        if (it->first == a || it == finite.begin()) return sign | it->second;
        auto lo = std::prev(it);
        const double dlo = a - lo->first, dhi = it->first - a;
        if (dlo < dhi) return sign | lo->second;
        if (dhi < dlo) return sign | it->second;
        return sign | ((lo->second & 1) == 0 ? lo->second : it->second);
    }
};

inline const HalfTable& half_table() {
    static const HalfTable t;
    return t;
}

}  // namespace kcap::test
