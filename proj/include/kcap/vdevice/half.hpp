#pragma once

#include <cstdint>

namespace kcap::vdev {

// IEEE 754 binary16 stored as raw bits. Every conversion into half rounds
// to nearest, ties to even.

std::uint16_t half_from_double(double value);
double half_to_double(std::uint16_t bits);

inline std::uint16_t half_from_float(float value) { return half_from_double(value); }
inline float half_to_float(std::uint16_t bits) { return static_cast<float>(half_to_double(bits)); }

// Two binary16 operands sum and multiply exactly in double, so a single
// rounding back to half gives the correctly rounded result.
inline std::uint16_t half_add(std::uint16_t a, std::uint16_t b) {
    return half_from_double(half_to_double(a) + half_to_double(b));
}
inline std::uint16_t half_mul(std::uint16_t a, std::uint16_t b) {
    return half_from_double(half_to_double(a) * half_to_double(b));
}

inline bool half_is_nan(std::uint16_t bits) { return (bits & 0x7c00) == 0x7c00 && (bits & 0x03ff) != 0; }

}  // namespace kcap::vdev
