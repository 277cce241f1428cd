#include "kcap/vdevice/half.hpp"

#include <cmath>

namespace kcap::vdev {

std::uint16_t half_from_double(double value) {
    const std::uint16_t sign = std::signbit(value) ? 0x8000 : 0;
    if (std::isnan(value)) return sign | 0x7e00;
    const double mag = std::fabs(value);
    if (std::isinf(mag)) return sign | 0x7c00;
    if (mag == 0.0) return sign;

    int e = 0;
    std::frexp(mag, &e);
    int exponent = e - 1;  // mag in [2^exponent, 2^(exponent+1))
    if (exponent < -14) exponent = -14;  // subnormal quantum is fixed at 2^-24

    const double quantum = std::ldexp(1.0, exponent - 10);
    // Default rounding mode is round-to-nearest-even.
    auto n = static_cast<std::uint64_t>(std::rint(mag / quantum));
    if (n < 1024) return sign | static_cast<std::uint16_t>(n);  // subnormal
    if (n == 2048) {
        n = 1024;
        ++exponent;
    }
    const int biased = exponent + 15;
    if (biased >= 31) return sign | 0x7c00;
    return sign | static_cast<std::uint16_t>((biased << 10) | (n - 1024));
}

double half_to_double(std::uint16_t bits) {
    const bool negative = (bits & 0x8000) != 0;
    const int biased = (bits >> 10) & 0x1f;
    const int mantissa = bits & 0x3ff;
    double mag;
    if (biased == 0) {
        mag = std::ldexp(static_cast<double>(mantissa), -24);
    } else if (biased == 31) {
        mag = mantissa == 0 ? INFINITY : NAN;
    } else {
        mag = std::ldexp(static_cast<double>(1024 + mantissa), biased - 25);
    }
    return negative ? -mag : mag;
}

}  // namespace kcap::vdev
