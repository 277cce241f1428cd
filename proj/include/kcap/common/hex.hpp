#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace kcap {

/// "7f8a00000000": lowercase, no prefix.
std::string hex_digits(std::uint64_t value);

/// "0x7f8a00000000".
std::string hex_address(std::uint64_t value);

/// Accepts an optional 0x prefix. Throws std::invalid_argument.
std::uint64_t parse_hex(std::string_view text);

/// Decimal, or hex with a 0x prefix.
std::uint64_t parse_uint(std::string_view text);

}  // namespace kcap
