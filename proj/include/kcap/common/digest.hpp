#pragma once

#include "kcap/common/bytes.hpp"

#include <string>
#include <string_view>

namespace kcap {

/// Lowercase hex SHA-256 of `data`.
std::string sha256_hex(ByteView data);

std::string base64_encode(ByteView data);

/// Throws std::invalid_argument on malformed input.
Bytes base64_decode(std::string_view text);

}  // namespace kcap
