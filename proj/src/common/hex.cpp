#include "kcap/common/hex.hpp"

#include <charconv>
#include <stdexcept>

namespace kcap {

std::string hex_digits(std::uint64_t value) {
    char buf[32];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, value, 16);
    return std::string(buf, end);
}

std::string hex_address(std::uint64_t value) { return "0x" + hex_digits(value); }

namespace {

std::uint64_t parse_base(std::string_view text, int base) {
    std::uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v, base);
    if (text.empty() || ec != std::errc{} || ptr != text.data() + text.size())
        throw std::invalid_argument("not a number: '" + std::string(text) + "'");
    return v;
}

bool has_hex_prefix(std::string_view t) {
    return t.size() > 2 && t[0] == '0' && (t[1] == 'x' || t[1] == 'X');
}

}  // namespace

std::uint64_t parse_hex(std::string_view text) {
    if (has_hex_prefix(text)) text.remove_prefix(2);
    return parse_base(text, 16);
}

std::uint64_t parse_uint(std::string_view text) {
    if (has_hex_prefix(text)) return parse_base(text.substr(2), 16);
    return parse_base(text, 10);
}

}  // namespace kcap
