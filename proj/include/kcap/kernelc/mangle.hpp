#pragma once

#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace kcap::kc {

class MangleError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// "_k$" base ["$t$" arg ("$" arg)*]
std::string mangle(std::string_view base, const std::vector<std::string>& template_args = {});

struct DemangledName {
    std::string base;
    std::vector<std::string> template_args;
};

DemangledName demangle_parts(std::string_view mangled);

/// "base<arg1,arg2>", or "base" without template arguments.
std::string demangle(std::string_view mangled);

/// demangle() when well formed, the input unchanged otherwise.
std::string display_name(std::string_view mangled);

}  // namespace kcap::kc
