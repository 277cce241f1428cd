#include "kcap/kernelc/mangle.hpp"

namespace kcap::kc {

namespace {

constexpr std::string_view kPrefix = "_k$";
constexpr std::string_view kTemplateMarker = "$t$";

}  // namespace

std::string mangle(std::string_view base, const std::vector<std::string>& template_args) {
    if (base.empty() || base.find('$') != std::string_view::npos)
        throw MangleError("invalid kernel base name '" + std::string(base) + "'");
    std::string out = std::string(kPrefix) + std::string(base);
    for (std::size_t i = 0; i < template_args.size(); ++i) {
        const auto& arg = template_args[i];
        if (arg.empty() || arg.find('$') != std::string::npos)
            throw MangleError("invalid template argument '" + arg + "'");
        out += i == 0 ? kTemplateMarker : "$";
        out += arg;
    }
    return out;
}

DemangledName demangle_parts(std::string_view mangled) {
    if (!mangled.starts_with(kPrefix)) throw MangleError("not a mangled kernel name: '" + std::string(mangled) + "'");
    std::string_view rest = mangled.substr(kPrefix.size());
    DemangledName out;
    const auto marker = rest.find(kTemplateMarker);
    out.base = std::string(rest.substr(0, marker));
    if (out.base.empty() || out.base.find('$') != std::string::npos)
        throw MangleError("malformed mangled name: '" + std::string(mangled) + "'");
    if (marker == std::string_view::npos) return out;

    std::string_view args = rest.substr(marker + kTemplateMarker.size());
    while (true) {
        const auto dollar = args.find('$');
        const auto arg = args.substr(0, dollar);
        if (arg.empty()) throw MangleError("empty template argument in '" + std::string(mangled) + "'");
        out.template_args.emplace_back(arg);
        if (dollar == std::string_view::npos) break;
        args.remove_prefix(dollar + 1);
    }
    return out;
}

std::string demangle(std::string_view mangled) {
    const DemangledName parts = demangle_parts(mangled);
    if (parts.template_args.empty()) return parts.base;
    std::string out = parts.base + "<";
    for (std::size_t i = 0; i < parts.template_args.size(); ++i) {
        if (i) out += ",";
        out += parts.template_args[i];
    }
    return out + ">";
}

std::string display_name(std::string_view mangled) {
    try {
        return demangle(mangled);
    } catch (const MangleError&) {
        return std::string(mangled);
    }
}

}  // namespace kcap::kc
