#include "kcap/kernelc/jit.hpp"

#include "kcap/common/digest.hpp"
#include "kcap/common/files.hpp"
#include "kcap/kernelc/compiler.hpp"
#include "kcap/kernelc/mangle.hpp"
#include "kcap/kernelc/namemap.hpp"
#include "kcap/vdevice/isa.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <regex>
#include <set>

namespace kcap::kc {

namespace {

std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

std::string drop_hash_comment(const std::string& s) {
    auto p = s.find('#');
    return p == std::string::npos ? s : s.substr(0, p);
}

std::optional<std::int64_t> parse_int(std::string_view s) {
    s = std::string_view(s.data(), s.size());
    bool neg = false;
    if (!s.empty() && s[0] == '-') {
        neg = true;
        s.remove_prefix(1);
    }
    int base = 10;
    if (s.size() > 2 && s[0] == '0' && (s[1] == 'x' || s[1] == 'X')) {
        base = 16;
        s.remove_prefix(2);
    }
    std::int64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v, base);
    if (s.empty() || ec != std::errc() || p != s.data() + s.size()) return std::nullopt;
    return neg ? -v : v;
}

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(trim(cur));
    out.erase(std::remove(out.begin(), out.end(), std::string()), out.end());
    return out;
}

bool is_identifier(std::string_view s) {
    if (s.empty() || !(std::isalpha(static_cast<unsigned char>(s[0])) || s[0] == '_')) return false;
    return std::all_of(s.begin(), s.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; });
}

std::pair<std::vector<AutotuneConfig>, std::vector<std::string>> parse_autotune(const std::string& args,
                                                                                const std::string& file,
                                                                                unsigned line) {
    static const std::regex kConfig(R"(Config\s*\(([^)]*)\))");
    static const std::regex kKey(R"(key\s*=\s*\[([^\]]*)\])");
    std::vector<AutotuneConfig> configs;
    for (auto it = std::sregex_iterator(args.begin(), args.end(), kConfig); it != std::sregex_iterator(); ++it) {
        AutotuneConfig config;
        for (const std::string& kv : split_commas((*it)[1].str())) {
            auto eq = kv.find('=');
            if (eq == std::string::npos) throw SourceError(file, line, "Config entry '" + kv + "' is not name=value");
            std::string name = trim(kv.substr(0, eq));
            auto value = parse_int(trim(kv.substr(eq + 1)));
            if (!is_identifier(name) || !value) throw SourceError(file, line, "bad Config entry '" + kv + "'");
            if (*value < 1) throw SourceError(file, line, "Config value for '" + name + "' must be >= 1");
            if (name == "num_warps")
                config.num_warps = *value;
            else if (name == "num_stages")
                config.num_stages = *value;
            else
                config.params[name] = *value;
        }
        configs.push_back(std::move(config));
    }
    if (configs.empty()) throw SourceError(file, line, "@autotune needs at least one Config");
    std::vector<std::string> key;
    std::smatch m;
    if (std::regex_search(args, m, kKey)) {
        for (std::string k : split_commas(m[1].str())) {
            if (k.size() >= 2 && (k.front() == '"' || k.front() == '\'')) k = k.substr(1, k.size() - 2);
            key.push_back(k);
        }
    }
    return {configs, key};
}

std::vector<ScriptParam> parse_params(const std::string& list, const std::string& file, unsigned line) {
    std::vector<ScriptParam> params;
    for (const std::string& p : split_commas(list)) {
        auto colon = p.find(':');
        if (colon == std::string::npos) throw SourceError(file, line, "parameter '" + p + "' lacks an annotation");
        ScriptParam sp;
        sp.name = trim(p.substr(0, colon));
        sp.type = trim(p.substr(colon + 1));
        if (!is_identifier(sp.name)) throw SourceError(file, line, "bad parameter name '" + sp.name + "'");
        if (sp.type == "constexpr") {
            sp.kind = ParamKind::Constexpr;
        } else if (!sp.type.empty() && sp.type[0] == '*' && vdev::value_type_from(sp.type.substr(1))) {
            sp.kind = ParamKind::Pointer;
        } else if (vdev::value_type_from(sp.type)) {
            sp.kind = ParamKind::Scalar;
        } else {
            throw SourceError(file, line, "unknown annotation '" + sp.type + "'");
        }
        params.push_back(std::move(sp));
    }
    return params;
}

std::optional<fs::path> module_path(const fs::path& base, const std::vector<std::string>& parts) {
    fs::path p = base;
    for (const std::string& part : parts) p /= part;
    if (parts.empty()) {
        if (fs::is_regular_file(p / kPackageMarker)) return normalize(p / kPackageMarker);
        return std::nullopt;
    }
    fs::path file = p;
    file += kScriptExtension;
    if (fs::is_regular_file(file)) return normalize(file);
    if (fs::is_regular_file(p / kPackageMarker)) return normalize(p / kPackageMarker);
    return std::nullopt;
}

std::vector<std::string> dotted_parts(std::string_view s) {
    std::vector<std::string> parts;
    std::size_t b = 0;
    while (b <= s.size()) {
        auto d = s.find('.', b);
        std::string part(s.substr(b, d == std::string_view::npos ? std::string_view::npos : d - b));
        if (!part.empty()) parts.push_back(part);
        if (d == std::string_view::npos) break;
        b = d + 1;
    }
    return parts;
}

void collect_constants(const fs::path& file, std::set<fs::path>& visiting, std::map<std::string, std::int64_t>& out,
                       const ScriptModule* parsed) {
    const fs::path key = normalize(file);
    if (!visiting.insert(key).second) return;
    ScriptModule module = parsed ? *parsed : parse_script(file);
    for (const ScriptImport& imp : module.imports) {
        auto target = resolve_import(module.path, imp);
        if (!target) continue;
        std::map<std::string, std::int64_t> imported;
        collect_constants(*target, visiting, imported, nullptr);
        for (const std::string& name : imp.names)
            if (auto it = imported.find(name); it != imported.end()) out[name] = it->second;
    }
    for (const auto& [k, v] : module.constants) out[k] = v;
}

}  // namespace

std::string_view name_of(ParamKind kind) {
    switch (kind) {
        case ParamKind::Pointer: return "pointer";
        case ParamKind::Scalar: return "scalar";
        case ParamKind::Constexpr: return "constexpr";
    }
    return "scalar";
}

std::optional<ParamKind> param_kind_from(std::string_view name) {
    if (name == "pointer") return ParamKind::Pointer;
    if (name == "scalar") return ParamKind::Scalar;
    if (name == "constexpr") return ParamKind::Constexpr;
    return std::nullopt;
}

std::vector<std::string> ScriptKernel::constexpr_names() const {
    std::vector<std::string> names;
    for (const ScriptParam& p : params)
        if (p.kind == ParamKind::Constexpr) names.push_back(p.name);
    return names;
}

const ScriptKernel* ScriptModule::find(std::string_view name) const {
    for (const ScriptKernel& k : kernels)
        if (k.name == name) return &k;
    return nullptr;
}

ScriptModule parse_script(const fs::path& path) { return parse_script_text(read_text(path), normalize(path)); }

ScriptModule parse_script_text(const std::string& text, const fs::path& path) {
    static const std::regex kFrom(R"(^from\s+([.\w]+)\s+import\s+(.+)$)");
    static const std::regex kConst(R"(^([A-Za-z_]\w*)\s*=\s*(-?\w+)$)");
    static const std::regex kDef(R"(^def\s+([A-Za-z_]\w*)\s*\((.*)\)\s*:$)");

    ScriptModule module;
    module.path = path;
    const std::string file = path.string();

    std::vector<std::string> lines;
    for (std::size_t b = 0; b <= text.size();) {
        auto e = text.find('\n', b);
        if (e == std::string::npos) e = text.size();
        std::string l = text.substr(b, e - b);
        if (!l.empty() && l.back() == '\r') l.pop_back();
        lines.push_back(std::move(l));
        b = e + 1;
    }

    bool pending_jit = false, pending_autotune = false;
    std::vector<AutotuneConfig> pending_configs;
    std::vector<std::string> pending_key;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const unsigned lineno = static_cast<unsigned>(i + 1);
        const std::string stmt = trim(drop_hash_comment(lines[i]));
        if (stmt.empty()) continue;
        if (std::isspace(static_cast<unsigned char>(lines[i][0])))
            throw SourceError(file, lineno, "unexpected indentation");
        std::smatch m;
        if (stmt.rfind("@autotune", 0) == 0) {
            // Arguments may span lines until the parentheses balance.
            std::string args = stmt;
            int depth = 0;
            auto balance = [&](const std::string& s) {
                for (char c : s) depth += c == '(' ? 1 : c == ')' ? -1 : 0;
            };
            balance(stmt);
            while (depth > 0 && i + 1 < lines.size()) {
                ++i;
                std::string more = trim(drop_hash_comment(lines[i]));
                balance(more);
                args += " " + more;
            }
            if (depth != 0) throw SourceError(file, lineno, "unbalanced @autotune arguments");
            std::tie(pending_configs, pending_key) = parse_autotune(args, file, lineno);
            pending_autotune = true;
        } else if (stmt == "@jit") {
            pending_jit = true;
        } else if (std::regex_match(stmt, m, kDef)) {
            ScriptKernel k;
            k.name = m[1].str();
            k.line = lineno;
            k.params = parse_params(m[2].str(), file, lineno);
            k.jit = pending_jit;
            k.autotuned = pending_autotune;
            k.configs = std::move(pending_configs);
            k.key = std::move(pending_key);
            if (k.autotuned && !k.jit) throw SourceError(file, lineno, "@autotune without @jit");
            for (const AutotuneConfig& c : k.configs)
                for (const auto& [name, v] : c.params) {
                    auto it = std::find_if(k.params.begin(), k.params.end(),
                                           [&](const ScriptParam& p) { return p.name == name; });
                    if (it == k.params.end() || it->kind != ParamKind::Constexpr)
                        throw SourceError(file, lineno, "Config sets '" + name + "' which is not a constexpr parameter");
                }
            pending_jit = pending_autotune = false;
            pending_configs.clear();
            pending_key.clear();
            // Labels may sit at column 0 inside a body.
            static const std::regex kLabel(R"(^[A-Za-z_]\w*:\s*(#.*)?$)");
            while (i + 1 < lines.size() &&
                   (trim(lines[i + 1]).empty() || std::isspace(static_cast<unsigned char>(lines[i + 1][0])) ||
                    std::regex_match(lines[i + 1], kLabel))) {
                ++i;
                const std::string body_text = drop_hash_comment(lines[i]);
                if (!trim(body_text).empty()) k.body.push_back(SourceLine{body_text, file, static_cast<unsigned>(i + 1)});
            }
            if (module.find(k.name)) throw SourceError(file, lineno, "duplicate kernel '" + k.name + "'");
            module.kernels.push_back(std::move(k));
        } else if (pending_jit || pending_autotune) {
            throw SourceError(file, lineno, "decorator must precede a def");
        } else if (std::regex_match(stmt, m, kFrom)) {
            ScriptImport imp;
            imp.module = m[1].str();
            imp.line = lineno;
            std::string names = trim(m[2].str());
            if (!names.empty() && names.front() == '(' && names.back() == ')') names = names.substr(1, names.size() - 2);
            for (const std::string& n : split_commas(names)) {
                const std::string name = trim(n.substr(0, n.find(" as ")));
                if (!is_identifier(name)) throw SourceError(file, lineno, "bad import name '" + n + "'");
                imp.names.push_back(name);
            }
            module.imports.push_back(std::move(imp));
        } else if (stmt.rfind("import ", 0) == 0) {
            continue;
        } else if (std::regex_match(stmt, m, kConst)) {
            const std::string rhs = m[2].str();
            if (auto v = parse_int(rhs)) {
                module.constants[m[1].str()] = *v;
            } else if (auto it = module.constants.find(rhs); it != module.constants.end()) {
                module.constants[m[1].str()] = it->second;
            } else {
                throw SourceError(file, lineno, "constant '" + m[1].str() + "' is not an integer");
            }
        } else {
            throw SourceError(file, lineno, "unrecognized statement '" + stmt + "'");
        }
    }
    if (pending_jit || pending_autotune)
        throw SourceError(file, static_cast<unsigned>(lines.size()), "decorator at end of file");
    return module;
}

std::optional<fs::path> package_root(const fs::path& module_file) {
    fs::path dir = normalize(module_file).parent_path();
    if (!fs::is_regular_file(dir / kPackageMarker)) return std::nullopt;
    while (dir.has_parent_path() && dir.parent_path() != dir && fs::is_regular_file(dir.parent_path() / kPackageMarker))
        dir = dir.parent_path();
    return dir;
}

std::optional<fs::path> resolve_import(const fs::path& module_file, const ScriptImport& import) {
    const fs::path here = normalize(module_file).parent_path();
    std::size_t dots = 0;
    while (dots < import.module.size() && import.module[dots] == '.') ++dots;
    const auto parts = dotted_parts(std::string_view(import.module).substr(dots));
    if (dots > 0) {
        fs::path base = here;
        for (std::size_t i = 1; i < dots; ++i) base = base.parent_path();
        return module_path(base, parts);
    }
    std::vector<fs::path> roots;
    if (auto root = package_root(module_file)) roots.push_back(root->parent_path());
    roots.push_back(here);
    for (const fs::path& r : roots)
        if (auto p = module_path(r, parts)) return p;
    return std::nullopt;
}

std::map<std::string, std::int64_t> module_constants(const ScriptModule& module) {
    std::set<fs::path> visiting;
    std::map<std::string, std::int64_t> out;
    collect_constants(module.path, visiting, out, &module);
    return out;
}

JitResult jit_compile(const ScriptModule& module, const ScriptKernel& kernel, const JitRequest& request) {
    std::map<std::string, std::int64_t> bindings;
    for (const std::string& name : kernel.constexpr_names()) {
        if (auto it = request.constexprs.find(name); it != request.constexprs.end()) {
            bindings[name] = it->second;
        } else if (request.config && request.config->params.count(name)) {
            bindings[name] = request.config->params.at(name);
        } else {
            throw JitError("unbound constexpr '" + name + "' for kernel '" + kernel.name + "'");
        }
    }
    if (request.config) {
        for (const auto& [name, v] : request.config->params)
            if (!bindings.count(name))
                throw JitError("config parameter '" + name + "' is not a constexpr of '" + kernel.name + "'");
        if (request.config->num_warps < 1 || request.config->num_stages < 1)
            throw JitError("num_warps and num_stages must be >= 1");
    }

    AssembleContext context;
    context.jit = true;
    context.constants = module_constants(module);
    for (const auto& [k, v] : bindings) context.constants[k] = v;

    std::vector<TypedParam> typed;
    for (const ScriptParam& p : kernel.params)
        if (p.kind != ParamKind::Constexpr) typed.emplace_back(p.name, p.type);

    ObjectImage image;
    image.kind = ImageKind::CodeObject;
    image.meta["jit.kernel"] = kernel.name;
    image.meta["jit.module"] = module.path.filename().string();
    for (const auto& [k, v] : bindings) image.meta["jit.constexpr." + k] = std::to_string(v);
    if (request.config) {
        image.meta["jit.num_warps"] = std::to_string(request.config->num_warps);
        image.meta["jit.num_stages"] = std::to_string(request.config->num_stages);
    }
    const std::string mangled = mangle(kernel.name);
    image.kernels.push_back(assemble_kernel(mangled, layout_kernargs(typed), kernel.body, context));

    JitResult result;
    result.bytes = serialize(image);
    result.sha256 = sha256_hex(result.bytes);
    result.mangled = mangled;
    NameMapRecord& rec = result.record;
    rec.kernel_name = kernel.name;
    rec.source_file = module.path.string();
    rec.signature = kernel.params;
    rec.constexprs = bindings;
    rec.tensor_meta = request.tensor_meta;
    if (request.config) {
        rec.config = request.config;
        for (const auto& [k, v] : request.config->params) rec.supplied.push_back(k);
        rec.supplied.push_back("num_stages");
        rec.supplied.push_back("num_warps");
        std::sort(rec.supplied.begin(), rec.supplied.end());
    }
    if (request.name_map) update_name_map(*request.name_map, result.sha256, rec);
    return result;
}

std::size_t select_config(const std::vector<std::optional<std::uint64_t>>& costs) {
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < costs.size(); ++i)
        if (costs[i] && (!best || *costs[i] < *costs[*best])) best = i;
    if (!best) throw JitError("every autotune config failed");
    return *best;
}

AutotuneOutcome autotune(const ScriptModule& module, const ScriptKernel& kernel,
                         const std::vector<AutotuneConfig>& configs, const Benchmarker& benchmarker,
                         const JitRequest& base) {
    if (configs.empty()) throw JitError("autotune needs at least one config");
    AutotuneOutcome out;
    for (const AutotuneConfig& config : configs) {
        JitRequest probe = base;
        probe.config = config;
        probe.name_map.reset();
        try {
            out.costs.push_back(benchmarker(config, jit_compile(module, kernel, probe)));
        } catch (const std::exception&) {
            out.costs.push_back(std::nullopt);
        }
    }
    out.index = select_config(out.costs);
    out.winner = configs[out.index];
    return out;
}

std::optional<AutotuneConfig> AutotuneCache::get(const std::string& kernel,
                                                 const std::vector<std::int64_t>& key_values) const {
    auto it = entries_.find({kernel, key_values});
    if (it == entries_.end()) return std::nullopt;
    return it->second;
}

void AutotuneCache::put(const std::string& kernel, const std::vector<std::int64_t>& key_values,
                        AutotuneConfig config) {
    entries_[{kernel, key_values}] = std::move(config);
}

}  // namespace kcap::kc
