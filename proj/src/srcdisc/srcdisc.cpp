#include "kcap/srcdisc/srcdisc.hpp"

#include "kcap/common/files.hpp"
#include "kcap/kernelc/codeobject.hpp"
#include "kcap/kernelc/compiler.hpp"
#include "kcap/kernelc/jit.hpp"
#include "kcap/kernelc/overlay.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <deque>
#include <fstream>
#include <map>
#include <regex>
#include <set>
#include <sstream>

namespace kcap::sd {

namespace {

const std::vector<std::string> kCompiledExtensions = {".ks", ".kh"};

bool inside(const fs::path& file, const fs::path& dir) {
    if (dir.empty()) return true;
    const fs::path f = kc::normalize(file), d = kc::normalize(dir);
    auto [di, fi] = std::mismatch(d.begin(), d.end(), f.begin(), f.end());
    return di == d.end();
}

std::string regex_escape(const std::string& s) {
    static const std::regex special(R"([.^$|()\[\]{}*+?\\])");
    return std::regex_replace(s, special, R"(\$&)");
}

bool file_matches(const fs::path& file, const std::regex& re) {
    std::ifstream in(file);
    std::string line;
    while (std::getline(in, line))
        if (std::regex_search(line, re)) return true;
    return false;
}

std::regex strict_pattern(const std::string& base) {
    return std::regex(R"(^\s*__kernel\s+)" + regex_escape(base) + R"(\s*[<(])");
}

std::regex loose_pattern(const std::string& base) { return std::regex(R"(\b)" + regex_escape(base) + R"(\b)"); }

fs::path pick(std::vector<fs::path> hits, const std::string& what, std::vector<std::string>& warnings) {
    std::sort(hits.begin(), hits.end());
    if (hits.size() > 1) {
        std::string msg = what + " matched " + std::to_string(hits.size()) + " files; using " + hits.front().string();
        spdlog::warn("srcdisc: {}", msg);
        warnings.push_back(msg);
    }
    return hits.front();
}

std::vector<std::string> inferred_flags(const std::vector<fs::path>& files) {
    std::vector<std::string> flags;
    for (const std::string& d : infer_defines(files)) flags.push_back("-D" + d);
    return flags;
}

std::vector<fs::path> quoted_includes(const fs::path& file) {
    static const std::regex inc(R"re(^\s*#\s*include\s*"([^"]+)")re");
    std::vector<fs::path> out;
    std::ifstream in(file);
    std::string line;
    std::smatch m;
    while (std::getline(in, line))
        if (std::regex_search(line, m, inc)) out.emplace_back(m[1].str());
    return out;
}

// Object built from a compile command, when it exists and parses.
std::optional<kc::ObjectImage> prebuilt_object(const kc::CompileCommand& cmd) {
    try {
        auto args = kc::parse_driver_args(cmd);
        if (!args.output || !fs::is_regular_file(*args.output)) return std::nullopt;
        return kc::parse_image(read_file(*args.output));
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

bool object_has(const kc::ObjectImage& img, const std::string& mangled) { return img.find_kernel(mangled) != nullptr; }

}  // namespace

std::string_view name_of(Method method) {
    switch (method) {
        case Method::DebugManifest: return "debug_manifest";
        case Method::GrepStrict: return "grep_strict";
        case Method::GrepLoose: return "grep_loose";
        case Method::Jit: return "jit";
    }
    return "grep_strict";
}

std::string extract_base_name(std::string_view demangled) {
    int depth = 0;
    bool closed = false;  // current segment already ended at a bracket
    std::string current, last;
    for (std::size_t i = 0; i < demangled.size(); ++i) {
        const char c = demangled[i];
        if (c == '<' || c == '(') {
            if (depth == 0) closed = true;
            ++depth;
        } else if (c == '>' || c == ')') {
            if (depth > 0) --depth;
        } else if (depth == 0 && c == ':' && i + 1 < demangled.size() && demangled[i + 1] == ':') {
            if (!current.empty()) last = current;
            current.clear();
            closed = false;
            ++i;
        } else if (depth == 0 && !closed && !std::isspace(static_cast<unsigned char>(c))) {
            current += c;
        }
    }
    if (!current.empty()) last = current;
    return last.empty() ? std::string(demangled) : last;
}

std::vector<fs::path> list_sources(const fs::path& dir, const std::vector<std::string>& extensions) {
    std::vector<fs::path> out;
    if (!fs::is_directory(dir)) return out;
    for (const auto& e : fs::recursive_directory_iterator(dir, fs::directory_options::skip_permission_denied)) {
        if (!e.is_regular_file()) continue;
        const std::string ext = e.path().extension().string();
        if (std::find(extensions.begin(), extensions.end(), ext) != extensions.end())
            out.push_back(kc::normalize(e.path()));
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<fs::path> trace_includes(const fs::path& file, const fs::path& source_dir, unsigned max_depth,
                                     const std::vector<fs::path>& include_dirs, std::vector<std::string>* warnings) {
    const fs::path root = kc::normalize(file);
    std::set<fs::path> seen{root};
    std::set<fs::path> deps;
    // Breadth first so every file is reached at its minimal depth.
    std::deque<std::pair<fs::path, unsigned>> queue{{root, 0}};
    while (!queue.empty()) {
        auto [current, depth] = queue.front();
        queue.pop_front();
        if (depth >= max_depth) continue;
        for (const fs::path& inc : quoted_includes(current)) {
            std::optional<fs::path> found;
            if (fs::is_regular_file(current.parent_path() / inc)) {
                found = kc::normalize(current.parent_path() / inc);
            } else {
                for (const fs::path& d : include_dirs)
                    if (fs::is_regular_file(d / inc)) {
                        found = kc::normalize(d / inc);
                        break;
                    }
            }
            if (!found) {
                const std::string msg = current.string() + ": include \"" + inc.string() + "\" not found";
                spdlog::warn("srcdisc: {}", msg);
                if (warnings) warnings->push_back(msg);
                continue;
            }
            if (!inside(*found, source_dir) || !seen.insert(*found).second) continue;
            deps.insert(*found);
            queue.emplace_back(*found, depth + 1);
        }
    }
    return {deps.begin(), deps.end()};
}

std::vector<std::string> infer_defines(const std::vector<fs::path>& files, const std::vector<std::string>& prefixes) {
    static const std::regex ifdef(R"(^\s*#\s*ifdef\s+([A-Za-z_]\w*))");
    std::set<std::string> out;
    for (const fs::path& f : files) {
        std::ifstream in(f);
        std::string line;
        std::smatch m;
        while (std::getline(in, line)) {
            if (!std::regex_search(line, m, ifdef)) continue;
            const std::string name = m[1].str();
            for (const std::string& p : prefixes)
                if (name.rfind(p, 0) == 0) out.insert(name);
        }
    }
    return {out.begin(), out.end()};
}

TuResolution resolve_translation_unit(const fs::path& header, const std::optional<std::vector<kc::CompileCommand>>& db,
                                      const std::string& mangled, const fs::path& source_dir) {
    const fs::path target = kc::normalize(header);
    std::vector<kc::CompileCommand> candidates;
    if (db) {
        for (const kc::CompileCommand& cmd : *db) {
            std::vector<fs::path> dirs;
            try {
                dirs = kc::parse_driver_args(cmd).include_dirs;
            } catch (const std::exception&) {
            }
            const fs::path tu = kc::normalize(cmd.absolute_file());
            auto deps = trace_includes(tu, {}, kMaxIncludeDepth, dirs);
            if (tu == target || std::find(deps.begin(), deps.end(), target) != deps.end()) candidates.push_back(cmd);
        }
    } else {
        for (const fs::path& tu : list_sources(source_dir, {".ks"})) {
            auto deps = trace_includes(tu, source_dir);
            if (tu == target || std::find(deps.begin(), deps.end(), target) == deps.end()) continue;
            std::vector<fs::path> closure = deps;
            closure.push_back(tu);
            kc::CompileCommand cmd;
            cmd.directory = tu.parent_path();
            cmd.file = tu;
            cmd.arguments = {"kcc"};
            for (const std::string& f : inferred_flags(closure)) cmd.arguments.push_back(f);
            cmd.arguments.push_back(tu.string());
            candidates.push_back(std::move(cmd));
        }
    }
    std::sort(candidates.begin(), candidates.end(),
              [](const auto& a, const auto& b) { return a.absolute_file() < b.absolute_file(); });
    if (candidates.empty())
        throw DiscoveryError(DiscoveryError::Kind::NoCandidate, "no translation unit includes " + target.string());

    auto finish = [&](const kc::CompileCommand& cmd) {
        TuResolution r;
        r.translation_unit = kc::normalize(cmd.absolute_file());
        r.compile_flags = kc::parse_driver_args(cmd).define_and_include_flags;
        if (db) r.command = cmd;
        return r;
    };
    if (candidates.size() == 1) return finish(candidates.front());

    std::vector<const kc::CompileCommand*> winners;
    for (const kc::CompileCommand& cmd : candidates) {
        bool has = false;
        if (auto obj = prebuilt_object(cmd)) {
            has = object_has(*obj, mangled);
        } else {
            try {
                has = object_has(kc::compile_tu(cmd).image, mangled);
            } catch (const std::exception& e) {
                spdlog::warn("srcdisc: candidate {} failed to compile: {}", cmd.absolute_file().string(), e.what());
            }
        }
        if (has) winners.push_back(&cmd);
    }
    if (winners.empty())
        throw DiscoveryError(DiscoveryError::Kind::NoCandidate,
                             "no candidate translation unit defines " + mangled + " (from " + target.string() + ")");
    if (winners.size() > 1)
        throw DiscoveryError(DiscoveryError::Kind::AmbiguousAfterSymbolCheck,
                             "both " + winners[0]->absolute_file().string() + " and " +
                                 winners[1]->absolute_file().string() + " define " + mangled);
    return finish(*winners.front());
}

SourceResolution discover_compiled(const std::string& kernel_name, const std::string& mangled,
                                   const fs::path& source_dir, const std::optional<fs::path>& compile_db) {
    const fs::path src = kc::normalize(source_dir);
    if (!fs::is_directory(src)) throw DiscoveryError(DiscoveryError::Kind::NotFound, src.string() + " is not a directory");
    const std::string base = extract_base_name(kernel_name);
    const std::regex strict = strict_pattern(base);
    SourceResolution res;

    std::optional<std::vector<kc::CompileCommand>> db;
    if (compile_db && fs::exists(*compile_db)) db = kc::load_compile_db(*compile_db);

    // Primary path: the object holding the symbol names its sources.
    if (db) {
        std::vector<std::pair<const kc::CompileCommand*, kc::ObjectImage>> holders;
        for (const kc::CompileCommand& cmd : *db)
            if (auto obj = prebuilt_object(cmd); obj && object_has(*obj, mangled) && !obj->debug_manifest.empty())
                holders.emplace_back(&cmd, std::move(*obj));
        if (!holders.empty()) {
            if (holders.size() > 1) {
                const std::string msg = mangled + " found in " + std::to_string(holders.size()) + " objects; using the first";
                spdlog::warn("srcdisc: {}", msg);
                res.warnings.push_back(msg);
            }
            const auto& [cmd, obj] = holders.front();
            std::vector<fs::path> files;
            for (const std::string& f : obj.debug_manifest)
                if (inside(f, src)) files.push_back(kc::normalize(f));
            if (!files.empty()) {
                res.method = Method::DebugManifest;
                res.kernel_file = files.front();
                for (const fs::path& f : files)
                    if (file_matches(f, strict)) {
                        res.kernel_file = f;
                        break;
                    }
                std::set<fs::path> deps(files.begin(), files.end());
                deps.erase(res.kernel_file);
                res.dep_files.assign(deps.begin(), deps.end());
                res.translation_unit = kc::normalize(cmd->absolute_file());
                res.compile_flags = kc::parse_driver_args(*cmd).define_and_include_flags;
                res.compile_command = *cmd;
                return res;
            }
        }
    }

    // Fallback: strict definition pass, then a loose pass on the base name.
    const auto sources = list_sources(src, kCompiledExtensions);
    std::vector<fs::path> hits;
    for (const fs::path& f : sources)
        if (file_matches(f, strict)) hits.push_back(f);
    res.method = Method::GrepStrict;
    if (hits.empty()) {
        const std::regex loose = loose_pattern(base);
        for (const fs::path& f : sources)
            if (file_matches(f, loose)) hits.push_back(f);
        res.method = Method::GrepLoose;
    }
    if (hits.empty())
        throw DiscoveryError(DiscoveryError::Kind::NotFound, "no source under " + src.string() + " mentions " + base);
    res.kernel_file = pick(hits, res.method == Method::GrepStrict ? "definition of " + base : "name " + base, res.warnings);

    std::vector<fs::path> dirs;
    std::optional<kc::CompileCommand> own;
    if (db)
        for (const kc::CompileCommand& cmd : *db)
            if (kc::normalize(cmd.absolute_file()) == res.kernel_file) own = cmd;
    if (own) dirs = kc::parse_driver_args(*own).include_dirs;
    std::set<fs::path> deps;
    for (const fs::path& d : trace_includes(res.kernel_file, src, kMaxIncludeDepth, dirs, &res.warnings)) deps.insert(d);

    if (own) {
        res.translation_unit = res.kernel_file;
        res.compile_flags = kc::parse_driver_args(*own).define_and_include_flags;
        res.compile_command = own;
    } else if (res.kernel_file.extension() == ".kh") {
        TuResolution tu = resolve_translation_unit(res.kernel_file, db, mangled, src);
        res.translation_unit = tu.translation_unit;
        res.compile_flags = tu.compile_flags;
        res.compile_command = tu.command;
        std::vector<fs::path> tu_dirs;
        if (tu.command) tu_dirs = kc::parse_driver_args(*tu.command).include_dirs;
        deps.insert(tu.translation_unit);
        for (const fs::path& d : trace_includes(tu.translation_unit, src, kMaxIncludeDepth, tu_dirs, &res.warnings))
            deps.insert(d);
    } else {
        res.translation_unit = res.kernel_file;
        std::vector<fs::path> closure(deps.begin(), deps.end());
        closure.push_back(res.kernel_file);
        res.compile_flags = inferred_flags(closure);
    }
    deps.erase(res.kernel_file);
    res.dep_files.assign(deps.begin(), deps.end());
    return res;
}

SourceResolution discover_jit(const std::string& kernel_name, const fs::path& source_dir) {
    const fs::path src = kc::normalize(source_dir);
    const std::string needle = extract_base_name(kernel_name);
    SourceResolution res;
    res.method = Method::Jit;

    struct Hit {
        fs::path file;
        std::string kernel;
        bool exact;
    };
    std::vector<Hit> hits;
    for (const fs::path& f : list_sources(src, {std::string(kc::kScriptExtension)})) {
        kc::ScriptModule mod;
        try {
            mod = kc::parse_script(f);
        } catch (const std::exception& e) {
            res.warnings.push_back(std::string("skipping unparsable ") + e.what());
            continue;
        }
        for (const kc::ScriptKernel& k : mod.kernels)
            if ((k.jit || k.autotuned) && k.name.find(needle) != std::string::npos)
                hits.push_back({f, k.name, k.name == needle});
    }
    if (hits.empty())
        throw DiscoveryError(DiscoveryError::Kind::NotFound, "no decorated scripted kernel matches " + needle);
    // An exact name beats substring matches; otherwise path order decides.
    std::stable_sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) {
        if (a.exact != b.exact) return a.exact;
        return a.file < b.file;
    });
    if (hits.size() > 1) {
        const std::string msg = needle + " matched " + std::to_string(hits.size()) + " scripted kernels; using " +
                                hits[0].kernel + " in " + hits[0].file.string();
        spdlog::warn("srcdisc: {}", msg);
        res.warnings.push_back(msg);
    }
    res.kernel_file = hits[0].file;
    res.module_file = hits[0].file;
    res.jit_kernel = hits[0].kernel;
    res.package_root = kc::package_root(hits[0].file);

    // Imports, followed transitively within the source tree.
    std::set<fs::path> seen{hits[0].file}, imports;
    std::deque<fs::path> queue{hits[0].file};
    while (!queue.empty()) {
        const fs::path cur = queue.front();
        queue.pop_front();
        kc::ScriptModule mod;
        try {
            mod = kc::parse_script(cur);
        } catch (const std::exception&) {
            continue;
        }
        for (const kc::ScriptImport& imp : mod.imports) {
            auto target = kc::resolve_import(cur, imp);
            if (!target || !seen.insert(*target).second) continue;
            imports.insert(*target);
            queue.push_back(*target);
        }
    }
    res.import_files.assign(imports.begin(), imports.end());
    res.dep_files = res.import_files;
    return res;
}

icpt::Language detect_language(const fs::path& source_dir, const std::string& kernel_name) {
    try {
        discover_jit(kernel_name, source_dir);
        return icpt::Language::Jit;
    } catch (const DiscoveryError&) {
        return icpt::Language::Compiled;
    }
}

}  // namespace kcap::sd
