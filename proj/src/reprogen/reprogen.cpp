#include "kcap/reprogen/reprogen.hpp"

#include "kcap/capture/bundle.hpp"
#include "kcap/common/files.hpp"
#include "kcap/common/hex.hpp"
#include "kcap/kernelc/compiler.hpp"
#include "kcap/kernelc/namemap.hpp"
#include "kcap/kernelc/overlay.hpp"
#include "kcap/vdevice/half.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <bit>
#include <set>

namespace kcap::rp {

using nlohmann::json;

namespace {

std::string quoted(const std::string& s) { return json(s).dump(); }

cap::CaptureBundle load_bundle(const fs::path& capture_dir) {
    try {
        return cap::CaptureBundle::load(capture_dir);
    } catch (const std::exception& e) {
        throw GenerateError(std::string("capture is not usable: ") + e.what());
    }
}

// Copies the capture into the project unless it already lives there.
void place_capture(const fs::path& capture_dir, const fs::path& root) {
    const fs::path dest = root / kCaptureDir;
    std::error_code ec;
    if (fs::exists(dest) && fs::equivalent(capture_dir, dest, ec)) return;
    fs::remove_all(dest);
    copy_tree(capture_dir, dest);
}

json dims(const std::array<std::uint32_t, 3>& d) { return json::array({d[0], d[1], d[2]}); }

std::array<std::uint32_t, 3> dims_from(const json& j) {
    return {j.at(0).get<std::uint32_t>(), j.at(1).get<std::uint32_t>(), j.at(2).get<std::uint32_t>()};
}

}  // namespace

std::string emit_overlay(std::vector<OverlayMapping> mappings) {
    std::map<std::string, std::map<std::string, std::string>> roots;
    for (auto& [original, local] : mappings) {
        if (!original.is_absolute()) throw GenerateError("overlay original path must be absolute: " + original.string());
        const fs::path norm = kc::normalize(original);
        auto& dir = roots[norm.parent_path().string()];
        if (!dir.emplace(norm.filename().string(), local).second)
            throw GenerateError("duplicate overlay mapping for " + norm.string());
    }
    std::string out = "{\"version\": 0, \"roots\": [\n";
    bool first_root = true;
    for (const auto& [dir, files] : roots) {
        if (!first_root) out += ",\n";
        first_root = false;
        out += "  {\"type\": \"directory\",\n   \"name\": " + quoted(dir) + ",\n   \"contents\": [\n";
        bool first_file = true;
        for (const auto& [name, local] : files) {
            if (!first_file) out += ",\n";
            first_file = false;
            out += "     {\"type\": \"file\",\n      \"name\": " + quoted(name) + ",\n      \"external-contents\": " +
                   quoted(local) + "}";
        }
        out += "\n   ]}";
    }
    out += "\n]}";
    return out;
}

std::map<fs::path, std::string> flatten_names(const std::vector<fs::path>& files) {
    std::map<std::string, std::vector<fs::path>> by_base;
    for (const fs::path& f : std::set<fs::path>(files.begin(), files.end())) by_base[f.filename().string()].push_back(f);
    std::map<fs::path, std::string> out;
    for (const auto& [base, group] : by_base) {
        if (group.size() == 1) {
            out[group[0]] = base;
            continue;
        }
        // Add parent directory names until every member of the group is distinct.
        for (std::size_t depth = 1;; ++depth) {
            std::set<std::string> seen;
            std::map<fs::path, std::string> names;
            for (const fs::path& f : group) {
                std::vector<std::string> parts;
                fs::path p = f.parent_path();
                for (std::size_t i = 0; i < depth && !p.filename().empty(); ++i, p = p.parent_path())
                    parts.insert(parts.begin(), p.filename().string());
                std::string name;
                for (const auto& part : parts) name += part + "_";
                names[f] = name + base;
                seen.insert(names[f]);
            }
            if (seen.size() == group.size()) {
                out.insert(names.begin(), names.end());
                break;
            }
        }
    }
    return out;
}

json RunnerManifest::to_json() const {
    json t = json::object();
    for (const auto& [name, cmd] : targets) t[name] = cmd;
    json j{{"language", language}, {"kernel_name", kernel_name}, {"mangled_symbol", mangled_symbol}, {"targets", t}};
    if (!compile_directory.empty()) j["compile_directory"] = compile_directory.string();
    return j;
}

RunnerManifest RunnerManifest::from_json(const json& j) {
    RunnerManifest m;
    m.language = j.at("language").get<std::string>();
    m.kernel_name = j.at("kernel_name").get<std::string>();
    m.mangled_symbol = j.at("mangled_symbol").get<std::string>();
    if (j.contains("compile_directory")) m.compile_directory = j.at("compile_directory").get<std::string>();
    for (const auto& [name, cmd] : j.at("targets").items()) m.targets[name] = cmd.get<std::vector<std::string>>();
    return m;
}

RunnerManifest RunnerManifest::load(const fs::path& project_dir) {
    const fs::path p = project_dir / kManifestFile;
    if (!fs::exists(p)) throw GenerateError("no " + std::string(kManifestFile) + " in " + project_dir.string());
    return from_json(json::parse(read_text(p)));
}

json JitReplayManifest::to_json() const {
    json a = json::array();
    for (const JitArgument& arg : args)
        a.push_back({{"name", arg.name},
                     {"kind", std::string(kc::name_of(arg.kind))},
                     {"type", arg.type},
                     {"offset", arg.offset},
                     {"value", arg.value}});
    json meta = json::array();
    for (const auto& t : tensor_meta)
        meta.push_back({{"arg", t.arg}, {"dtype", t.dtype}, {"shape", json(t.shape)}, {"strides", json(t.strides)}});
    json cx = json::object();
    for (const auto& [k, v] : constexprs) cx[k] = v;
    return json{{"kernel", kernel},
                {"module", module.generic_string()},
                {"grid", dims(grid)},
                {"workgroup", dims(workgroup)},
                {"args", a},
                {"constexprs", cx},
                {"config", config ? kc::to_json(*config) : json(nullptr)},
                {"supplied", json(supplied)},
                {"autotuner_bypassed", autotuner_bypassed},
                {"tensor_meta", meta},
                {"code_object_sha256", code_object_sha256}};
}

JitReplayManifest JitReplayManifest::from_json(const json& j) {
    JitReplayManifest m;
    m.kernel = j.at("kernel").get<std::string>();
    m.module = j.at("module").get<std::string>();
    m.grid = dims_from(j.at("grid"));
    m.workgroup = dims_from(j.at("workgroup"));
    for (const json& a : j.at("args")) {
        auto kind = kc::param_kind_from(a.at("kind").get<std::string>());
        if (!kind) throw GenerateError("replay manifest: unknown argument kind");
        m.args.push_back({a.at("name").get<std::string>(), *kind, a.at("type").get<std::string>(),
                          a.at("offset").get<std::uint32_t>(), a.at("value")});
    }
    for (const auto& [k, v] : j.at("constexprs").items()) m.constexprs[k] = v.get<std::int64_t>();
    if (!j.at("config").is_null()) m.config = kc::config_from_json(j.at("config"));
    m.supplied = j.at("supplied").get<std::vector<std::string>>();
    m.autotuner_bypassed = j.at("autotuner_bypassed").get<bool>();
    for (const json& t : j.at("tensor_meta"))
        m.tensor_meta.push_back({t.at("arg").get<std::string>(), t.at("dtype").get<std::string>(),
                                 t.at("shape").get<std::vector<std::int64_t>>(),
                                 t.at("strides").get<std::vector<std::int64_t>>()});
    m.code_object_sha256 = j.at("code_object_sha256").get<std::string>();
    return m;
}

JitReplayManifest JitReplayManifest::load(const fs::path& project_dir) {
    const fs::path p = project_dir / kReplayManifest;
    if (!fs::exists(p)) throw GenerateError("no " + std::string(kReplayManifest) + " in " + project_dir.string());
    return from_json(json::parse(read_text(p)));
}

std::vector<JitArgument> reconstruct_arguments(ByteView kernarg, const std::vector<kc::KernargSlot>& layout,
                                               const std::vector<kc::ScriptParam>& signature) {
    std::vector<JitArgument> out;
    for (const kc::ScriptParam& p : signature) {
        if (p.kind == kc::ParamKind::Constexpr) continue;
        auto slot = std::find_if(layout.begin(), layout.end(), [&](const auto& s) { return s.name == p.name; });
        if (slot == layout.end()) throw GenerateError("argument '" + p.name + "' has no kernarg slot");
        if (slot->offset + slot->size > kernarg.size())
            throw GenerateError("kernarg buffer too short for argument '" + p.name + "'");
        const std::uint8_t* at = kernarg.data() + slot->offset;
        JitArgument arg{p.name, p.kind, p.type, slot->offset, nullptr};
        const std::string& t = slot->type;
        if (p.kind == kc::ParamKind::Pointer || slot->value_kind == kc::ValueKind::GlobalBuffer) {
            arg.value = hex_address(load_le<std::uint64_t>(at, 8));
        } else if (t == "f32") {
            arg.value = static_cast<double>(std::bit_cast<float>(load_le<std::uint32_t>(at, 4)));
        } else if (t == "f16") {
            arg.value = vdev::half_to_double(load_le<std::uint16_t>(at, 2));
        } else if (t == "i64") {
            arg.value = static_cast<std::int64_t>(load_le<std::uint64_t>(at, 8));
        } else {
            arg.value = load_le<std::uint64_t>(at, slot->size);
        }
        out.push_back(std::move(arg));
    }
    return out;
}

ReproducerProject generate_compiled(const fs::path& capture_dir, const sd::SourceResolution& resolution,
                                    const fs::path& out_dir) {
    const cap::CaptureBundle bundle = load_bundle(capture_dir);
    const fs::path tu = kc::normalize(resolution.translation_unit.value_or(resolution.kernel_file));
    if (!fs::is_regular_file(tu)) throw GenerateError("translation unit not readable: " + tu.string());

    fs::create_directories(out_dir);
    place_capture(capture_dir, out_dir);
    for (const char* stale : {kDepsDir, kOverlayFile, kVariantObject}) fs::remove_all(out_dir / stale);
    for (const auto& e : fs::directory_iterator(out_dir))
        if (e.path().stem() == kVariantStem) fs::remove(e.path());

    std::vector<fs::path> deps;
    for (const fs::path& f : resolution.dep_files) deps.push_back(kc::normalize(f));
    deps.push_back(kc::normalize(resolution.kernel_file));
    deps.erase(std::remove(deps.begin(), deps.end(), tu), deps.end());

    const std::string variant = std::string(kVariantStem) + tu.extension().string();
    fs::copy_file(tu, out_dir / variant, fs::copy_options::overwrite_existing);
    std::vector<OverlayMapping> mappings{{tu, variant}};
    fs::create_directories(out_dir / kDepsDir);
    for (const auto& [original, name] : flatten_names(deps)) {
        if (!fs::is_regular_file(original)) throw GenerateError("dependency not readable: " + original.string());
        fs::copy_file(original, out_dir / kDepsDir / name, fs::copy_options::overwrite_existing);
        mappings.emplace_back(original, std::string(kDepsDir) + "/" + name);
    }
    write_text(out_dir / kOverlayFile, emit_overlay(mappings));

    RunnerManifest m;
    m.language = "compiled";
    m.kernel_name = bundle.dispatch.kernel_name;
    m.mangled_symbol = bundle.dispatch.mangled_symbol;
    std::vector<std::string> compile;
    if (resolution.compile_command) {
        compile = resolution.compile_command->arguments;
        m.compile_directory = kc::normalize(resolution.compile_command->directory);
    } else {
        compile = {"kcc"};
        compile.insert(compile.end(), resolution.compile_flags.begin(), resolution.compile_flags.end());
        compile.push_back("-c");
        compile.push_back(tu.string());
        m.compile_directory = tu.parent_path();
    }
    for (const char* flag : {"-ivfsoverlay", kOverlayFile, "--device-only", "--no-bundle"}) compile.push_back(flag);
    m.targets["run"] = {"kcap", "replay", kCaptureDir};
    m.targets["recompile"] = compile;
    m.targets["run-variant"] = {"kcap", "replay", kCaptureDir, "--hsaco", kVariantObject};
    m.targets["validate-variant"] = {"kcap", "validate", kCaptureDir, "--hsaco", kVariantObject};
    write_text(out_dir / kManifestFile, m.to_json().dump(2) + "\n");
    spdlog::info("reprogen: compiled project at {} ({} deps)", out_dir.string(), deps.size());
    return {out_dir, m, std::nullopt};
}

ReproducerProject generate_jit(const fs::path& capture_dir, const sd::SourceResolution& resolution,
                               const fs::path& out_dir, const fs::path& name_map) {
    const cap::CaptureBundle bundle = load_bundle(capture_dir);
    const std::string& sha = bundle.dispatch.code_object_sha256;
    std::optional<kc::NameMapRecord> record;
    if (fs::exists(name_map)) record = kc::lookup_name_map(name_map, sha);
    if (!record) throw GenerateError("no name map record for code object " + sha);
    if (!resolution.module_file) throw GenerateError("resolution carries no scripted module");

    fs::create_directories(out_dir);
    place_capture(capture_dir, out_dir);
    fs::remove_all(out_dir / kJitSourceDir);
    fs::remove_all(out_dir / kVariantObject);

    const fs::path module = kc::normalize(*resolution.module_file);
    fs::path module_rel;
    if (resolution.package_root) {
        // The whole package, so relative imports keep working.
        const fs::path pkg = kc::normalize(*resolution.package_root);
        copy_tree(pkg, out_dir / kJitSourceDir / pkg.filename());
        module_rel = fs::path(kJitSourceDir) / pkg.filename() / fs::relative(module, pkg);
    } else {
        const fs::path base = module.parent_path();
        std::vector<fs::path> files{module};
        files.insert(files.end(), resolution.import_files.begin(), resolution.import_files.end());
        for (const fs::path& f : files) {
            const fs::path norm = kc::normalize(f);
            const fs::path rel = fs::relative(norm, base);
            const fs::path dest = out_dir / kJitSourceDir / (rel.empty() || *rel.begin() == ".." ? norm.filename() : rel);
            fs::create_directories(dest.parent_path());
            fs::copy_file(norm, dest, fs::copy_options::overwrite_existing);
        }
        module_rel = fs::path(kJitSourceDir) / module.filename();
    }

    JitReplayManifest jm;
    jm.kernel = record->kernel_name;
    jm.module = module_rel;
    jm.grid = bundle.dispatch.grid;
    jm.workgroup = bundle.dispatch.workgroup;
    jm.args = reconstruct_arguments(bundle.kernarg, kc::parse_kernarg_metadata(bundle.code_object, bundle.dispatch.mangled_symbol),
                                    record->signature);
    jm.constexprs = record->constexprs;
    jm.config = record->config;
    jm.supplied = record->supplied;
    jm.autotuner_bypassed = record->config.has_value();
    jm.tensor_meta = record->tensor_meta;
    jm.code_object_sha256 = sha;
    write_text(out_dir / kReplayManifest, jm.to_json().dump(2) + "\n");

    RunnerManifest m;
    m.language = "jit";
    m.kernel_name = bundle.dispatch.kernel_name;
    m.mangled_symbol = bundle.dispatch.mangled_symbol;
    m.targets["run"] = {"kcap", "replay", kCaptureDir};
    m.targets["recompile"] = {"kcap", "jit-compile", kReplayManifest, "-o", kVariantObject};
    m.targets["run-variant"] = {"kcap", "replay", kCaptureDir, "--hsaco", kVariantObject};
    m.targets["validate-variant"] = {"kcap", "validate", kCaptureDir, "--hsaco", kVariantObject};
    write_text(out_dir / kManifestFile, m.to_json().dump(2) + "\n");
    spdlog::info("reprogen: JIT project at {} ({})", out_dir.string(),
                 jm.autotuner_bypassed ? "autotuner bypassed" : "no autotuner");
    return {out_dir, m, jm};
}

}  // namespace kcap::rp
