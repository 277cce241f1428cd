#include "kcap/kernelc/compile_db.hpp"

#include "kcap/common/files.hpp"
#include "kcap/kernelc/overlay.hpp"

#include <boost/program_options/parsers.hpp>
#include <json.hpp>

#include <stdexcept>

namespace kcap::kc {

fs::path CompileCommand::absolute_file() const {
    return normalize(file.is_absolute() ? file : directory / file);
}

std::vector<std::string> split_command_line(const std::string& command) {
    return boost::program_options::split_unix(command);
}

std::vector<CompileCommand> load_compile_db(const fs::path& path) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(read_text(path));
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(path.string() + ": " + e.what());
    }
    if (!doc.is_array()) throw std::runtime_error(path.string() + ": expected a JSON array");
    std::vector<CompileCommand> out;
    for (const auto& entry : doc) {
        CompileCommand cmd;
        cmd.directory = entry.at("directory").get<std::string>();
        cmd.file = entry.at("file").get<std::string>();
        if (entry.contains("arguments")) cmd.arguments = entry["arguments"].get<std::vector<std::string>>();
        else if (entry.contains("command")) cmd.arguments = split_command_line(entry["command"].get<std::string>());
        else throw std::runtime_error(path.string() + ": entry for " + cmd.file.string() + " has no command");
        out.push_back(std::move(cmd));
    }
    return out;
}

void save_compile_db(const fs::path& path, const std::vector<CompileCommand>& commands) {
    nlohmann::json doc = nlohmann::json::array();
    for (const auto& c : commands)
        doc.push_back({{"directory", c.directory.string()}, {"arguments", c.arguments}, {"file", c.file.string()}});
    write_text(path, doc.dump(2) + "\n");
}

DriverArgs parse_driver_args(const CompileCommand& command) {
    DriverArgs out;
    const auto& args = command.arguments;
    const auto resolve = [&](const std::string& p) { return normalize(fs::path(p).is_absolute() ? fs::path(p) : command.directory / p); };
    const auto take_value = [&](std::size_t& i, std::string_view flag) -> std::string {
        const std::string& a = args[i];
        if (a.size() > flag.size()) return a.substr(flag.size());
        if (i + 1 >= args.size()) throw std::invalid_argument("missing value after " + std::string(flag));
        return args[++i];
    };

    for (std::size_t i = 1; i < args.size(); ++i) {
        const std::string& a = args[i];
        if (a.starts_with("-D")) {
            const std::string def = take_value(i, "-D");
            const auto eq = def.find('=');
            out.defines[def.substr(0, eq)] = eq == std::string::npos ? "1" : def.substr(eq + 1);
            out.define_and_include_flags.push_back("-D" + def);
        } else if (a.starts_with("-I")) {
            const fs::path dir = resolve(take_value(i, "-I"));
            out.include_dirs.push_back(dir);
            out.define_and_include_flags.push_back("-I" + dir.string());
        } else if (a == "-o") {
            out.output = resolve(take_value(i, "-o"));
        } else if (a == "-ivfsoverlay") {
            out.overlay = resolve(take_value(i, "-ivfsoverlay"));
        } else if (a == "--device-only") {
            out.device_only = true;
        } else if (a == "--no-bundle") {
            out.no_bundle = true;
        } else if (a == "-g") {
            out.debug_info = true;
        } else if (a == "-c" || a.starts_with("-O") || a.starts_with("-std=") || a.starts_with("-W")) {
            // accepted, no effect on the toy toolchain
        } else if (a.starts_with("-")) {
            out.warnings.push_back("unknown flag ignored: " + a);
        } else {
            if (out.source) throw std::invalid_argument("multiple source files: " + out.source->string() + ", " + a);
            out.source = resolve(a);
        }
    }
    if (!out.source) throw std::invalid_argument("no source file in compile command");
    return out;
}

}  // namespace kcap::kc
