#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace kcap::kc {

namespace fs = std::filesystem;

struct CompileCommand {
    fs::path directory;
    std::vector<std::string> arguments;  // tool first
    fs::path file;

    fs::path absolute_file() const;
};

/// Reads a compilation database: an array of {directory, arguments | command, file}.
std::vector<CompileCommand> load_compile_db(const fs::path& path);
void save_compile_db(const fs::path& path, const std::vector<CompileCommand>& commands);

std::vector<std::string> split_command_line(const std::string& command);

/// What the compile driver understands from an argument list.
struct DriverArgs {
    std::map<std::string, std::string> defines;
    std::vector<fs::path> include_dirs;  // absolute
    std::optional<fs::path> output;      // absolute
    std::optional<fs::path> overlay;     // absolute
    std::optional<fs::path> source;      // absolute
    bool device_only = false;
    bool no_bundle = false;
    bool debug_info = false;
    std::vector<std::string> warnings;
    /// -D flags as spelled (joined form) and -I flags with absolute paths.
    std::vector<std::string> define_and_include_flags;
};

DriverArgs parse_driver_args(const CompileCommand& command);

}  // namespace kcap::kc
