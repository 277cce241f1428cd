#pragma once

#include "kcap/kernelc/overlay.hpp"

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace kcap::kc {

struct SourceLine {
    std::string text;
    std::string file;
    unsigned line = 0;
};

class SourceError : public std::runtime_error {
public:
    SourceError(const std::string& file, unsigned line, const std::string& message)
        : std::runtime_error(file + ":" + std::to_string(line) + ": " + message), file_(file), line_(line) {}

    const std::string& file() const { return file_; }
    unsigned line() const { return line_; }

private:
    std::string file_;
    unsigned line_;
};

struct PreprocessResult {
    std::vector<SourceLine> lines;
    /// Every file pulled in by #include, in first-inclusion order.
    std::vector<std::string> included;

    std::string text() const;
};

inline constexpr unsigned kDefaultMaxIncludeDepth = 5;

/// Handles #include "...", #define/#undef, #ifdef/#ifndef/#else/#endif and
/// #pragma once. Object-like macros are substituted into surviving lines.
/// Angle-bracket includes are ignored.
PreprocessResult preprocess(const fs::path& source, const std::map<std::string, std::string>& defines,
                            const std::vector<fs::path>& include_dirs, unsigned max_depth, SourceFs& files);

PreprocessResult preprocess(const fs::path& source, const std::map<std::string, std::string>& defines = {},
                            const std::vector<fs::path>& include_dirs = {},
                            unsigned max_depth = kDefaultMaxIncludeDepth);

}  // namespace kcap::kc
