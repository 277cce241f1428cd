#pragma once

#include "kcap/common/bytes.hpp"

#include <filesystem>
#include <string>

namespace kcap {

namespace fs = std::filesystem;

Bytes read_file(const fs::path& path);
std::string read_text(const fs::path& path);

void write_file(const fs::path& path, ByteView data);
void write_text(const fs::path& path, std::string_view text);

/// Creates parent directories as needed.
void write_file_mkdirs(const fs::path& path, ByteView data);

/// Recursive copy that overwrites existing files.
void copy_tree(const fs::path& from, const fs::path& to);

/// A scratch directory removed on destruction.
class TempDir {
public:
    explicit TempDir(std::string_view prefix = "kcap");
    ~TempDir();
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

}  // namespace kcap
