#include "kcap/kernelc/namemap.hpp"

#include "kcap/common/files.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <system_error>

namespace kcap::kc {

using nlohmann::json;

namespace {

class FileLock {
public:
    explicit FileLock(const fs::path& path) {
        fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
        if (fd_ < 0) throw std::system_error(errno, std::generic_category(), "open " + path.string());
        while (::flock(fd_, LOCK_EX) != 0) {
            if (errno != EINTR) {
                int err = errno;
                ::close(fd_);
                throw std::system_error(err, std::generic_category(), "flock " + path.string());
            }
        }
    }
    ~FileLock() {
        ::flock(fd_, LOCK_UN);
        ::close(fd_);
    }
    FileLock(const FileLock&) = delete;
    FileLock& operator=(const FileLock&) = delete;

private:
    int fd_ = -1;
};

json read_map_json(const fs::path& path) {
    if (!fs::exists(path)) return json::object();
    json j = json::parse(read_text(path));
    if (!j.is_object()) throw std::runtime_error(path.string() + ": name map is not a JSON object");
    return j;
}

json int_map(const std::map<std::string, std::int64_t>& m) {
    json j = json::object();
    for (const auto& [k, v] : m) j[k] = v;
    return j;
}

}  // namespace

json to_json(const AutotuneConfig& config) {
    return json{{"params", int_map(config.params)}, {"num_warps", config.num_warps}, {"num_stages", config.num_stages}};
}

AutotuneConfig config_from_json(const json& j) {
    AutotuneConfig c;
    c.params = j.at("params").get<std::map<std::string, std::int64_t>>();
    c.num_warps = j.at("num_warps").get<std::int64_t>();
    c.num_stages = j.at("num_stages").get<std::int64_t>();
    return c;
}

json to_json(const NameMapRecord& r) {
    json sig = json::array();
    for (const ScriptParam& p : r.signature)
        sig.push_back({{"name", p.name}, {"kind", std::string(name_of(p.kind))}, {"type", p.type}});
    json meta = json::array();
    for (const TensorMeta& t : r.tensor_meta)
        meta.push_back({{"arg", t.arg}, {"dtype", t.dtype}, {"shape", json(t.shape)}, {"strides", json(t.strides)}});
    json j{{"kernel_name", r.kernel_name},
           {"source_file", r.source_file},
           {"signature", sig},
           {"constexprs", int_map(r.constexprs)},
           {"tensor_meta", meta},
           {"autotune", nullptr}};
    if (r.config) j["autotune"] = {{"config", to_json(*r.config)}, {"supplied", json(r.supplied)}};
    return j;
}

NameMapRecord record_from_json(const json& j) {
    NameMapRecord r;
    r.kernel_name = j.at("kernel_name").get<std::string>();
    r.source_file = j.at("source_file").get<std::string>();
    for (const json& p : j.at("signature")) {
        auto kind = param_kind_from(p.at("kind").get<std::string>());
        if (!kind) throw std::runtime_error("name map: unknown parameter kind");
        r.signature.push_back({p.at("name").get<std::string>(), *kind, p.at("type").get<std::string>()});
    }
    r.constexprs = j.at("constexprs").get<std::map<std::string, std::int64_t>>();
    for (const json& t : j.at("tensor_meta"))
        r.tensor_meta.push_back({t.at("arg").get<std::string>(), t.at("dtype").get<std::string>(),
                                 t.at("shape").get<std::vector<std::int64_t>>(),
                                 t.at("strides").get<std::vector<std::int64_t>>()});
    const json& at = j.at("autotune");
    if (!at.is_null()) {
        r.config = config_from_json(at.at("config"));
        r.supplied = at.at("supplied").get<std::vector<std::string>>();
    }
    return r;
}

std::map<std::string, NameMapRecord> load_name_map(const fs::path& path) {
    std::map<std::string, NameMapRecord> out;
    const json j = read_map_json(path);
    for (const auto& [sha, rec] : j.items()) out.emplace(sha, record_from_json(rec));
    return out;
}

std::optional<NameMapRecord> lookup_name_map(const fs::path& path, const std::string& sha256) {
    json j = read_map_json(path);
    auto it = j.find(sha256);
    if (it == j.end()) return std::nullopt;
    return record_from_json(*it);
}

void update_name_map(const fs::path& path, const std::string& sha256, const NameMapRecord& record) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path lock_path = path;
    lock_path += ".lock";
    FileLock lock(lock_path);
    json j = read_map_json(path);
    j[sha256] = to_json(record);
    fs::path tmp = path;
    tmp += ".tmp";
    write_text(tmp, j.dump(2) + "\n");
    fs::rename(tmp, path);
}

}  // namespace kcap::kc
