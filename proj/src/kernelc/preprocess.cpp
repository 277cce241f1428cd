#include "kcap/kernelc/preprocess.hpp"

#include <cctype>
#include <set>
#include <sstream>

namespace kcap::kc {

std::string PreprocessResult::text() const {
    std::string out;
    for (const auto& l : lines) {
        out += l.text;
        out += '\n';
    }
    return out;
}

namespace {

bool ident_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_'; }
bool ident_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

class Preprocessor {
public:
    Preprocessor(std::map<std::string, std::string> defines, std::vector<fs::path> include_dirs, unsigned max_depth,
                 SourceFs& files)
        : macros_(std::move(defines)), include_dirs_(std::move(include_dirs)), max_depth_(max_depth), files_(files) {}

    PreprocessResult run(const fs::path& source) {
        process(normalize(source), 0, "<command line>", 0);
        return std::move(result_);
    }

private:
    struct Cond {
        bool parent_active;
        bool taken;
        bool active;
        bool seen_else;
    };

    std::string substitute(const std::string& line) const {
        if (macros_.empty()) return line;
        std::string cur = line;
        for (int pass = 0; pass < 16; ++pass) {
            std::string out;
            bool changed = false;
            for (std::size_t i = 0; i < cur.size();) {
                if (ident_start(cur[i]) && (i == 0 || !ident_char(cur[i - 1]))) {
                    std::size_t j = i;
                    while (j < cur.size() && ident_char(cur[j])) ++j;
                    const std::string word = cur.substr(i, j - i);
                    auto it = macros_.find(word);
                    if (it != macros_.end()) {
                        out += it->second;
                        changed = true;
                    } else {
                        out += word;
                    }
                    i = j;
                } else {
                    out += cur[i++];
                }
            }
            if (!changed) return out;
            cur = std::move(out);
        }
        return cur;
    }

    fs::path resolve_include(const fs::path& includer, const std::string& name, const std::string& file, unsigned line) {
        const fs::path local = normalize(includer.parent_path() / name);
        if (files_.exists(local)) return local;
        for (const auto& dir : include_dirs_) {
            const fs::path candidate = normalize(dir / name);
            if (files_.exists(candidate)) return candidate;
        }
        throw SourceError(file, line, "include not found: \"" + name + "\"");
    }

    void process(const fs::path& path, unsigned depth, const std::string& from_file, unsigned from_line) {
        if (depth > max_depth_)
            throw SourceError(from_file, from_line,
                              "include depth exceeds " + std::to_string(max_depth_) + " at " + path.string());
        if (pragma_once_.count(path.string())) return;
        if (!files_.exists(path)) throw SourceError(from_file, from_line, "cannot open " + path.string());

        const std::string file = path.string();
        if (depth > 0 && seen_.insert(file).second) result_.included.push_back(file);

        std::istringstream in(files_.read(path));
        std::vector<Cond> conds;
        const auto active = [&] { return conds.empty() || conds.back().active; };
        std::string raw;
        unsigned line_no = 0;
        while (std::getline(in, raw)) {
            ++line_no;
            const std::string t = trim(raw);
            if (t.starts_with("#")) {
                std::istringstream d(t.substr(1));
                std::string directive;
                d >> directive;
                std::string rest;
                std::getline(d, rest);
                rest = trim(rest);
                if (directive == "ifdef" || directive == "ifndef") {
                    const bool defined = macros_.count(rest) > 0;
                    const bool cond = directive == "ifdef" ? defined : !defined;
                    const bool parent = active();
                    conds.push_back({parent, cond, parent && cond, false});
                } else if (directive == "else") {
                    if (conds.empty() || conds.back().seen_else) throw SourceError(file, line_no, "unexpected #else");
                    Cond& c = conds.back();
                    c.seen_else = true;
                    c.active = c.parent_active && !c.taken;
                } else if (directive == "endif") {
                    if (conds.empty()) throw SourceError(file, line_no, "unexpected #endif");
                    conds.pop_back();
                } else if (!active()) {
                    continue;
                } else if (directive == "include") {
                    if (rest.size() >= 2 && rest.front() == '"' && rest.back() == '"') {
                        process(resolve_include(path, rest.substr(1, rest.size() - 2), file, line_no), depth + 1, file,
                                line_no);
                    } else if (!(rest.size() >= 2 && rest.front() == '<')) {
                        throw SourceError(file, line_no, "malformed #include");
                    }
                } else if (directive == "define") {
                    std::istringstream def(rest);
                    std::string name;
                    def >> name;
                    if (name.empty() || !ident_start(name[0])) throw SourceError(file, line_no, "malformed #define");
                    std::string value;
                    std::getline(def, value);
                    macros_[name] = trim(value);
                } else if (directive == "undef") {
                    macros_.erase(rest);
                } else if (directive == "pragma") {
                    if (rest == "once") pragma_once_.insert(file);
                } else {
                    throw SourceError(file, line_no, "unknown directive #" + directive);
                }
                continue;
            }
            if (active()) result_.lines.push_back({substitute(raw), file, line_no});
        }
        if (!conds.empty()) throw SourceError(file, line_no, "unterminated conditional block");
    }

    std::map<std::string, std::string> macros_;
    std::vector<fs::path> include_dirs_;
    unsigned max_depth_;
    SourceFs& files_;
    std::set<std::string> pragma_once_;
    std::set<std::string> seen_;
    PreprocessResult result_;
};

}  // namespace

PreprocessResult preprocess(const fs::path& source, const std::map<std::string, std::string>& defines,
                            const std::vector<fs::path>& include_dirs, unsigned max_depth, SourceFs& files) {
    return Preprocessor(defines, include_dirs, max_depth, files).run(source);
}

PreprocessResult preprocess(const fs::path& source, const std::map<std::string, std::string>& defines,
                            const std::vector<fs::path>& include_dirs, unsigned max_depth) {
    SourceFs files;
    return preprocess(source, defines, include_dirs, max_depth, files);
}

}  // namespace kcap::kc
