// Compiler driver for the kernel DSL: kcc [-D..] [-I..] [-g] [-c] [-o out]
// [-ivfsoverlay vfs.json] [--device-only] <file.ks>
#include "kcap/common/files.hpp"
#include "kcap/kernelc/compiler.hpp"

#include <iostream>

using namespace kcap;

int main(int argc, char** argv) {
    kc::CompileCommand cmd;
    cmd.directory = fs::current_path();
    cmd.arguments.assign(argv, argv + argc);
    try {
        const auto driver = kc::parse_driver_args(cmd);
        if (!driver.source) {
            std::cerr << "kcc: no input file\n";
            return 64;
        }
        cmd.file = *driver.source;
        const auto res = kc::compile_tu(cmd);
        for (const auto& w : res.warnings) std::cerr << "kcc: warning: " << w << "\n";
        fs::path out = res.output.value_or(fs::path(cmd.file).replace_extension(res.code_object ? ".kobj" : ".o"));
        write_file_mkdirs(out, res.bytes);
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "kcc: " << e.what() << "\n";
        return 1;
    }
}
