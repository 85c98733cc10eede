// Experiment runner over the fedattn shared library's C API.
//
//   fedattn_cli run <spec.json> [--out DIR] [--seeds 1,2,3] [--threads K]
//   fedattn_cli bounds <spec.json> [--out DIR] [--seeds 1,2,3] [--threads K]
//
// Exit codes: 0 success, 2 config error, 3 numerical degeneracy, 1 other.

#include <cstdio>
#include <string>

#include <CLI11.hpp>

#include "fedattn/fedattn.h"

namespace {

int map_exit_code(int status) {
    switch (status) {
        case FA_OK: return 0;
        case FA_ERR_CONFIG: return 2;
        case FA_ERR_NUMERIC: return 3;
        default: return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"fedattn experiment runner"};
    app.set_version_flag("--version", fa_version());
    app.require_subcommand(1);

    std::string spec_path;
    std::string out_dir;
    std::string seeds;
    int threads = 1;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("spec", spec_path, "experiment spec JSON file")->required();
        cmd->add_option("--out", out_dir, "output directory (overrides the spec)");
        cmd->add_option("--seeds", seeds, "comma-separated seed list (overrides the spec)");
        cmd->add_option("--threads", threads, "worker threads for the sweep")
            ->check(CLI::PositiveNumber);
    };

    CLI::App* run = app.add_subcommand("run", "run the sweep and write results/summary CSVs");
    add_common(run);
    CLI::App* bounds = app.add_subcommand("bounds", "write the bound-vs-measurement CSV");
    add_common(bounds);

    CLI11_PARSE(app, argc, argv);

    int status = FA_OK;
    if (run->parsed()) {
        status = fa_run_experiment(spec_path.c_str(), out_dir.empty() ? nullptr : out_dir.c_str(),
                                   seeds.empty() ? nullptr : seeds.c_str(), threads);
    } else {
        status = fa_emit_bounds(spec_path.c_str(), out_dir.empty() ? nullptr : out_dir.c_str(),
                                seeds.empty() ? nullptr : seeds.c_str(), threads);
    }
    if (status != FA_OK) {
        std::fprintf(stderr, "error: %s\n", fa_last_error());
        return map_exit_code(status);
    }
    return 0;
}
