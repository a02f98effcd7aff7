// lilac — experiment runner CLI.
//
//   lilac gen|run|sweep|importance --config <file> [--seed N] [--out DIR] [--force]
//
// Exit codes: 0 success, 2 config/usage error, 3 runtime failure.

#include <cstdio>
#include <string>

#include "CLI11.hpp"
#include "lilac/runner.hpp"

using lilac::expctl::ConfigError;
using lilac::expctl::ExperimentConfig;

namespace {

struct CommonOpts {
    std::string config_path;
    unsigned long long seed = 0;
    bool seed_set = false;
    std::string out;
    bool force = false;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.config_path, "experiment config (JSON)")->required();
    cmd->add_option("--seed", o.seed, "run a single seed instead of the config's seed list")
        ->each([&](const std::string&) { o.seed_set = true; });
    cmd->add_option("--out", o.out, "output directory (overrides the config)");
    cmd->add_flag("--force", o.force, "overwrite existing outputs");
}

ExperimentConfig resolve(const CommonOpts& o) {
    ExperimentConfig c = lilac::expctl::load_config(o.config_path);
    if (o.seed_set) c.seeds = {static_cast<std::uint64_t>(o.seed)};
    if (!o.out.empty()) c.out = o.out;
    return c;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"lilac continual-learning laboratory"};
    app.set_version_flag("--version", lilac::expctl::kToolVersion);
    app.require_subcommand(1);

    CommonOpts gen_o, run_o, sweep_o, imp_o;
    CLI::App* gen = app.add_subcommand("gen", "generate dataset streams");
    CLI::App* run = app.add_subcommand("run", "train and evaluate per (baseline, seed)");
    CLI::App* sweep = app.add_subcommand("sweep", "baseline table across seeds");
    CLI::App* imp = app.add_subcommand("importance", "importance report and figure grids");
    add_common(gen, gen_o);
    add_common(run, run_o);
    add_common(sweep, sweep_o);
    add_common(imp, imp_o);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) lilac::expctl::cmd_gen(resolve(gen_o), gen_o.force);
        if (run->parsed()) lilac::expctl::cmd_run(resolve(run_o), run_o.force);
        if (sweep->parsed()) lilac::expctl::cmd_sweep(resolve(sweep_o), sweep_o.force);
        if (imp->parsed()) lilac::expctl::cmd_importance(resolve(imp_o), imp_o.force);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
    return 0;
}
