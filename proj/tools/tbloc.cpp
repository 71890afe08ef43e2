// Command-line driver: reads a TOML experiment config, runs it and writes
// summary.json plus CSV tables into the output directory.

#include <CLI11.hpp>

#include <iostream>

#include "tbloc/cli/experiments.hpp"

namespace {

enum Exit { kOk = 0, kValidation = 2, kSolver = 3, kCheckFailed = 4 };

bool is_validation(const tbloc::Error& e) {
    return dynamic_cast<const tbloc::ConfigError*>(&e) || dynamic_cast<const tbloc::InvalidArgument*>(&e) ||
           dynamic_cast<const tbloc::GeometryError*>(&e) || dynamic_cast<const tbloc::DomainError*>(&e);
}

}  // namespace

int main(int argc, char** argv) {
    using namespace tbloc::cli;
    CLI::App app{"tight-binding locality experiments"};
    std::string config_path, out_dir, experiment;
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
    std::vector<std::string> overrides;
    app.add_option("--config", config_path, "experiment config (TOML)")->required()->check(CLI::ExistingFile);
    app.add_option("--out", out_dir, "output directory (default: config 'output')");
    app.add_option("--experiment", experiment, "override the experiment kind");
    app.add_option("--seed", seed, "random seed");
    app.add_option("--threads", threads, "worker threads (default: TBLOC_THREADS or 1)")->check(CLI::PositiveNumber);
    app.add_option("--set", overrides, "override a config value, key=value")->take_all();
    app.set_version_flag("--version", TBLOC_VERSION);
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kValidation;
    }

    if (!experiment.empty()) overrides.push_back("experiment=\"" + experiment + "\"");
    if (seed) overrides.push_back("seed=" + std::to_string(*seed));
    if (threads) overrides.push_back("threads=" + std::to_string(*threads));

    ExperimentConfig cfg;
    try {
        cfg = load_config(config_path, overrides);
    } catch (const tbloc::Error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kValidation;
    }
    if (!out_dir.empty()) cfg.output = out_dir;

    Report rep;
    int code = kOk;
    std::string status = "ok", error;
    try {
        run_experiment(cfg, rep);
        if (!rep.checks_passed) {
            code = kCheckFailed;
            status = "checks_failed";
        }
    } catch (const tbloc::Error& e) {
        code = is_validation(e) ? kValidation : kSolver;
        status = "error";
        error = e.what();
    } catch (const std::exception& e) {
        code = kSolver;
        status = "error";
        error = e.what();
    }
    try {
        write_report(cfg.output, cfg, rep, status, error);
    } catch (const std::exception& e) {
        std::cerr << "cannot write report: " << e.what() << "\n";
        return code == kOk ? kSolver : code;
    }
    if (!error.empty()) std::cerr << cfg.experiment << " failed: " << error << "\n";
    std::cout << cfg.experiment << ": " << status << " (" << cfg.output << "/summary.json)\n";
    return code;
}
