#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "crisp/crisp_c.h"

namespace {

int fail() {
    std::fprintf(stderr, "error: %s\n", crisp_last_error());
    return 1;
}

struct ConfigHandle {
    crisp_config* ptr = nullptr;
    ConfigHandle() = default;
    ConfigHandle(const ConfigHandle&) = delete;
    ConfigHandle& operator=(const ConfigHandle&) = delete;
    ~ConfigHandle() { crisp_config_free(ptr); }
};

// Loads the config and applies overrides: CRISP_OUTPUT_DIR, --ablate, --init.
int load_config(const std::string& path, const std::vector<std::string>& ablate,
                const std::string& init, ConfigHandle& config) {
    if (crisp_config_load(path.c_str(), &config.ptr) != CRISP_OK) {
        return fail();
    }
    const char* env_dir = std::getenv("CRISP_OUTPUT_DIR");
    if (env_dir != nullptr && env_dir[0] != '\0' &&
        crisp_config_set_output_dir(config.ptr, env_dir) != CRISP_OK) {
        return fail();
    }
    for (const auto& which : ablate) {
        if (crisp_config_ablate(config.ptr, which.c_str()) != CRISP_OK) {
            return fail();
        }
    }
    if (!init.empty() &&
        crisp_config_set_init(config.ptr, init.c_str()) != CRISP_OK) {
        return fail();
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"continual video instance segmentation workbench"};
    app.require_subcommand(1);

    std::string config_path;
    bool force = false;
    std::vector<std::string> ablate;
    std::string init;
    std::string fr_indicator;
    unsigned workers = 1;
    std::string checkpoint_path;
    std::string out_dir;
    std::string report_path;

    auto* generate =
        app.add_subcommand("generate", "write per-step dataset files");
    generate->add_option("--config", config_path, "experiment config file")
        ->required();
    generate->add_flag("--force", force, "overwrite existing dataset files");

    auto* run = app.add_subcommand(
        "run", "train all steps and write report.json, logs, and checkpoints");
    run->add_option("--config", config_path, "experiment config file")
        ->required();
    run->add_option("--ablate", ablate,
                    "disable a component: no-arsp, no-isc, no-ic (repeatable)");
    run->add_option("--init", init,
                    "query initialization override: pca or replicate_average");
    run->add_option("--fr-indicator", fr_indicator,
                    "forgetting indicator: corrected or literal");
    run->add_option("--workers", workers, "evaluation worker threads (>= 1)");

    auto* diagnose = app.add_subcommand(
        "diagnose", "write query correlation/distance/embedding files");
    diagnose->add_option("checkpoint", checkpoint_path, "checkpoint file")
        ->required();
    diagnose->add_option("--out", out_dir,
                         "output directory (default: next to the checkpoint)");

    auto* report =
        app.add_subcommand("report", "render a report.json as readable text");
    report->add_option("report", report_path, "report.json path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            return app.exit(e);  // --help and friends
        }
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }

    if (generate->parsed()) {
        ConfigHandle config;
        if (int rc = load_config(config_path, {}, "", config); rc != 0) {
            return rc;
        }
        if (crisp_generate(config.ptr, force ? 1 : 0) != CRISP_OK) {
            return fail();
        }
        return 0;
    }
    if (run->parsed()) {
        ConfigHandle config;
        if (int rc = load_config(config_path, ablate, init, config); rc != 0) {
            return rc;
        }
        if (crisp_run(config.ptr, fr_indicator.empty() ? nullptr : fr_indicator.c_str(),
                      workers) != CRISP_OK) {
            return fail();
        }
        return 0;
    }
    if (diagnose->parsed()) {
        if (crisp_diagnose(checkpoint_path.c_str(),
                           out_dir.empty() ? nullptr : out_dir.c_str()) !=
            CRISP_OK) {
            return fail();
        }
        return 0;
    }
    if (report->parsed()) {
        char* text = nullptr;
        if (crisp_report(report_path.c_str(), &text) != CRISP_OK) {
            return fail();
        }
        std::fputs(text, stdout);
        crisp_string_free(text);
        return 0;
    }
    return 0;
}
