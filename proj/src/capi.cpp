#include "crisp/crisp_c.h"

#include <cstdlib>
#include <cstring>
#include <string>

#include "crisp/errors.hpp"
#include "crisp/workbench.hpp"

namespace {

thread_local std::string g_last_error = "no error";

template <typename Fn>
crisp_status guard(Fn&& fn) {
    try {
        fn();
        return CRISP_OK;
    } catch (const crisp::ParamError& e) {
        g_last_error = e.what();
        return CRISP_ERR_PARAM;
    } catch (const crisp::ShapeError& e) {
        g_last_error = e.what();
        return CRISP_ERR_SHAPE;
    } catch (const crisp::DegenerateError& e) {
        g_last_error = e.what();
        return CRISP_ERR_DEGENERATE;
    } catch (const crisp::ContractError& e) {
        g_last_error = e.what();
        return CRISP_ERR_CONTRACT;
    } catch (const crisp::ConfigError& e) {
        g_last_error = e.what();
        return CRISP_ERR_CONFIG;
    } catch (const crisp::IoError& e) {
        g_last_error = e.what();
        return CRISP_ERR_IO;
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return CRISP_ERR_UNKNOWN;
    } catch (...) {
        g_last_error = "unknown error";
        return CRISP_ERR_UNKNOWN;
    }
}

crisp_status fail_param(const char* message) {
    g_last_error = message;
    return CRISP_ERR_PARAM;
}

}  // namespace

struct crisp_config {
    crisp::ExperimentConfig value;
};

extern "C" {

const char* crisp_last_error(void) { return g_last_error.c_str(); }

crisp_status crisp_config_load(const char* path, crisp_config** out) {
    if (path == nullptr || out == nullptr) {
        return fail_param("crisp_config_load: null argument");
    }
    *out = nullptr;
    return guard([&] {
        auto config = new crisp_config{crisp::load_config(path)};
        *out = config;
    });
}

crisp_status crisp_config_parse(const char* text, const char* name,
                                crisp_config** out) {
    if (text == nullptr || out == nullptr) {
        return fail_param("crisp_config_parse: null argument");
    }
    *out = nullptr;
    return guard([&] {
        auto config = new crisp_config{
            crisp::parse_config(text, name == nullptr ? "<memory>" : name)};
        *out = config;
    });
}

void crisp_config_free(crisp_config* config) { delete config; }

crisp_status crisp_config_set_output_dir(crisp_config* config,
                                         const char* dir) {
    if (config == nullptr || dir == nullptr || dir[0] == '\0') {
        return fail_param("crisp_config_set_output_dir: null or empty argument");
    }
    config->value.output_dir = dir;
    return CRISP_OK;
}

crisp_status crisp_config_ablate(crisp_config* config, const char* which) {
    if (config == nullptr || which == nullptr) {
        return fail_param("crisp_config_ablate: null argument");
    }
    if (std::strcmp(which, "no-arsp") == 0) {
        config->value.train.flags.use_arsp = false;
    } else if (std::strcmp(which, "no-isc") == 0) {
        config->value.train.flags.use_isc = false;
    } else if (std::strcmp(which, "no-ic") == 0) {
        config->value.train.flags.use_ic = false;
    } else {
        g_last_error = std::string("crisp_config_ablate: unknown component '") +
                       which + "' (expected no-arsp, no-isc, or no-ic)";
        return CRISP_ERR_PARAM;
    }
    return CRISP_OK;
}

crisp_status crisp_config_set_init(crisp_config* config, const char* strategy) {
    if (config == nullptr || strategy == nullptr) {
        return fail_param("crisp_config_set_init: null argument");
    }
    if (std::strcmp(strategy, "pca") == 0) {
        config->value.train.init_strategy = crisp::InitStrategy::pca;
    } else if (std::strcmp(strategy, "replicate_average") == 0) {
        config->value.train.init_strategy = crisp::InitStrategy::replicate_average;
    } else {
        g_last_error = std::string("crisp_config_set_init: unknown strategy '") +
                       strategy + "' (expected pca or replicate_average)";
        return CRISP_ERR_PARAM;
    }
    return CRISP_OK;
}

crisp_status crisp_generate(const crisp_config* config, int force) {
    if (config == nullptr) {
        return fail_param("crisp_generate: null config");
    }
    return guard([&] { crisp::cmd_generate(config->value, force != 0); });
}

crisp_status crisp_run(const crisp_config* config, const char* fr_indicator,
                       unsigned workers) {
    if (config == nullptr) {
        return fail_param("crisp_run: null config");
    }
    crisp::RunOptions options;
    if (fr_indicator != nullptr && fr_indicator[0] != '\0') {
        if (std::strcmp(fr_indicator, "corrected") == 0) {
            options.fr_indicator = crisp::FrIndicator::corrected;
        } else if (std::strcmp(fr_indicator, "literal") == 0) {
            options.fr_indicator = crisp::FrIndicator::literal;
        } else {
            g_last_error =
                std::string("crisp_run: unknown forgetting indicator '") +
                fr_indicator + "' (expected corrected or literal)";
            return CRISP_ERR_PARAM;
        }
    }
    if (workers == 0) {
        return fail_param("crisp_run: workers must be >= 1");
    }
    options.workers = workers;
    return guard([&] { crisp::cmd_run(config->value, options); });
}

crisp_status crisp_diagnose(const char* checkpoint_path, const char* out_dir) {
    if (checkpoint_path == nullptr) {
        return fail_param("crisp_diagnose: null checkpoint path");
    }
    return guard([&] {
        crisp::cmd_diagnose(checkpoint_path,
                            out_dir == nullptr ? std::string() : out_dir);
    });
}

crisp_status crisp_report(const char* report_path, char** out) {
    if (report_path == nullptr || out == nullptr) {
        return fail_param("crisp_report: null argument");
    }
    *out = nullptr;
    return guard([&] {
        std::string text = crisp::cmd_report(report_path);
        char* copy = static_cast<char*>(std::malloc(text.size() + 1));
        if (copy == nullptr) {
            throw std::bad_alloc();
        }
        std::memcpy(copy, text.c_str(), text.size() + 1);
        *out = copy;
    });
}

void crisp_string_free(char* text) { std::free(text); }

}  // extern "C"
