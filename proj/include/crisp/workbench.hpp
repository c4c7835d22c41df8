#pragma once

#include <string>

#include "crisp/continual.hpp"

namespace crisp {

// Everything one experiment needs, read from a strict sectioned config file.
// Unset keys keep the defaults below; unknown sections or keys are rejected
// with the file, line, and column.
struct ExperimentConfig {
    std::size_t n_ini = 4;   // [protocol]
    std::size_t n_inc = 2;
    std::size_t steps = 3;
    GeneratorConfig generator;  // [generator]; seed and num_categories derived
    ModelConfig model;          // [model]
    TrainConfig train;          // [train] + [ablation]
    std::string output_dir = "out";  // [output] dir
};

// Parses config text. `name` labels error messages ("name:line:col: ...").
ExperimentConfig parse_config(const std::string& text, const std::string& name);
ExperimentConfig load_config(const std::string& path);

ClassIncrementalProtocol protocol_of(const ExperimentConfig& config);
std::string step_dataset_path(const ExperimentConfig& config, std::size_t t);

// One structured text archive of the whole training state, headed by the
// version line "crisp-checkpoint v1". Round-trips bit-exactly.
void save_checkpoint(const ContinualState& state, const std::string& path);
ContinualState load_checkpoint(const std::string& path);

// Writes step{t}.json (+ feature sidecars) per protocol step into the output
// directory. Refuses to overwrite existing files unless `force`.
void cmd_generate(const ExperimentConfig& config, bool force);

struct RunOptions {
    FrIndicator fr_indicator = FrIndicator::corrected;
    std::size_t workers = 1;
};

// Trains the full protocol from the generated datasets; writes report.json,
// train_log.jsonl, and checkpoint-step{t}.txt into the output directory.
ExperimentReport cmd_run(const ExperimentConfig& config,
                         const RunOptions& options = {});

// Reads a checkpoint and writes correlation.txt, distances.txt, and
// embeddings.csv. Empty out_dir means next to the checkpoint.
void cmd_diagnose(const std::string& checkpoint_path, const std::string& out_dir);

// Renders a human-readable summary of a report.json (AP/AR scaled to 100).
std::string cmd_report(const std::string& report_path);

}  // namespace crisp
