#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "crisp/decoder.hpp"
#include "crisp/losses.hpp"
#include "crisp/matrix.hpp"
#include "crisp/prompts.hpp"
#include "crisp/synthbench.hpp"

namespace crisp {

// A class-incremental schedule: n_ini categories first, then n_inc new
// categories per later step, pairwise disjoint.
struct ClassIncrementalProtocol {
    std::size_t n_ini = 0;
    std::size_t n_inc = 0;
    std::size_t steps = 0;
    std::vector<std::vector<std::size_t>> class_sets;
};

// Consecutive category ids in step order: {0..n_ini-1}, then n_inc per step.
ClassIncrementalProtocol make_protocol(std::size_t n_ini, std::size_t n_inc,
                                       std::size_t steps);
void validate_protocol(const ClassIncrementalProtocol& protocol);

enum class InitStrategy { pca, replicate_average };

// Component toggles mirroring the ablation table. The correlation and
// contrast losses are independent; the contrast loss has nothing to score
// when the prompt path is off and silently contributes zero there.
struct AblationFlags {
    bool use_arsp = true;  // prompt pool, matching, and injection
    bool use_isc = true;   // query-prompt contrast loss
    bool use_ic = true;    // query-correlation retention loss
};

struct TrainConfig {
    double learning_rate = 0.05;  // plain SGD diverges well below 0.5 here
    std::size_t iterations_per_step = 200;
    std::size_t batch_size = 8;
    std::uint64_t seed = 1;
    LossWeights weights;
    InitStrategy init_strategy = InitStrategy::pca;
    Similarity similarity = Similarity::frobenius;
    AblationFlags flags;
    // Naive baseline: nothing is ever frozen, no prompts, no extra losses.
    bool finetune = false;
    double no_object_weight = 0.1;
    // Global-norm cap on each update's stacked gradient; 0 disables. Fixed-rate
    // SGD on the mask losses occasionally hits a runaway-logit spiral without
    // it.
    double gradient_clip = 5.0;
};

struct ModelConfig {
    std::size_t dim = 16;
    std::size_t ffn_dim = 32;
    std::size_t layers = 2;
    std::size_t queries_per_category = 5;  // base-step query multiplier
};

struct QuerySegment {
    std::size_t task = 0;
    std::size_t row_begin = 0;
    std::size_t row_end = 0;  // half-open
    bool frozen = false;
};

struct QuerySet {
    Matrix matrix;  // N x d
    std::vector<QuerySegment> segments;
    // Full query matrix captured right after the step's initialization; the
    // reference the correlation loss pulls toward during the step.
    Matrix step_start_snapshot;
};

struct ContinualState {
    ModelConfig model;
    PromptGenerator generator;  // fixed text-embedding stand-in + projection
    DecoderStack decoder;
    QuerySet queries;
    std::vector<PromptPool> pools;              // one per step, task order
    std::vector<std::size_t> seen_categories;   // class-head row order
    std::size_t completed_steps = 0;
    bool step_open = false;
};

// Principal-component initialization for new query rows: run PCA on the old
// queries with c_prev components, keep the top-c_t rows by norm (descending,
// ties toward the lower index), and rescale by a_ori/a_pca so the mean norm
// matches the old rows. Each returned row norm equals its component norm
// times a_ori/a_pca. When c_t > c_prev, all components are kept and the
// remainder are seeded unit perturbations of the top component scaled to
// a_ori.
Matrix pca_guided_init(const Matrix& q_o, std::size_t c_prev, std::size_t c_t,
                       std::uint64_t seed = 0);

// Baseline initialization: c_t copies of the column-mean row of q_o.
Matrix replicate_average_init(const Matrix& q_o, std::size_t c_t);

ContinualState make_state(const ModelConfig& model, const TrainConfig& config);

// Opens step t: freezes all prior query segments and pools, initializes the
// new query rows (fresh seeded rows at t = 0, the configured strategy
// afterwards), creates the step's prompt pool, widens the class head by the
// step's categories, and records the step-start snapshot.
void begin_step(ContinualState& state, const ClassIncrementalProtocol& protocol,
                std::size_t t, const TrainConfig& config);

struct IterationLog {
    std::size_t iteration = 0;
    std::vector<std::size_t> batch;  // video ids drawn this iteration
    LossReport loss;
};

// Plain SGD over the step's trainable parameters; batches drawn with
// replacement in a fixed seeded order. Frozen parameters are tape constants
// and therefore bit-identical afterwards. Closes the step.
std::vector<IterationLog> run_step(ContinualState& state,
                                   const std::vector<SyntheticVideo>& train_videos,
                                   const TrainConfig& config);

// Inference readout for one video: no injection, all queries, one track
// prediction per query.
std::vector<TrackPrediction> predict_video(const ContinualState& state,
                                           const SyntheticVideo& video);

struct StepMetrics {
    std::size_t step = 0;
    std::vector<std::size_t> classes;
    EvalReport eval;  // cumulative validation over all classes seen so far
};

struct ExperimentReport {
    std::vector<StepMetrics> steps;
    ForgettingLedger ledger;
    std::vector<std::vector<IterationLog>> training_logs;  // per step
};

// Full protocol driver: begin_step + run_step per step, then evaluation on
// the union of validation videos seen so far. `on_step` (optional) observes
// the state after each step, e.g. to write checkpoints. `eval_workers` > 1
// fans the per-video prediction pass across threads; results are reduced in
// video order, so the report is identical at any worker count.
ExperimentReport run_protocol(
    const ClassIncrementalProtocol& protocol, const std::vector<Dataset>& datasets,
    const ModelConfig& model, const TrainConfig& config,
    const std::function<void(const ContinualState&, std::size_t)>& on_step = {},
    std::size_t eval_workers = 1);

}  // namespace crisp
