#include "crisp/continual.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <numeric>
#include <set>
#include <string>
#include <thread>

#include "crisp/errors.hpp"
#include "crisp/pca.hpp"
#include "crisp/rng.hpp"
#include "crisp/tape.hpp"

namespace crisp {

ClassIncrementalProtocol make_protocol(std::size_t n_ini, std::size_t n_inc,
                                       std::size_t steps) {
    if (n_ini == 0 || steps == 0 || (steps > 1 && n_inc == 0)) {
        throw ParamError("make_protocol: counts must be positive");
    }
    ClassIncrementalProtocol p;
    p.n_ini = n_ini;
    p.n_inc = n_inc;
    p.steps = steps;
    std::size_t next = 0;
    for (std::size_t t = 0; t < steps; ++t) {
        std::vector<std::size_t> classes;
        std::size_t count = t == 0 ? n_ini : n_inc;
        for (std::size_t i = 0; i < count; ++i) classes.push_back(next++);
        p.class_sets.push_back(std::move(classes));
    }
    return p;
}

void validate_protocol(const ClassIncrementalProtocol& protocol) {
    if (protocol.steps == 0 || protocol.class_sets.size() != protocol.steps) {
        throw ContractError("protocol: " + std::to_string(protocol.class_sets.size()) +
                            " class sets for " + std::to_string(protocol.steps) +
                            " steps");
    }
    std::set<std::size_t> seen;
    for (std::size_t t = 0; t < protocol.steps; ++t) {
        std::size_t expected = t == 0 ? protocol.n_ini : protocol.n_inc;
        if (protocol.class_sets[t].size() != expected) {
            throw ContractError("protocol: step " + std::to_string(t) + " has " +
                                std::to_string(protocol.class_sets[t].size()) +
                                " classes, expected " + std::to_string(expected));
        }
        for (std::size_t c : protocol.class_sets[t]) {
            if (!seen.insert(c).second) {
                throw ContractError("protocol: category " + std::to_string(c) +
                                    " appears in more than one step");
            }
        }
    }
}

Matrix pca_guided_init(const Matrix& q_o, std::size_t c_prev, std::size_t c_t,
                       std::uint64_t seed) {
    if (q_o.rows() < 2) {
        throw ContractError("pca_guided_init: need at least 2 old query rows, got " +
                            std::to_string(q_o.rows()));
    }
    if (c_prev == 0 || c_prev > std::min(q_o.rows(), q_o.cols())) {
        throw ContractError("pca_guided_init: c_prev " + std::to_string(c_prev) +
                            " out of range for " + std::to_string(q_o.rows()) + "x" +
                            std::to_string(q_o.cols()) + " queries");
    }
    if (c_t == 0) {
        throw ContractError("pca_guided_init: c_t must be positive");
    }

    PcaResult pr = pca(q_o, c_prev);
    const std::size_t d = q_o.cols();

    std::vector<double> norms(c_prev);
    double a_pca = 0.0;
    for (std::size_t i = 0; i < c_prev; ++i) {
        double ss = 0.0;
        for (std::size_t j = 0; j < d; ++j) ss += pr.components(i, j) * pr.components(i, j);
        norms[i] = std::sqrt(ss);
        a_pca += norms[i];
    }
    a_pca /= static_cast<double>(c_prev);
    if (a_pca < 1e-12) {
        throw DegenerateError("pca_guided_init: degenerate variance, mean component norm " +
                              format_double(a_pca));
    }

    double a_ori = 0.0;
    for (std::size_t i = 0; i < q_o.rows(); ++i) {
        double ss = 0.0;
        for (std::size_t j = 0; j < d; ++j) ss += q_o(i, j) * q_o(i, j);
        a_ori += std::sqrt(ss);
    }
    a_ori /= static_cast<double>(q_o.rows());

    std::vector<std::size_t> order(c_prev);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return norms[a] > norms[b]; });

    const double rescale = a_ori / a_pca;
    Matrix out(c_t, d);
    const std::size_t taken = std::min(c_t, c_prev);
    for (std::size_t i = 0; i < taken; ++i) {
        for (std::size_t j = 0; j < d; ++j) out(i, j) = rescale * pr.components(order[i], j);
    }

    if (c_t > c_prev) {
        // More new rows than components: perturb the top direction, keep the
        // old mean norm.
        const std::size_t top = order[0];
        SeededRng rng(derive_seed(seed, "init-augment"));
        for (std::size_t e = c_prev; e < c_t; ++e) {
            std::vector<double> v(d);
            double ss = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                v[j] = pr.components(top, j) / norms[top] + 0.25 * rng.gaussian();
                ss += v[j] * v[j];
            }
            double norm = std::sqrt(ss);
            for (std::size_t j = 0; j < d; ++j) out(e, j) = a_ori * v[j] / norm;
        }
    }
    return out;
}

Matrix replicate_average_init(const Matrix& q_o, std::size_t c_t) {
    if (q_o.rows() == 0) {
        throw ContractError("replicate_average_init: no old query rows");
    }
    if (c_t == 0) {
        throw ContractError("replicate_average_init: c_t must be positive");
    }
    Matrix out(c_t, q_o.cols());
    for (std::size_t j = 0; j < q_o.cols(); ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < q_o.rows(); ++i) mean += q_o(i, j);
        mean /= static_cast<double>(q_o.rows());
        for (std::size_t r = 0; r < c_t; ++r) out(r, j) = mean;
    }
    return out;
}

ContinualState make_state(const ModelConfig& model, const TrainConfig& config) {
    if (model.dim == 0 || model.ffn_dim == 0 || model.layers == 0 ||
        model.queries_per_category == 0) {
        throw ParamError("make_state: model dimensions must be positive");
    }
    if (!(config.learning_rate > 0.0)) {
        throw ParamError("make_state: learning rate must be positive");
    }
    if (config.batch_size == 0) {
        throw ParamError("make_state: batch size must be positive");
    }
    ContinualState state;
    state.model = model;
    state.generator =
        PromptGenerator::make(derive_seed(config.seed, "prompt-generator"), model.dim);
    state.decoder = make_decoder_stack(derive_seed(config.seed, "decoder"), model.dim,
                                       model.ffn_dim, model.layers, 0);
    state.queries.matrix = Matrix(0, model.dim);
    return state;
}

namespace {

Matrix rows_copy(const Matrix& m, std::size_t begin, std::size_t end) {
    Matrix out(end - begin, m.cols());
    for (std::size_t r = begin; r < end; ++r) {
        for (std::size_t c = 0; c < m.cols(); ++c) out(r - begin, c) = m(r, c);
    }
    return out;
}

Matrix append_rows(const Matrix& m, const Matrix& extra) {
    Matrix out(m.rows() + extra.rows(), extra.cols());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t c = 0; c < m.cols(); ++c) out(r, c) = m(r, c);
    }
    for (std::size_t r = 0; r < extra.rows(); ++r) {
        for (std::size_t c = 0; c < extra.cols(); ++c) out(m.rows() + r, c) = extra(r, c);
    }
    return out;
}

Matrix seeded_rows(std::uint64_t seed, std::size_t rows, std::size_t cols) {
    SeededRng rng(seed);
    Matrix out(rows, cols);
    double scale = 1.0 / std::sqrt(static_cast<double>(cols));
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = scale * rng.gaussian();
    return out;
}

}  // namespace

void begin_step(ContinualState& state, const ClassIncrementalProtocol& protocol,
                std::size_t t, const TrainConfig& config) {
    validate_protocol(protocol);
    if (t >= protocol.steps) {
        throw ContractError("begin_step: step " + std::to_string(t) +
                            " out of range for " + std::to_string(protocol.steps) +
                            " steps");
    }
    if (state.step_open) {
        throw ContractError("begin_step: previous step still open");
    }
    if (t != state.completed_steps) {
        throw ContractError("begin_step: expected step " +
                            std::to_string(state.completed_steps) + " next, got " +
                            std::to_string(t));
    }

    const std::vector<std::size_t>& classes = protocol.class_sets[t];
    const std::size_t c_t = classes.size();
    const std::size_t d = state.model.dim;

    for (QuerySegment& seg : state.queries.segments) seg.frozen = true;
    for (PromptPool& pool : state.pools) pool.trainable = false;

    Matrix new_rows;
    if (t == 0) {
        new_rows = seeded_rows(derive_seed(config.seed, "base-queries"),
                               state.model.queries_per_category * protocol.n_ini, d);
    } else if (config.init_strategy == InitStrategy::pca) {
        new_rows = pca_guided_init(state.queries.matrix, state.seen_categories.size(),
                                   c_t, derive_seed(config.seed, "init"));
    } else {
        new_rows = replicate_average_init(state.queries.matrix, c_t);
    }

    QuerySegment segment;
    segment.task = t;
    segment.row_begin = state.queries.matrix.rows();
    segment.row_end = segment.row_begin + new_rows.rows();
    segment.frozen = false;
    state.queries.matrix = append_rows(state.queries.matrix, new_rows);
    state.queries.segments.push_back(segment);

    PromptPool pool;
    pool.task_id = t;
    for (std::size_t c : classes) {
        pool.category_names.push_back("category-" + std::to_string(c));
    }
    pool.tokens = Matrix(c_t, d);  // residuals start at zero
    pool.prompts = generate_prompts(state.generator, pool.category_names, pool.tokens);
    pool.trainable = true;
    state.pools.push_back(std::move(pool));

    Matrix head_rows = seeded_rows(
        derive_seed(derive_seed(config.seed, "class-head"), t), c_t, d);
    state.decoder.class_head = append_rows(state.decoder.class_head, head_rows);
    for (std::size_t c : classes) state.seen_categories.push_back(c);

    state.queries.step_start_snapshot = state.queries.matrix;
    state.step_open = true;
}

namespace {

// Maps a trainable tape leaf back onto the state matrix rows it was copied
// from, for the gradient write-back.
struct Binding {
    Var var;
    Matrix* target;
    std::size_t row_begin;
};

struct TapeSetup {
    StackVars stack;
    Var queries;
    std::vector<Var> pool_prompts;
    Var current_pool_prompts;
    std::vector<Binding> bindings;
};

TapeSetup build_vars(Tape& tape, ContinualState& state, const TrainConfig& config,
                     bool with_prompts) {
    TapeSetup s;
    const std::size_t t = state.queries.segments.back().task;

    auto leaf_of = [&](Matrix& m, std::size_t row_begin) {
        Var v = tape.leaf(m);
        s.bindings.push_back({v, &m, row_begin});
        return v;
    };

    // Only task-owned parameters freeze (old query segments, old pools, old
    // class-head rows); the shared decoder keeps training at every step.
    for (DecoderLayer& layer : state.decoder.layers) {
        LayerVars lv;
        lv.w_q = leaf_of(layer.w_q, 0);
        lv.w_k = leaf_of(layer.w_k, 0);
        lv.w_v = leaf_of(layer.w_v, 0);
        lv.w_o = leaf_of(layer.w_o, 0);
        lv.ffn_w1 = leaf_of(layer.ffn_w1, 0);
        lv.ffn_b1 = leaf_of(layer.ffn_b1, 0);
        lv.ffn_w2 = leaf_of(layer.ffn_w2, 0);
        lv.ffn_b2 = leaf_of(layer.ffn_b2, 0);
        s.stack.layers.push_back(lv);
    }
    s.stack.mask_embed_head = leaf_of(state.decoder.mask_embed_head, 0);

    Matrix& head = state.decoder.class_head;
    const std::size_t new_head_rows = state.pools.back().category_names.size();
    const std::size_t frozen_head =
        (config.finetune || t == 0) ? 0 : head.rows() - new_head_rows;
    if (frozen_head == 0) {
        s.stack.class_head = leaf_of(head, 0);
    } else {
        Var frozen = tape.constant(rows_copy(head, 0, frozen_head));
        Var open = tape.leaf(rows_copy(head, frozen_head, head.rows()));
        s.bindings.push_back({open, &head, frozen_head});
        s.stack.class_head = tape.concat_rows({frozen, open});
    }

    Matrix& q = state.queries.matrix;
    const QuerySegment& newest = state.queries.segments.back();
    const std::size_t frozen_q = config.finetune ? 0 : newest.row_begin;
    if (frozen_q == 0) {
        s.queries = leaf_of(q, 0);
    } else {
        Var frozen = tape.constant(rows_copy(q, 0, frozen_q));
        Var open = tape.leaf(rows_copy(q, frozen_q, q.rows()));
        s.bindings.push_back({open, &q, frozen_q});
        s.queries = tape.concat_rows({frozen, open});
    }

    if (with_prompts) {
        for (PromptPool& pool : state.pools) {
            Var tokens = pool.trainable ? leaf_of(pool.tokens, 0)
                                        : tape.constant(pool.tokens);
            s.pool_prompts.push_back(
                generate_prompts(tape, state.generator, pool.category_names, tokens));
        }
        s.current_pool_prompts = s.pool_prompts.back();
    }
    return s;
}

double plain_sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Assignment cost in the detection style: class probability plus soft-dice
// plus mean binary cross-entropy, lower is better.
Matrix match_cost(const Matrix& class_logits, const std::vector<Matrix>& mask_logits,
                  const std::vector<MaskTarget>& targets) {
    const std::size_t n = class_logits.rows(), m = targets.size();
    Matrix probs = softmax_rows(class_logits);
    Matrix cost(n, m);
    for (std::size_t q = 0; q < n; ++q) {
        for (std::size_t k = 0; k < m; ++k) {
            double inter = 0.0, den = 0.0, bce = 0.0;
            std::size_t count = 0;
            for (std::size_t f = 0; f < mask_logits.size(); ++f) {
                const Matrix& logits = mask_logits[f];
                const std::vector<std::uint8_t>& gt = targets[k].masks[f];
                for (std::size_t px = 0; px < logits.cols(); ++px) {
                    double sig = plain_sigmoid(logits(q, px));
                    double target = gt[px] ? 1.0 : 0.0;
                    inter += sig * target;
                    den += sig + target;
                    bce -= target * std::log(std::max(sig, 1e-300)) +
                           (1.0 - target) * std::log(std::max(1.0 - sig, 1e-300));
                    ++count;
                }
            }
            double dice = den > 0.0 ? 2.0 * inter / den : 1.0;
            cost(q, k) = -probs(q, class_column(targets[k].category)) + (1.0 - dice) +
                         bce / static_cast<double>(count);
        }
    }
    return cost;
}

std::vector<MaskTarget> targets_of(const SyntheticVideo& video) {
    std::vector<MaskTarget> targets;
    for (const Instance& inst : video.instances) {
        MaskTarget target;
        target.category = inst.category;
        target.masks = inst.masks;
        targets.push_back(std::move(target));
    }
    return targets;
}

}  // namespace

namespace {

// Which parts of the loss are live this step.
struct StepPlan {
    bool with_prompts = false;
    bool with_isc = false;
    bool with_ic = false;
    ForwardMode mode = ForwardMode::infer;
};

IterationLog run_iteration(ContinualState& state,
                           const std::vector<SyntheticVideo>& train_videos,
                           const TrainConfig& config,
                           const std::vector<std::size_t>& batch, std::size_t iter,
                           const StepPlan& plan, const QuerySegment& newest,
                           const std::vector<std::vector<Matrix>>& ic_reference) {
    Tape tape;
    TapeSetup s = build_vars(tape, state, config, plan.with_prompts);

    Var ic_main;
    double ic_value = 0.0;
    if (plan.with_ic) {
        ic_main = ic_loss(tape, s.queries, state.queries.step_start_snapshot);
        ic_value = tape.value(ic_main)(0, 0);
    }

    Var batch_sum;
    bool have_sum = false;
    double seg_sum = 0.0, isc_sum = 0.0;
    std::vector<double> aux_sum(state.model.layers, 0.0);

    for (std::size_t b = 0; b < config.batch_size; ++b) {
        const SyntheticVideo& video = train_videos[batch[b]];
        std::vector<Var> frames;
        for (const Matrix& f : video.pixel_features) {
            frames.push_back(tape.constant(f));
        }
        ForwardVars fwd = forward(tape, s.stack, s.queries, frames, plan.mode,
                                  s.pool_prompts, config.similarity);

        std::vector<MaskTarget> targets = targets_of(video);
        Matrix cost = match_cost(
            tape.value(fwd.class_logits), [&] {
                std::vector<Matrix> values;
                for (Var v : fwd.mask_logits) values.push_back(tape.value(v));
                return values;
            }(),
            targets);
        for (std::size_t i = 0; i < cost.size(); ++i) {
            // A poisoned forward pass would poison the loss; report it
            // before the matcher chews on non-finite costs.
            if (!std::isfinite(cost.data()[i])) {
                throw DegenerateError("non-finite matching cost");
            }
        }
        // Frozen queries cannot learn from a match, and letting them win
        // starves the trainable rows of positive supervision while teaching
        // the fresh class-head rows to fire on old-query outputs. Steer
        // assignments to the trainable segment; frozen rows only absorb
        // instances the segment is too small to cover.
        if (!config.finetune && newest.row_begin > 0) {
            for (std::size_t q = 0; q < cost.rows(); ++q) {
                if (q >= newest.row_begin && q < newest.row_end) continue;
                for (std::size_t k = 0; k < cost.cols(); ++k) {
                    cost(q, k) += 1e6;
                }
            }
        }
        Assignment assignment = hungarian_match(cost);
        Var video_loss;
        if (!config.finetune && newest.row_begin > 0) {
            // Labels cover only the newest task's categories and the frozen
            // rows cannot learn; supervising them toward no-object would only
            // teach the shared decoder to mute old tasks. Run the loss on the
            // trainable segment alone, dropping overflow pairs that steering
            // parked on frozen rows.
            Assignment local;
            std::vector<bool> matched(newest.row_end - newest.row_begin, false);
            for (auto [q, k] : assignment.pairs) {
                if (q >= newest.row_begin && q < newest.row_end) {
                    local.pairs.emplace_back(q - newest.row_begin, k);
                    matched[q - newest.row_begin] = true;
                }
            }
            for (std::size_t q = 0; q < matched.size(); ++q) {
                if (!matched[q]) local.unmatched_queries.push_back(q);
            }
            Var cls =
                tape.slice_rows(fwd.class_logits, newest.row_begin, newest.row_end);
            std::vector<Var> masks;
            for (Var m : fwd.mask_logits) {
                masks.push_back(tape.slice_rows(m, newest.row_begin, newest.row_end));
            }
            video_loss =
                seg_loss(tape, cls, masks, targets, local, config.no_object_weight);
        } else {
            video_loss = seg_loss(tape, fwd.class_logits, fwd.mask_logits, targets,
                                  assignment, config.no_object_weight);
        }
        seg_sum += tape.value(video_loss)(0, 0);

        if (plan.with_isc) {
            Var current = tape.slice_rows(fwd.refined_queries.back(),
                                          newest.row_begin, newest.row_end);
            Var sim = similarity_matrix(tape, current, s.current_pool_prompts,
                                        config.similarity);
            MatchResult match =
                match_queries(tape.value(current), tape.value(s.current_pool_prompts),
                              config.similarity);
            Var isc = isc_loss(tape, sim, match.assignments);
            isc_sum += tape.value(isc)(0, 0);
            video_loss =
                tape.add(video_loss, tape.scale(isc, config.weights.lambda_isc));
        }

        if (plan.with_ic) {
            // The per-layer terms preserve the frozen rows' refined
            // correlation structure as the step-start model produced it on
            // this video (inference path). That is pure stability pressure:
            // the trainable rows stay free to differentiate.
            Var ic_term = ic_main;
            const std::vector<Matrix>& ref = ic_reference[batch[b]];
            for (std::size_t l = 0; l < fwd.refined_queries.size(); ++l) {
                Var frozen_now =
                    tape.slice_rows(fwd.refined_queries[l], 0, newest.row_begin);
                Var aux = ic_loss(tape, frozen_now, ref[l]);
                aux_sum[l] += tape.value(aux)(0, 0);
                ic_term = tape.add(ic_term, aux);
            }
            video_loss =
                tape.add(video_loss, tape.scale(ic_term, config.weights.lambda_ic));
        }

        batch_sum = have_sum ? tape.add(batch_sum, video_loss) : video_loss;
        have_sum = true;
    }

    Var loss = tape.scale(batch_sum, 1.0 / static_cast<double>(config.batch_size));
    double loss_value = tape.value(loss)(0, 0);
    if (!std::isfinite(loss_value)) {
        throw DegenerateError("non-finite total loss");
    }

    Gradients grads = tape.backward(loss);
    double step_scale = 1.0;
    if (config.gradient_clip > 0.0) {
        double sq = 0.0;
        for (const Binding& binding : s.bindings) {
            const Matrix& g = grads.wrt(binding.var);
            for (std::size_t i = 0; i < g.size(); ++i) {
                sq += g.data()[i] * g.data()[i];
            }
        }
        double norm = std::sqrt(sq);
        if (norm > config.gradient_clip) step_scale = config.gradient_clip / norm;
    }
    for (const Binding& binding : s.bindings) {
        Matrix g = grads.wrt(binding.var);
        for (std::size_t r = 0; r < g.rows(); ++r) {
            for (std::size_t c = 0; c < g.cols(); ++c) {
                (*binding.target)(binding.row_begin + r, c) -=
                    config.learning_rate * step_scale * g(r, c);
            }
        }
    }
    if (plan.with_prompts) {
        // The prompt generator stands in for a text encoder whose outputs
        // live on a bounded manifold. Its linear stand-in has no such bound,
        // so project each learnable token row back into the unit ball; the
        // residual stays a refinement of the unit text anchor instead of
        // outgrowing it (and dominating the prompt matching).
        Matrix& tokens = state.pools.back().tokens;
        for (std::size_t r = 0; r < tokens.rows(); ++r) {
            double ss = 0.0;
            for (std::size_t c = 0; c < tokens.cols(); ++c) {
                ss += tokens(r, c) * tokens(r, c);
            }
            double norm = std::sqrt(ss);
            if (norm > 1.0) {
                for (std::size_t c = 0; c < tokens.cols(); ++c) {
                    tokens(r, c) /= norm;
                }
            }
        }
    }

    IterationLog log;
    log.iteration = iter;
    for (std::size_t b : batch) log.batch.push_back(train_videos[b].video_id);
    double inv = 1.0 / static_cast<double>(config.batch_size);
    std::vector<double> aux_mean;
    for (double a : aux_sum) aux_mean.push_back(a * inv);
    log.loss =
        total_loss(seg_sum * inv, isc_sum * inv, ic_value, aux_mean, config.weights);
    log.loss.total = loss_value;  // the value actually optimized
    return log;
}

}  // namespace

std::vector<IterationLog> run_step(ContinualState& state,
                                   const std::vector<SyntheticVideo>& train_videos,
                                   const TrainConfig& config) {
    if (!state.step_open) {
        throw ContractError("run_step: begin_step has not opened a step");
    }
    if (train_videos.empty()) {
        throw ContractError("run_step: no training videos");
    }

    const std::size_t t = state.queries.segments.back().task;
    StepPlan plan;
    plan.with_prompts = !config.finetune && config.flags.use_arsp;
    plan.with_isc = plan.with_prompts && config.flags.use_isc;
    plan.with_ic = !config.finetune && config.flags.use_ic && t > 0;
    plan.mode = plan.with_prompts ? ForwardMode::train : ForwardMode::infer;
    const QuerySegment newest = state.queries.segments.back();

    // Reference for the per-layer correlation terms: the frozen rows'
    // refined outputs under the model as it stands when the step's training
    // begins, on each training video's inference path. The model is fixed
    // for the whole step, so compute it once up front.
    std::vector<std::vector<Matrix>> ic_reference;
    if (plan.with_ic) {
        ic_reference.resize(train_videos.size());
        for (std::size_t v = 0; v < train_videos.size(); ++v) {
            ForwardOutput ref = forward(state.decoder, state.queries.matrix,
                                        train_videos[v].pixel_features,
                                        ForwardMode::infer);
            for (const Matrix& refined : ref.refined_queries) {
                ic_reference[v].push_back(rows_copy(refined, 0, newest.row_begin));
            }
        }
    }

    SeededRng batch_rng(derive_seed(derive_seed(config.seed, "batches"), t));
    std::vector<IterationLog> logs;

    for (std::size_t iter = 0; iter < config.iterations_per_step; ++iter) {
        std::vector<std::size_t> batch(config.batch_size);
        for (std::size_t b = 0; b < config.batch_size; ++b) {
            batch[b] = batch_rng.below(train_videos.size());
        }
        // The tape refuses non-finite values op by op, so a diverging run
        // surfaces as a numeric abort somewhere below; attach the batch.
        try {
            logs.push_back(run_iteration(state, train_videos, config, batch, iter,
                                         plan, newest, ic_reference));
        } catch (const DegenerateError& e) {
            std::string ids;
            for (std::size_t b = 0; b < batch.size(); ++b) {
                ids += (b ? "," : "") + std::to_string(train_videos[batch[b]].video_id);
            }
            throw DegenerateError("run_step: aborted at step " + std::to_string(t) +
                                  " iteration " + std::to_string(iter) +
                                  ", batch videos [" + ids + "]: " + e.what());
        }
    }

    PromptPool& pool = state.pools.back();
    pool.prompts = generate_prompts(state.generator, pool.category_names, pool.tokens);

    state.step_open = false;
    state.completed_steps = t + 1;
    return logs;
}

std::vector<TrackPrediction> predict_video(const ContinualState& state,
                                           const SyntheticVideo& video) {
    if (state.seen_categories.empty()) {
        throw ContractError("predict_video: no categories learned yet");
    }
    ForwardOutput out = forward(state.decoder, state.queries.matrix,
                                video.pixel_features, ForwardMode::infer);
    return tracks_from_logits(video.video_id, out.class_logits, out.mask_logits,
                              state.seen_categories);
}

namespace {

// Per-video predictions, fanned out over threads when asked; reduction is by
// video index either way, so worker count never changes the result.
std::vector<TrackPrediction> predict_all(const ContinualState& state,
                                         const std::vector<SyntheticVideo>& videos,
                                         std::size_t workers) {
    std::vector<std::vector<TrackPrediction>> per_video(videos.size());
    if (workers <= 1 || videos.size() <= 1) {
        for (std::size_t i = 0; i < videos.size(); ++i) {
            per_video[i] = predict_video(state, videos[i]);
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> threads;
        std::exception_ptr failure;
        std::mutex failure_mutex;
        for (std::size_t w = 0; w < std::min(workers, videos.size()); ++w) {
            threads.emplace_back([&] {
                try {
                    for (std::size_t i = next.fetch_add(1); i < videos.size();
                         i = next.fetch_add(1)) {
                        per_video[i] = predict_video(state, videos[i]);
                    }
                } catch (...) {
                    std::lock_guard<std::mutex> lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                }
            });
        }
        for (std::thread& thread : threads) thread.join();
        if (failure) std::rethrow_exception(failure);
    }
    std::vector<TrackPrediction> flat;
    for (std::vector<TrackPrediction>& tracks : per_video) {
        flat.insert(flat.end(), tracks.begin(), tracks.end());
    }
    return flat;
}

}  // namespace

ExperimentReport run_protocol(
    const ClassIncrementalProtocol& protocol, const std::vector<Dataset>& datasets,
    const ModelConfig& model, const TrainConfig& config,
    const std::function<void(const ContinualState&, std::size_t)>& on_step,
    std::size_t eval_workers) {
    validate_protocol(protocol);
    if (datasets.size() != protocol.steps) {
        throw ContractError("run_protocol: " + std::to_string(datasets.size()) +
                            " datasets for " + std::to_string(protocol.steps) +
                            " steps");
    }

    ContinualState state = make_state(model, config);
    ExperimentReport report;
    report.ledger.steps = protocol.steps;
    std::vector<SyntheticVideo> cumulative_val;

    for (std::size_t t = 0; t < protocol.steps; ++t) {
        begin_step(state, protocol, t, config);
        report.training_logs.push_back(run_step(state, datasets[t].train, config));

        for (const SyntheticVideo& v : datasets[t].val) cumulative_val.push_back(v);
        std::vector<TrackPrediction> predictions =
            predict_all(state, cumulative_val, eval_workers);
        EvalReport eval = evaluate(predictions, cumulative_val, state.seen_categories);

        StepMetrics metrics;
        metrics.step = t;
        metrics.classes = protocol.class_sets[t];
        metrics.eval = eval;
        report.steps.push_back(metrics);

        for (std::size_t c : protocol.class_sets[t]) {
            FirstAp first;
            first.step = t;
            first.ap = eval.category_ap.count(c) ? eval.category_ap.at(c) : 0.0;
            report.ledger.first_ap[c] = first;
        }
        if (t + 1 == protocol.steps) {
            for (const auto& [c, first] : report.ledger.first_ap) {
                (void)first;
                report.ledger.final_ap[c] =
                    eval.category_ap.count(c) ? eval.category_ap.at(c) : 0.0;
            }
        }
        if (on_step) on_step(state, t);
    }
    return report;
}

}  // namespace crisp
