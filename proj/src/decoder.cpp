#include "crisp/decoder.hpp"

#include <cmath>
#include <string>

#include "crisp/errors.hpp"
#include "crisp/rng.hpp"

namespace crisp {

namespace {

Matrix gaussian_matrix(SeededRng& rng, std::size_t rows, std::size_t cols,
                       double scale) {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.gaussian();
    return m;
}

Var attention_rows(Tape& tape, Var q_proj, Var k_proj, double d_k) {
    Var logits = tape.scale(tape.matmul(q_proj, tape.transpose(k_proj)),
                            1.0 / std::sqrt(d_k));
    return tape.softmax_rows(logits);
}

}  // namespace

DecoderStack make_decoder_stack(std::uint64_t seed, std::size_t d, std::size_t d_ff,
                                std::size_t num_layers, std::size_t num_categories) {
    if (d == 0 || d_ff == 0 || num_layers == 0) {
        throw ParamError("make_decoder_stack: dimensions and layer count must be positive");
    }
    DecoderStack stack;
    double attn_scale = 1.0 / std::sqrt(static_cast<double>(d));
    double ffn_scale = 1.0 / std::sqrt(static_cast<double>(d_ff));
    // The value projection is parametrized large and the output projection
    // small so their product keeps a unit-ish scale while anything added to
    // the values from outside — the injected prompts — enters the residual
    // stream at a fraction of the value magnitude. Prompts should perturb
    // the stream, not rival it.
    double value_scale = 4.0 * attn_scale;
    double out_scale = 0.25 * attn_scale;
    for (std::size_t l = 0; l < num_layers; ++l) {
        SeededRng rng(derive_seed(derive_seed(seed, "decoder-layer"), l));
        DecoderLayer layer;
        layer.w_q = gaussian_matrix(rng, d, d, attn_scale);
        layer.w_k = gaussian_matrix(rng, d, d, attn_scale);
        layer.w_v = gaussian_matrix(rng, d, d, value_scale);
        layer.w_o = gaussian_matrix(rng, d, d, out_scale);
        layer.ffn_w1 = gaussian_matrix(rng, d, d_ff, attn_scale);
        layer.ffn_b1 = Matrix(1, d_ff);
        layer.ffn_w2 = gaussian_matrix(rng, d_ff, d, ffn_scale);
        layer.ffn_b2 = Matrix(1, d);
        stack.layers.push_back(std::move(layer));
    }
    SeededRng head_rng(derive_seed(seed, "decoder-heads"));
    stack.class_head = gaussian_matrix(head_rng, num_categories + 1, d, attn_scale);
    stack.mask_embed_head = gaussian_matrix(head_rng, d, d, attn_scale);
    return stack;
}

LayerVars layer_constants(Tape& tape, const DecoderLayer& layer) {
    LayerVars lv;
    lv.w_q = tape.constant(layer.w_q);
    lv.w_k = tape.constant(layer.w_k);
    lv.w_v = tape.constant(layer.w_v);
    lv.w_o = tape.constant(layer.w_o);
    lv.ffn_w1 = tape.constant(layer.ffn_w1);
    lv.ffn_b1 = tape.constant(layer.ffn_b1);
    lv.ffn_w2 = tape.constant(layer.ffn_w2);
    lv.ffn_b2 = tape.constant(layer.ffn_b2);
    return lv;
}

StackVars stack_constants(Tape& tape, const DecoderStack& stack) {
    StackVars sv;
    for (const DecoderLayer& layer : stack.layers) {
        sv.layers.push_back(layer_constants(tape, layer));
    }
    sv.class_head = tape.constant(stack.class_head);
    sv.mask_embed_head = tape.constant(stack.mask_embed_head);
    return sv;
}

SelfAttentionOut injected_self_attention(Tape& tape, const LayerVars& layer,
                                         Var q_in, std::optional<Var> p_m) {
    const Matrix& q_val = tape.value(q_in);
    if (p_m) {
        const Matrix& p_val = tape.value(*p_m);
        if (p_val.rows() != q_val.rows() || p_val.cols() != q_val.cols()) {
            throw ShapeError("injected_self_attention: prompt block is " +
                             shape_string(p_val) + ", queries are " +
                             shape_string(q_val));
        }
    }
    double d_k = static_cast<double>(tape.value(layer.w_q).cols());
    Var q = tape.matmul(q_in, layer.w_q);
    Var k = tape.matmul(q_in, layer.w_k);
    Var v = tape.matmul(q_in, layer.w_v);
    Var weights = attention_rows(tape, q, k, d_k);
    Var values = p_m ? tape.add(v, *p_m) : v;
    Var pre = tape.matmul(weights, values);
    Var out = tape.add(q_in, tape.matmul(pre, layer.w_o));
    return {out, pre, weights};
}

CrossAttentionOut cross_attention(Tape& tape, const LayerVars& layer, Var q_in,
                                  Var features) {
    double d_k = static_cast<double>(tape.value(layer.w_q).cols());
    Var q = tape.matmul(q_in, layer.w_q);
    Var k = tape.matmul(features, layer.w_k);
    Var v = tape.matmul(features, layer.w_v);
    Var weights = attention_rows(tape, q, k, d_k);
    Var out = tape.add(q_in, tape.matmul(tape.matmul(weights, v), layer.w_o));
    return {out, weights};
}

Var feed_forward(Tape& tape, const LayerVars& layer, Var x) {
    Var hidden = tape.tanh(tape.add_row(tape.matmul(x, layer.ffn_w1), layer.ffn_b1));
    Var branch = tape.add_row(tape.matmul(hidden, layer.ffn_w2), layer.ffn_b2);
    return tape.add(x, branch);
}

ForwardVars forward(Tape& tape, const StackVars& stack, Var queries,
                    const std::vector<Var>& frame_features, ForwardMode mode,
                    const std::vector<Var>& pool_prompts, Similarity similarity) {
    if (frame_features.empty()) {
        throw ContractError("forward: need at least one frame of features");
    }
    if (stack.layers.empty()) {
        throw ContractError("forward: decoder has no layers");
    }
    Var features = frame_features.size() == 1 ? frame_features[0]
                                              : tape.concat_rows(frame_features);
    Var prompts{};
    if (mode == ForwardMode::train) {
        if (pool_prompts.empty()) {
            throw ContractError("forward: train mode needs at least one prompt pool");
        }
        prompts = pool_prompts.size() == 1 ? pool_prompts[0]
                                           : tape.concat_rows(pool_prompts);
    }

    ForwardVars out;
    Var x = queries;
    for (const LayerVars& layer : stack.layers) {
        CrossAttentionOut cross = cross_attention(tape, layer, x, features);
        out.attentions.push_back(cross.attention);
        x = cross.out;

        std::optional<Var> p_m;
        if (mode == ForwardMode::train) {
            MatchResult match = match_queries(tape.value(x), tape.value(prompts),
                                              similarity);
            out.prompt_assignments.push_back(match.assignments);
            p_m = tape.gather_rows(prompts, match.assignments);
        }
        SelfAttentionOut self = injected_self_attention(tape, layer, x, p_m);
        out.attentions.push_back(self.attention);
        x = feed_forward(tape, layer, self.out);
        out.refined_queries.push_back(x);
    }

    out.class_logits = tape.matmul(x, tape.transpose(stack.class_head));
    Var embed = tape.matmul(x, stack.mask_embed_head);
    for (Var frame : frame_features) {
        out.mask_logits.push_back(tape.matmul(embed, tape.transpose(frame)));
    }
    return out;
}

ForwardOutput forward(const DecoderStack& stack, const Matrix& queries,
                      const std::vector<Matrix>& frame_features, ForwardMode mode,
                      const std::vector<Matrix>& pool_prompts, Similarity similarity) {
    Tape tape;
    StackVars sv = stack_constants(tape, stack);
    std::vector<Var> frames;
    frames.reserve(frame_features.size());
    for (const Matrix& f : frame_features) frames.push_back(tape.constant(f));
    std::vector<Var> pools;
    pools.reserve(pool_prompts.size());
    for (const Matrix& p : pool_prompts) pools.push_back(tape.constant(p));

    ForwardVars vars = forward(tape, sv, tape.constant(queries), frames, mode, pools,
                               similarity);
    ForwardOutput result;
    for (Var v : vars.refined_queries) result.refined_queries.push_back(tape.value(v));
    result.class_logits = tape.value(vars.class_logits);
    for (Var v : vars.mask_logits) result.mask_logits.push_back(tape.value(v));
    return result;
}

}  // namespace crisp
