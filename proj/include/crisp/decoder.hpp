#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "crisp/matrix.hpp"
#include "crisp/prompts.hpp"
#include "crisp/tape.hpp"

namespace crisp {

// One decoder layer. A single attention weight set (single head, d_k = d) is
// shared by the cross- and self-attention of the layer.
struct DecoderLayer {
    Matrix w_q, w_k, w_v, w_o;  // d x d
    Matrix ffn_w1, ffn_b1;      // d x d_ff, 1 x d_ff
    Matrix ffn_w2, ffn_b2;      // d_ff x d, 1 x d
};

// Decoder plus prediction heads. The class head is stored in rows form:
// row 0 is the no-object column, row 1+c is category c, so logits are
// queries * class_head^T and incremental widening appends rows.
struct DecoderStack {
    std::vector<DecoderLayer> layers;
    Matrix class_head;       // (num_categories + 1) x d
    Matrix mask_embed_head;  // d x d
};

DecoderStack make_decoder_stack(std::uint64_t seed, std::size_t d, std::size_t d_ff,
                                std::size_t num_layers, std::size_t num_categories);

// Tape handles for one layer / the whole stack. The caller decides which are
// leaves (trainable) and which are constants (frozen).
struct LayerVars {
    Var w_q, w_k, w_v, w_o;
    Var ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};
struct StackVars {
    std::vector<LayerVars> layers;
    Var class_head;
    Var mask_embed_head;
};

LayerVars layer_constants(Tape& tape, const DecoderLayer& layer);
StackVars stack_constants(Tape& tape, const DecoderStack& stack);

struct SelfAttentionOut {
    Var out;             // after output projection and residual
    Var pre_projection;  // attention-weighted (V + P_m)
    Var attention;       // row-stochastic weights
};

// Self-attention over the queries with the matched prompts added to the
// projected values. An absent P_m means zero injection (inference mode).
SelfAttentionOut injected_self_attention(Tape& tape, const LayerVars& layer,
                                         Var q_in, std::optional<Var> p_m);

struct CrossAttentionOut {
    Var out;
    Var attention;
};

// Standard single-head cross-attention from queries to feature tokens, with
// residual. No prompt injection here.
CrossAttentionOut cross_attention(Tape& tape, const LayerVars& layer, Var q_in,
                                  Var features);

// Two-layer tanh feed-forward with residual.
Var feed_forward(Tape& tape, const LayerVars& layer, Var x);

enum class ForwardMode { train, infer };

struct ForwardVars {
    std::vector<Var> refined_queries;  // one per layer, after its feed-forward
    Var class_logits;                  // N x (num_categories + 1)
    std::vector<Var> mask_logits;      // per frame, N x (pixels)
    std::vector<Var> attentions;       // cross then self, per layer
    // Train mode: per layer, which row of the concatenated prompt matrix each
    // query gathered.
    std::vector<std::vector<std::size_t>> prompt_assignments;
};

// Full decoder pass. Per layer: cross-attention over the concatenated frame
// features, then (train mode) query-prompt matching against the concatenated
// pools and prompt-injected self-attention, then feed-forward. Heads run on
// the final queries; mask logits are per-frame dot products of the mask
// embeddings with the frame's feature tokens.
ForwardVars forward(Tape& tape, const StackVars& stack, Var queries,
                    const std::vector<Var>& frame_features, ForwardMode mode,
                    const std::vector<Var>& pool_prompts = {},
                    Similarity similarity = Similarity::frobenius);

struct ForwardOutput {
    std::vector<Matrix> refined_queries;
    Matrix class_logits;
    std::vector<Matrix> mask_logits;
};

ForwardOutput forward(const DecoderStack& stack, const Matrix& queries,
                      const std::vector<Matrix>& frame_features, ForwardMode mode,
                      const std::vector<Matrix>& pool_prompts = {},
                      Similarity similarity = Similarity::frobenius);

}  // namespace crisp
