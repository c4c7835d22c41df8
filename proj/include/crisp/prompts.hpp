#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "crisp/matrix.hpp"
#include "crisp/tape.hpp"

namespace crisp {

// Deterministic stand-in for a pretrained text encoder: each category name
// hashes to a fixed unit vector, learnable residual tokens are added, and a
// fixed seeded projection mixes the result into prompt space.
struct PromptGenerator {
    std::uint64_t seed = 0;
    std::size_t dim = 0;
    Matrix projection;  // d x d, orthonormalized rows, fixed per experiment

    static PromptGenerator make(std::uint64_t seed, std::size_t dim);

    // Unit-norm embedding; same (seed, name) pair always returns the same row.
    Matrix text_embed(const std::string& name) const;
    // Embeddings for a list of names, stacked as rows.
    Matrix text_embed_rows(const std::vector<std::string>& names) const;
};

// One task's prompt pool: the learnable residual tokens X and the cached
// generated prompts P_t. Frozen pools never change again.
struct PromptPool {
    std::size_t task_id = 0;
    std::vector<std::string> category_names;
    Matrix tokens;   // c_t x d learnable residuals
    Matrix prompts;  // c_t x d cached generator output
    bool trainable = true;
};

// P_t = (text_embed(names) + tokens) * projection.
Matrix generate_prompts(const PromptGenerator& gen,
                        const std::vector<std::string>& names,
                        const Matrix& tokens);
// Tape version: differentiable in `tokens`.
Var generate_prompts(Tape& tape, const PromptGenerator& gen,
                     const std::vector<std::string>& names, Var tokens);

enum class Similarity {
    frobenius,   // S = Q P^T / (|Q|_F |P^T|_F), the printed equation
    row_cosine,  // S_ij = cos(q_i, p_j), the prose reading
};

struct MatchResult {
    Matrix similarity;                    // N x c_t
    std::vector<std::size_t> assignments;  // argmax per row, lowest index wins
    // Positive normalizer 1 / (|Q|_F |P^T|_F). Describes `similarity` in
    // frobenius mode; 1.0 in row_cosine mode where no global scale exists.
    double scale_constant = 1.0;
};

// Query-prompt matching. The normalization never changes the argmax, so the
// assignments are scale-free; ties break toward the lower prompt index.
MatchResult match_queries(const Matrix& q, const Matrix& p,
                          Similarity sim = Similarity::frobenius);

// Differentiable similarity matrix matching match_queries' `similarity`.
Var similarity_matrix(Tape& tape, Var q, Var p, Similarity sim);

// Row i of the result is P[assignments[i]].
Matrix gather_matched_prompts(const MatchResult& match, const Matrix& p);

}  // namespace crisp
