#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "crisp/matrix.hpp"
#include "crisp/tape.hpp"

namespace crisp {

struct LossWeights {
    double lambda_isc = 3.0;
    double lambda_ic = 3.0;
};

// One training objective evaluation, decomposed. `ic_aux` holds the
// per-decoder-layer auxiliary correlation terms.
struct LossReport {
    double seg = 0.0;
    double isc = 0.0;
    double ic = 0.0;
    std::vector<double> ic_aux;
    double total = 0.0;
};

// Bipartite matching outcome: each target paired with exactly one query.
struct Assignment {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (query, target)
    std::vector<std::size_t> unmatched_queries;
};

// A ground-truth instance as the losses see it: global category id plus one
// binary mask (H*W entries in {0,1}) per frame.
struct MaskTarget {
    std::size_t category = 0;
    std::vector<std::vector<std::uint8_t>> masks;
};

// Class-column convention shared by every consumer of class logits:
// column 0 is "no object", category c lives at column 1 + c. Widening the
// head for new categories appends columns and never moves existing ones.
inline std::size_t class_column(std::size_t category) { return category + 1; }
inline constexpr std::size_t kNoObjectColumn = 0;

// Similarity-contrast loss: pushes each query's similarity toward its
// assigned prompt and away from the others.
// (1/N) sum_i log(1 + sum_{j != a_i} exp(S_ij) / exp(S_i,a_i)).
double isc_loss(const Matrix& s, const std::vector<std::size_t>& assignments);
Var isc_loss(Tape& tape, Var s, const std::vector<std::size_t>& assignments);

// Correlation-structure loss: MSE between the Gram matrices of the
// row-normalized query matrices. `q_ref` is a constant reference.
double ic_loss(const Matrix& q_t, const Matrix& q_ref);
Var ic_loss(Tape& tape, Var q_t, const Matrix& q_ref);

// Minimum-cost assignment covering every target (rows = queries >= cols =
// targets). Deterministic: among equal-cost optima, returns the one whose
// query->target vector is lexicographically smallest (unmatched sorts last).
Assignment hungarian_match(const Matrix& cost);

// Segmentation objective: cross-entropy on classes (unmatched queries are
// supervised to no-object at `no_object_weight`), plus binary cross-entropy
// and soft-dice on masks, both averaged over matched pairs. Dice is
// spatio-temporal: one overlap ratio per pair across all frames jointly.
Var seg_loss(Tape& tape, Var class_logits, const std::vector<Var>& mask_logits,
             const std::vector<MaskTarget>& targets, const Assignment& assignment,
             double no_object_weight);
double seg_loss(const Matrix& class_logits, const std::vector<Matrix>& mask_logits,
                const std::vector<MaskTarget>& targets, const Assignment& assignment,
                double no_object_weight);

// Combine components per the fixed recipe:
// total = seg + lambda_isc * isc + lambda_ic * (ic + sum(ic_aux)).
LossReport total_loss(double seg, double isc, double ic,
                      const std::vector<double>& ic_aux, const LossWeights& weights);

}  // namespace crisp
