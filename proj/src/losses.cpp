#include "crisp/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "crisp/errors.hpp"

namespace crisp {

// ---- similarity contrast -----------------------------------------------------

Var isc_loss(Tape& tape, Var s, const std::vector<std::size_t>& assignments) {
    const Matrix& sv = tape.value(s);
    if (assignments.size() != sv.rows()) {
        throw ShapeError("isc_loss: " + std::to_string(assignments.size()) +
                         " assignments for " + std::to_string(sv.rows()) + " rows");
    }
    for (std::size_t a : assignments) {
        if (a >= sv.cols()) {
            throw ParamError("isc_loss: assignment " + std::to_string(a) +
                             " out of range for " + std::to_string(sv.cols()) +
                             " prompts");
        }
    }
    // exp(S_ij - S_i,a_i) summed over all j equals 1 + the competitor sum, so
    // log of the row sum is exactly log(1 + sum_{j != a_i} ...). With c = 1
    // the row sum is exactly 1 and the loss is 0.
    Var picked = tape.pick_per_row(s, assignments);
    Var shifted = tape.sub_col(s, picked);
    Var ratios = tape.exp(shifted);
    Var row_totals = tape.row_sum(ratios);
    Var logs = tape.log(row_totals);
    return tape.scale(tape.sum_all(logs), 1.0 / static_cast<double>(sv.rows()));
}

double isc_loss(const Matrix& s, const std::vector<std::size_t>& assignments) {
    Tape tape;
    Var v = isc_loss(tape, tape.constant(s), assignments);
    return tape.value(v)(0, 0);
}

// ---- correlation structure -----------------------------------------------------

Var ic_loss(Tape& tape, Var q_t, const Matrix& q_ref) {
    const Matrix& qv = tape.value(q_t);
    if (qv.rows() != q_ref.rows()) {
        throw ShapeError("ic_loss: row count " + std::to_string(qv.rows()) +
                         " vs reference " + std::to_string(q_ref.rows()));
    }
    Var qn = tape.row_normalize(q_t);
    Var gram = tape.matmul(qn, tape.transpose(qn));
    Var ref = tape.constant(gram_matrix(row_normalize(q_ref)));
    Var diff = tape.sub(gram, ref);
    return tape.mean_all(tape.hadamard(diff, diff));
}

double ic_loss(const Matrix& q_t, const Matrix& q_ref) {
    Tape tape;
    Var v = ic_loss(tape, tape.constant(q_t), q_ref);
    return tape.value(v)(0, 0);
}

// ---- assignment -----------------------------------------------------------------

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr std::size_t kFree = static_cast<std::size_t>(-2);
constexpr std::size_t kUnmatched = static_cast<std::size_t>(-1);

// Potential-based shortest-augmenting-path solver. Assigns every index in
// `cols` (targets) to a distinct index in `rows` (queries); requires
// rows.size() >= cols.size(). Deterministic for fixed input.
double assignment_core(const Matrix& cost, const std::vector<std::size_t>& rows,
                       const std::vector<std::size_t>& cols) {
    const std::size_t nt = cols.size(), nq = rows.size();
    if (nt == 0) return 0.0;

    std::vector<double> u(nt + 1, 0.0), v(nq + 1, 0.0);
    std::vector<std::size_t> p(nq + 1, 0), way(nq + 1, 0);

    for (std::size_t i = 1; i <= nt; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(nq + 1, kInf);
        std::vector<char> used(nq + 1, 0);
        do {
            used[j0] = 1;
            std::size_t i0 = p[j0], j1 = 0;
            double delta = kInf;
            for (std::size_t j = 1; j <= nq; ++j) {
                if (used[j]) continue;
                double cur = cost(rows[j - 1], cols[i0 - 1]) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= nq; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }

    double total = 0.0;
    for (std::size_t j = 1; j <= nq; ++j) {
        if (p[j] != 0) total += cost(rows[j - 1], cols[p[j] - 1]);
    }
    return total;
}

// Optimal total when some queries are pinned to a target (or pinned
// unmatched); kInf when the remaining targets cannot all be covered.
double constrained_optimum(const Matrix& cost,
                           const std::vector<std::size_t>& decision) {
    double base = 0.0;
    std::vector<char> taken(cost.cols(), 0);
    std::vector<std::size_t> free_rows;
    for (std::size_t q = 0; q < cost.rows(); ++q) {
        if (decision[q] == kFree) {
            free_rows.push_back(q);
        } else if (decision[q] != kUnmatched) {
            base += cost(q, decision[q]);
            taken[decision[q]] = 1;
        }
    }
    std::vector<std::size_t> open_cols;
    for (std::size_t t = 0; t < cost.cols(); ++t) {
        if (!taken[t]) open_cols.push_back(t);
    }
    if (open_cols.size() > free_rows.size()) return kInf;
    return base + assignment_core(cost, free_rows, open_cols);
}

}  // namespace

Assignment hungarian_match(const Matrix& cost) {
    if (cost.rows() < cost.cols()) {
        throw ContractError("hungarian_match: need rows >= cols, got " +
                            shape_string(cost));
    }
    require_finite(cost, "hungarian_match");

    const std::size_t n = cost.rows(), m = cost.cols();
    std::vector<std::size_t> decision(n, kFree);
    double opt = constrained_optimum(cost, decision);
    double eps = 1e-9 * std::max(1.0, std::abs(opt));

    // Fix queries one at a time, always taking the lowest-index choice that
    // still reaches the global optimum; kUnmatched sorts after every target.
    for (std::size_t q = 0; q < n; ++q) {
        std::vector<char> taken(m, 0);
        for (std::size_t r = 0; r < q; ++r) {
            if (decision[r] < m) taken[decision[r]] = 1;
        }
        bool fixed = false;
        for (std::size_t t = 0; t < m && !fixed; ++t) {
            if (taken[t]) continue;
            decision[q] = t;
            if (constrained_optimum(cost, decision) <= opt + eps) fixed = true;
        }
        if (!fixed) decision[q] = kUnmatched;
    }

    Assignment out;
    for (std::size_t q = 0; q < n; ++q) {
        if (decision[q] == kUnmatched) {
            out.unmatched_queries.push_back(q);
        } else {
            out.pairs.emplace_back(q, decision[q]);
        }
    }
    return out;
}

// ---- segmentation ---------------------------------------------------------------

Var seg_loss(Tape& tape, Var class_logits, const std::vector<Var>& mask_logits,
             const std::vector<MaskTarget>& targets, const Assignment& assignment,
             double no_object_weight) {
    const Matrix& logits = tape.value(class_logits);
    const std::size_t n = logits.rows();
    const std::size_t frames = mask_logits.size();

    std::vector<std::size_t> labels(n, kNoObjectColumn);
    std::vector<double> weights(n, no_object_weight);
    for (auto [q, t] : assignment.pairs) {
        if (q >= n || t >= targets.size()) {
            throw ContractError("seg_loss: assignment pair (" + std::to_string(q) +
                                ", " + std::to_string(t) + ") out of range");
        }
        std::size_t col = class_column(targets[t].category);
        if (col >= logits.cols()) {
            throw ContractError("seg_loss: category " +
                                std::to_string(targets[t].category) +
                                " does not fit class head width " +
                                std::to_string(logits.cols()));
        }
        labels[q] = col;
        weights[q] = 1.0;
    }

    // Weighted cross-entropy over class columns.
    double weight_total = 0.0;
    for (double w : weights) weight_total += w;
    Matrix weight_col(n, 1);
    for (std::size_t i = 0; i < n; ++i) weight_col(i, 0) = weights[i];
    Var log_probs = tape.log(tape.softmax_rows(class_logits));
    Var picked = tape.pick_per_row(log_probs, labels);
    Var weighted = tape.hadamard(picked, tape.constant(weight_col));
    Var ce = tape.scale(tape.sum_all(weighted), -1.0 / weight_total);

    if (assignment.pairs.empty() || frames == 0) return ce;

    Var bce_sum{}, dice_sum{};
    bool have_terms = false;
    for (auto [q, t] : assignment.pairs) {
        const MaskTarget& target = targets[t];
        if (target.masks.size() != frames) {
            throw ShapeError("seg_loss: target " + std::to_string(t) + " has " +
                             std::to_string(target.masks.size()) + " mask frames, expected " +
                             std::to_string(frames));
        }
        // Stack this query's per-frame mask logits into one F x (H*W) block.
        std::vector<Var> rows;
        rows.reserve(frames);
        for (std::size_t f = 0; f < frames; ++f) {
            rows.push_back(tape.gather_rows(mask_logits[f], {q}));
        }
        Var pair_logits = frames == 1 ? rows[0] : tape.concat_rows(rows);
        const Matrix& pl = tape.value(pair_logits);

        Matrix y(frames, pl.cols());
        for (std::size_t f = 0; f < frames; ++f) {
            if (target.masks[f].size() != pl.cols()) {
                throw ShapeError("seg_loss: frame " + std::to_string(f) + " mask has " +
                                 std::to_string(target.masks[f].size()) + " pixels, expected " +
                                 std::to_string(pl.cols()));
            }
            for (std::size_t px = 0; px < pl.cols(); ++px) {
                y(f, px) = static_cast<double>(target.masks[f][px]);
            }
        }

        Var y_const = tape.constant(y);
        Var y_complement = tape.constant(sub(Matrix::filled(frames, pl.cols(), 1.0), y));
        Var probs = tape.sigmoid(pair_logits);
        Var probs_complement =
            tape.add_scalar(tape.scale(probs, -1.0), 1.0);
        Var ll = tape.add(tape.hadamard(y_const, tape.log(probs)),
                          tape.hadamard(y_complement, tape.log(probs_complement)));
        Var bce = tape.scale(tape.mean_all(ll), -1.0);

        Var inter = tape.sum_all(tape.hadamard(probs, y_const));
        Var den = tape.add(tape.sum_all(probs), tape.sum_all(y_const));
        Var dice_loss;
        if (tape.value(den)(0, 0) == 0.0) {
            // Empty prediction against empty target: overlap ratio defined
            // as 1, so the loss contribution is zero.
            dice_loss = tape.constant(Matrix(1, 1));
        } else {
            Var ratio = tape.mul_scalar(tape.scale(inter, 2.0), tape.reciprocal(den));
            dice_loss = tape.add_scalar(tape.scale(ratio, -1.0), 1.0);
        }

        if (!have_terms) {
            bce_sum = bce;
            dice_sum = dice_loss;
            have_terms = true;
        } else {
            bce_sum = tape.add(bce_sum, bce);
            dice_sum = tape.add(dice_sum, dice_loss);
        }
    }

    double inv_pairs = 1.0 / static_cast<double>(assignment.pairs.size());
    Var mask_terms = tape.scale(tape.add(bce_sum, dice_sum), inv_pairs);
    return tape.add(ce, mask_terms);
}

double seg_loss(const Matrix& class_logits, const std::vector<Matrix>& mask_logits,
                const std::vector<MaskTarget>& targets, const Assignment& assignment,
                double no_object_weight) {
    Tape tape;
    std::vector<Var> masks;
    masks.reserve(mask_logits.size());
    for (const Matrix& m : mask_logits) masks.push_back(tape.constant(m));
    Var v = seg_loss(tape, tape.constant(class_logits), masks, targets, assignment,
                     no_object_weight);
    return tape.value(v)(0, 0);
}

// ---- combination ------------------------------------------------------------------

LossReport total_loss(double seg, double isc, double ic,
                      const std::vector<double>& ic_aux, const LossWeights& weights) {
    auto check = [](double v, const char* name) {
        if (!std::isfinite(v)) {
            throw ContractError(std::string("total_loss: ") + name + " is not finite");
        }
        if (v < 0.0) {
            throw ContractError(std::string("total_loss: ") + name + " is negative");
        }
    };
    check(seg, "seg");
    check(isc, "isc");
    check(ic, "ic");
    for (double a : ic_aux) check(a, "ic_aux");
    if (weights.lambda_isc < 0.0 || weights.lambda_ic < 0.0) {
        throw ContractError("total_loss: weights must be non-negative");
    }

    LossReport report;
    report.seg = seg;
    report.isc = isc;
    report.ic = ic;
    report.ic_aux = ic_aux;
    double aux_sum = 0.0;
    for (double a : ic_aux) aux_sum += a;
    report.total = seg + weights.lambda_isc * isc + weights.lambda_ic * (ic + aux_sum);
    return report;
}

}  // namespace crisp
