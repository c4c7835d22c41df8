#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <vector>

#include "crisp/matrix.hpp"

namespace crisp {

class Tape;

// Handle to a node on a tape. Cheap to copy; only valid for the tape that
// produced it.
struct Var {
    std::size_t index = static_cast<std::size_t>(-1);
};

// Gradients of one scalar loss with respect to tape nodes. Leaves that the
// loss does not reach get explicit zero matrices.
class Gradients {
public:
    // Gradient with respect to `v` (typically a leaf). Zero matrix of the
    // node's shape when the loss does not depend on it.
    Matrix wrt(Var v) const;

private:
    friend class Tape;
    const Tape* tape_ = nullptr;
    std::vector<Matrix> grads_;
};

// Append-only eager tape for reverse-mode differentiation. Building an
// operation validates shapes, computes the value immediately, and records
// what backward needs. Node order is construction order, so one reverse scan
// visits every node after all of its consumers.
class Tape {
public:
    // Differentiable parameter.
    Var leaf(Matrix value);
    // Non-differentiable input; backward treats it as fixed.
    Var constant(Matrix value);

    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var hadamard(Var a, Var b);
    Var scale(Var a, double s);
    Var add_scalar(Var a, double s);
    Var matmul(Var a, Var b);
    Var transpose(Var a);
    Var sum_all(Var a);    // 1x1
    Var mean_all(Var a);   // 1x1
    Var row_sum(Var a);    // Nx1
    Var exp(Var a);
    // Elementwise log of max(x, 1e-300); the floor keeps values finite.
    Var log(Var a);
    Var sigmoid(Var a);
    Var tanh(Var a);
    Var reciprocal(Var a);
    Var row_normalize(Var a);
    Var softmax_rows(Var a);
    // Rows of `a` selected by index; repeated indices allowed.
    Var gather_rows(Var a, std::vector<std::size_t> indices);
    // Nx1 column whose i-th entry is a(i, indices[i]).
    Var pick_per_row(Var a, std::vector<std::size_t> indices);
    // a (NxC) minus column (Nx1) broadcast across columns.
    Var sub_col(Var a, Var column);
    // a (NxC) plus row (1xC) broadcast down rows.
    Var add_row(Var a, Var row);
    // a scaled by a 1x1 tape value.
    Var mul_scalar(Var a, Var scalar);
    Var frobenius(Var a);  // 1x1
    Var concat_rows(const std::vector<Var>& parts);
    Var slice_rows(Var a, std::size_t begin, std::size_t end);

    // Reference stays valid while the tape exists: nodes are stored in a
    // deque, so later pushes never relocate earlier values.
    const Matrix& value(Var v) const;
    bool is_leaf(Var v) const;
    std::size_t node_count() const { return nodes_.size(); }

    // Reverse accumulation from a scalar loss. Each node is visited exactly
    // once; contributions through shared subexpressions add up.
    Gradients backward(Var loss) const;

private:
    enum class OpKind : std::uint8_t {
        leaf,
        constant,
        add,
        sub,
        hadamard,
        scale,
        add_scalar,
        matmul,
        transpose,
        sum_all,
        mean_all,
        row_sum,
        exp_el,
        log_el,
        sigmoid_el,
        tanh_el,
        reciprocal_el,
        row_normalize_op,
        softmax_rows_op,
        gather_rows_op,
        pick_per_row_op,
        sub_col_op,
        add_row_op,
        mul_scalar_op,
        frobenius_op,
        concat_rows_op,
        slice_rows_op,
    };

    struct Node {
        OpKind kind;
        Matrix value;
        std::vector<std::size_t> inputs;
        double scalar = 0.0;
        std::vector<std::size_t> indices;
        std::vector<double> saved;
    };

    const Node& node(Var v) const;
    Var push(Node n);
    std::size_t check(Var v, const char* op) const;

    std::deque<Node> nodes_;
};

// Finite-difference oracle. Builds `fn` over leaves made from `params`,
// compares analytic gradients against central differences coordinate by
// coordinate, and returns the maximum relative error
// |a - n| / max(|a|, |n|, 1e-8).
using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;
double gradient_check(const ScalarFn& fn, const std::vector<Matrix>& params,
                      double step = 1e-5);

}  // namespace crisp
