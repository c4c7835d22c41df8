#include "crisp/tape.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "crisp/errors.hpp"

namespace crisp {

namespace {
constexpr double kLogFloor = 1e-300;
}

// ---- construction helpers ---------------------------------------------------

std::size_t Tape::check(Var v, const char* op) const {
    if (v.index >= nodes_.size()) {
        throw ContractError(std::string(op) + ": variable does not belong to this tape");
    }
    return v.index;
}

const Tape::Node& Tape::node(Var v) const { return nodes_[v.index]; }

Var Tape::push(Node n) {
    require_finite(n.value, "tape op");
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
}

const Matrix& Tape::value(Var v) const { return nodes_[check(v, "value")].value; }

bool Tape::is_leaf(Var v) const {
    return nodes_[check(v, "is_leaf")].kind == OpKind::leaf;
}

Var Tape::leaf(Matrix value) {
    require_finite(value, "leaf");
    return push(Node{OpKind::leaf, std::move(value), {}, 0.0, {}, {}});
}

Var Tape::constant(Matrix value) {
    require_finite(value, "constant");
    return push(Node{OpKind::constant, std::move(value), {}, 0.0, {}, {}});
}

// ---- elementwise and arithmetic ops -----------------------------------------

Var Tape::add(Var a, Var b) {
    std::size_t ia = check(a, "add"), ib = check(b, "add");
    Matrix v = crisp::add(nodes_[ia].value, nodes_[ib].value);
    return push(Node{OpKind::add, std::move(v), {ia, ib}, 0.0, {}, {}});
}

Var Tape::sub(Var a, Var b) {
    std::size_t ia = check(a, "sub"), ib = check(b, "sub");
    Matrix v = crisp::sub(nodes_[ia].value, nodes_[ib].value);
    return push(Node{OpKind::sub, std::move(v), {ia, ib}, 0.0, {}, {}});
}

Var Tape::hadamard(Var a, Var b) {
    std::size_t ia = check(a, "hadamard"), ib = check(b, "hadamard");
    Matrix v = crisp::hadamard(nodes_[ia].value, nodes_[ib].value);
    return push(Node{OpKind::hadamard, std::move(v), {ia, ib}, 0.0, {}, {}});
}

Var Tape::scale(Var a, double s) {
    std::size_t ia = check(a, "scale");
    Matrix v = crisp::scale(nodes_[ia].value, s);
    return push(Node{OpKind::scale, std::move(v), {ia}, s, {}, {}});
}

Var Tape::add_scalar(Var a, double s) {
    std::size_t ia = check(a, "add_scalar");
    const Matrix& x = nodes_[ia].value;
    Matrix v(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) v.data()[i] = x.data()[i] + s;
    return push(Node{OpKind::add_scalar, std::move(v), {ia}, s, {}, {}});
}

Var Tape::matmul(Var a, Var b) {
    std::size_t ia = check(a, "matmul"), ib = check(b, "matmul");
    Matrix v = crisp::matmul(nodes_[ia].value, nodes_[ib].value);
    return push(Node{OpKind::matmul, std::move(v), {ia, ib}, 0.0, {}, {}});
}

Var Tape::transpose(Var a) {
    std::size_t ia = check(a, "transpose");
    Matrix v = crisp::transpose(nodes_[ia].value);
    return push(Node{OpKind::transpose, std::move(v), {ia}, 0.0, {}, {}});
}

Var Tape::sum_all(Var a) {
    std::size_t ia = check(a, "sum_all");
    Matrix v(1, 1);
    v(0, 0) = crisp::sum(nodes_[ia].value);
    return push(Node{OpKind::sum_all, std::move(v), {ia}, 0.0, {}, {}});
}

Var Tape::mean_all(Var a) {
    std::size_t ia = check(a, "mean_all");
    const Matrix& x = nodes_[ia].value;
    if (x.size() == 0) throw ShapeError("mean_all: empty matrix");
    Matrix v(1, 1);
    v(0, 0) = crisp::sum(x) / static_cast<double>(x.size());
    return push(Node{OpKind::mean_all, std::move(v), {ia}, 0.0, {}, {}});
}

Var Tape::row_sum(Var a) {
    std::size_t ia = check(a, "row_sum");
    const Matrix& x = nodes_[ia].value;
    Matrix v(x.rows(), 1);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < x.cols(); ++j) s += x(i, j);
        v(i, 0) = s;
    }
    return push(Node{OpKind::row_sum, std::move(v), {ia}, 0.0, {}, {}});
}

Var Tape::exp(Var a) {
    std::size_t ia = check(a, "exp");
    const Matrix& x = nodes_[ia].value;
    Matrix v(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) v.data()[i] = std::exp(x.data()[i]);
    return push(Node{OpKind::exp_el, std::move(v), {ia}, 0.0, {}, {}});
}

Var Tape::log(Var a) {
    std::size_t ia = check(a, "log");
    const Matrix& x = nodes_[ia].value;
    Matrix v(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) {
        v.data()[i] = std::log(std::max(x.data()[i], kLogFloor));
    }
    return push(Node{OpKind::log_el, std::move(v), {ia}, 0.0, {}, {}});
}

Var Tape::sigmoid(Var a) {
    std::size_t ia = check(a, "sigmoid");
    const Matrix& x = nodes_[ia].value;
    Matrix v(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) {
        double t = x.data()[i];
        // Branch on sign to avoid overflow in exp for large |t|.
        v.data()[i] = t >= 0.0 ? 1.0 / (1.0 + std::exp(-t))
                               : std::exp(t) / (1.0 + std::exp(t));
    }
    return push(Node{OpKind::sigmoid_el, std::move(v), {ia}, 0.0, {}, {}});
}

Var Tape::tanh(Var a) {
    std::size_t ia = check(a, "tanh");
    const Matrix& x = nodes_[ia].value;
    Matrix v(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) v.data()[i] = std::tanh(x.data()[i]);
    return push(Node{OpKind::tanh_el, std::move(v), {ia}, 0.0, {}, {}});
}

Var Tape::reciprocal(Var a) {
    std::size_t ia = check(a, "reciprocal");
    const Matrix& x = nodes_[ia].value;
    Matrix v(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) v.data()[i] = 1.0 / x.data()[i];
    return push(Node{OpKind::reciprocal_el, std::move(v), {ia}, 0.0, {}, {}});
}

// ---- structured ops ----------------------------------------------------------

Var Tape::row_normalize(Var a) {
    std::size_t ia = check(a, "row_normalize");
    const Matrix& x = nodes_[ia].value;
    Node n{OpKind::row_normalize_op, Matrix(x.rows(), x.cols()), {ia}, 0.0, {}, {}};
    n.saved.resize(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        double sq = 0.0;
        for (std::size_t j = 0; j < x.cols(); ++j) sq += x(i, j) * x(i, j);
        double norm = std::sqrt(sq);
        if (norm < 1e-12) {
            throw DegenerateError("row_normalize: row " + std::to_string(i) +
                                  " has norm below 1e-12");
        }
        n.saved[i] = norm;
        for (std::size_t j = 0; j < x.cols(); ++j) n.value(i, j) = x(i, j) / norm;
    }
    return push(std::move(n));
}

Var Tape::softmax_rows(Var a) {
    std::size_t ia = check(a, "softmax_rows");
    Matrix v = crisp::softmax_rows(nodes_[ia].value);
    return push(Node{OpKind::softmax_rows_op, std::move(v), {ia}, 0.0, {}, {}});
}

Var Tape::gather_rows(Var a, std::vector<std::size_t> indices) {
    std::size_t ia = check(a, "gather_rows");
    const Matrix& x = nodes_[ia].value;
    Matrix v(indices.size(), x.cols());
    for (std::size_t r = 0; r < indices.size(); ++r) {
        if (indices[r] >= x.rows()) {
            throw ParamError("gather_rows: index " + std::to_string(indices[r]) +
                             " out of range for " + std::to_string(x.rows()) + " rows");
        }
        for (std::size_t j = 0; j < x.cols(); ++j) v(r, j) = x(indices[r], j);
    }
    return push(Node{OpKind::gather_rows_op, std::move(v), {ia}, 0.0,
                     std::move(indices), {}});
}

Var Tape::pick_per_row(Var a, std::vector<std::size_t> indices) {
    std::size_t ia = check(a, "pick_per_row");
    const Matrix& x = nodes_[ia].value;
    if (indices.size() != x.rows()) {
        throw ShapeError("pick_per_row: need one index per row, got " +
                         std::to_string(indices.size()) + " for " +
                         std::to_string(x.rows()) + " rows");
    }
    Matrix v(x.rows(), 1);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        if (indices[i] >= x.cols()) {
            throw ParamError("pick_per_row: column " + std::to_string(indices[i]) +
                             " out of range for " + std::to_string(x.cols()) + " cols");
        }
        v(i, 0) = x(i, indices[i]);
    }
    return push(Node{OpKind::pick_per_row_op, std::move(v), {ia}, 0.0,
                     std::move(indices), {}});
}

Var Tape::sub_col(Var a, Var column) {
    std::size_t ia = check(a, "sub_col"), ic = check(column, "sub_col");
    const Matrix& x = nodes_[ia].value;
    const Matrix& c = nodes_[ic].value;
    if (c.cols() != 1 || c.rows() != x.rows()) {
        throw ShapeError("sub_col: column must be " + std::to_string(x.rows()) +
                         "x1, got " + shape_string(c));
    }
    Matrix v(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) v(i, j) = x(i, j) - c(i, 0);
    return push(Node{OpKind::sub_col_op, std::move(v), {ia, ic}, 0.0, {}, {}});
}

Var Tape::add_row(Var a, Var row) {
    std::size_t ia = check(a, "add_row"), ir = check(row, "add_row");
    const Matrix& x = nodes_[ia].value;
    const Matrix& r = nodes_[ir].value;
    if (r.rows() != 1 || r.cols() != x.cols()) {
        throw ShapeError("add_row: row must be 1x" + std::to_string(x.cols()) +
                         ", got " + shape_string(r));
    }
    Matrix v(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) v(i, j) = x(i, j) + r(0, j);
    return push(Node{OpKind::add_row_op, std::move(v), {ia, ir}, 0.0, {}, {}});
}

Var Tape::mul_scalar(Var a, Var scalar) {
    std::size_t ia = check(a, "mul_scalar"), is = check(scalar, "mul_scalar");
    const Matrix& s = nodes_[is].value;
    if (s.rows() != 1 || s.cols() != 1) {
        throw ShapeError("mul_scalar: scalar operand must be 1x1, got " +
                         shape_string(s));
    }
    Matrix v = crisp::scale(nodes_[ia].value, s(0, 0));
    return push(Node{OpKind::mul_scalar_op, std::move(v), {ia, is}, 0.0, {}, {}});
}

Var Tape::frobenius(Var a) {
    std::size_t ia = check(a, "frobenius");
    Matrix v(1, 1);
    v(0, 0) = crisp::frobenius_norm(nodes_[ia].value);
    return push(Node{OpKind::frobenius_op, std::move(v), {ia}, 0.0, {}, {}});
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    std::vector<std::size_t> inputs;
    inputs.reserve(parts.size());
    std::size_t rows = 0;
    std::size_t cols = nodes_[check(parts[0], "concat_rows")].value.cols();
    for (Var p : parts) {
        std::size_t ip = check(p, "concat_rows");
        const Matrix& x = nodes_[ip].value;
        if (x.cols() != cols) {
            throw ShapeError("concat_rows: column mismatch, " +
                             std::to_string(cols) + " vs " + shape_string(x));
        }
        rows += x.rows();
        inputs.push_back(ip);
    }
    Matrix v(rows, cols);
    std::size_t at = 0;
    for (std::size_t ip : inputs) {
        const Matrix& x = nodes_[ip].value;
        for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t j = 0; j < cols; ++j) v(at + i, j) = x(i, j);
        at += x.rows();
    }
    return push(Node{OpKind::concat_rows_op, std::move(v), std::move(inputs),
                     0.0, {}, {}});
}

Var Tape::slice_rows(Var a, std::size_t begin, std::size_t end) {
    std::size_t ia = check(a, "slice_rows");
    const Matrix& x = nodes_[ia].value;
    if (begin > end || end > x.rows()) {
        throw ParamError("slice_rows: range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") invalid for " +
                         std::to_string(x.rows()) + " rows");
    }
    Matrix v(end - begin, x.cols());
    for (std::size_t i = begin; i < end; ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) v(i - begin, j) = x(i, j);
    return push(Node{OpKind::slice_rows_op, std::move(v), {ia}, 0.0,
                     {begin, end}, {}});
}

// ---- reverse pass -------------------------------------------------------------

namespace {

void accumulate(Matrix& slot, const Matrix& delta) {
    if (slot.empty() && delta.size() > 0) {
        slot = delta;
    } else if (!delta.empty()) {
        for (std::size_t i = 0; i < slot.size(); ++i) {
            slot.data()[i] += delta.data()[i];
        }
    }
}

Matrix& ensure(Matrix& slot, std::size_t rows, std::size_t cols) {
    if (slot.empty()) slot = Matrix(rows, cols);
    return slot;
}

}  // namespace

Matrix Gradients::wrt(Var v) const {
    if (tape_ == nullptr || v.index >= grads_.size()) {
        throw ContractError("gradients: variable does not belong to this tape");
    }
    if (!grads_[v.index].empty()) return grads_[v.index];
    const Matrix& value = tape_->value(v);
    return Matrix(value.rows(), value.cols());
}

Gradients Tape::backward(Var loss) const {
    std::size_t root = check(loss, "backward");
    const Matrix& lv = nodes_[root].value;
    if (lv.rows() != 1 || lv.cols() != 1) {
        throw ContractError("backward: loss must be 1x1, got " + shape_string(lv));
    }

    Gradients out;
    out.tape_ = this;
    out.grads_.resize(nodes_.size());
    out.grads_[root] = Matrix::filled(1, 1, 1.0);

    for (std::size_t i = root + 1; i-- > 0;) {
        const Node& n = nodes_[i];
        const Matrix& g = out.grads_[i];
        if (g.empty()) continue;

        auto& grads = out.grads_;
        switch (n.kind) {
            case OpKind::leaf:
            case OpKind::constant:
                break;
            case OpKind::add:
                accumulate(grads[n.inputs[0]], g);
                accumulate(grads[n.inputs[1]], g);
                break;
            case OpKind::sub:
                accumulate(grads[n.inputs[0]], g);
                accumulate(grads[n.inputs[1]], crisp::scale(g, -1.0));
                break;
            case OpKind::hadamard:
                accumulate(grads[n.inputs[0]],
                           crisp::hadamard(g, nodes_[n.inputs[1]].value));
                accumulate(grads[n.inputs[1]],
                           crisp::hadamard(g, nodes_[n.inputs[0]].value));
                break;
            case OpKind::scale:
                accumulate(grads[n.inputs[0]], crisp::scale(g, n.scalar));
                break;
            case OpKind::add_scalar:
                accumulate(grads[n.inputs[0]], g);
                break;
            case OpKind::matmul:
                accumulate(grads[n.inputs[0]],
                           crisp::matmul(g, crisp::transpose(nodes_[n.inputs[1]].value)));
                accumulate(grads[n.inputs[1]],
                           crisp::matmul(crisp::transpose(nodes_[n.inputs[0]].value), g));
                break;
            case OpKind::transpose:
                accumulate(grads[n.inputs[0]], crisp::transpose(g));
                break;
            case OpKind::sum_all: {
                const Matrix& x = nodes_[n.inputs[0]].value;
                accumulate(grads[n.inputs[0]],
                           Matrix::filled(x.rows(), x.cols(), g(0, 0)));
                break;
            }
            case OpKind::mean_all: {
                const Matrix& x = nodes_[n.inputs[0]].value;
                accumulate(grads[n.inputs[0]],
                           Matrix::filled(x.rows(), x.cols(),
                                          g(0, 0) / static_cast<double>(x.size())));
                break;
            }
            case OpKind::row_sum: {
                const Matrix& x = nodes_[n.inputs[0]].value;
                Matrix d(x.rows(), x.cols());
                for (std::size_t r = 0; r < x.rows(); ++r)
                    for (std::size_t c = 0; c < x.cols(); ++c) d(r, c) = g(r, 0);
                accumulate(grads[n.inputs[0]], d);
                break;
            }
            case OpKind::exp_el:
                accumulate(grads[n.inputs[0]], crisp::hadamard(g, n.value));
                break;
            case OpKind::log_el: {
                const Matrix& x = nodes_[n.inputs[0]].value;
                Matrix d(x.rows(), x.cols());
                for (std::size_t k = 0; k < x.size(); ++k) {
                    d.data()[k] = g.data()[k] / std::max(x.data()[k], kLogFloor);
                }
                accumulate(grads[n.inputs[0]], d);
                break;
            }
            case OpKind::sigmoid_el: {
                Matrix d(n.value.rows(), n.value.cols());
                for (std::size_t k = 0; k < n.value.size(); ++k) {
                    double y = n.value.data()[k];
                    d.data()[k] = g.data()[k] * y * (1.0 - y);
                }
                accumulate(grads[n.inputs[0]], d);
                break;
            }
            case OpKind::tanh_el: {
                Matrix d(n.value.rows(), n.value.cols());
                for (std::size_t k = 0; k < n.value.size(); ++k) {
                    double y = n.value.data()[k];
                    d.data()[k] = g.data()[k] * (1.0 - y * y);
                }
                accumulate(grads[n.inputs[0]], d);
                break;
            }
            case OpKind::reciprocal_el: {
                Matrix d(n.value.rows(), n.value.cols());
                for (std::size_t k = 0; k < n.value.size(); ++k) {
                    double y = n.value.data()[k];
                    d.data()[k] = -g.data()[k] * y * y;
                }
                accumulate(grads[n.inputs[0]], d);
                break;
            }
            case OpKind::row_normalize_op: {
                // y = x / |x|; dx = (g - (g . y) y) / |x| per row.
                Matrix d(n.value.rows(), n.value.cols());
                for (std::size_t r = 0; r < n.value.rows(); ++r) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < n.value.cols(); ++c) {
                        dot += g(r, c) * n.value(r, c);
                    }
                    for (std::size_t c = 0; c < n.value.cols(); ++c) {
                        d(r, c) = (g(r, c) - dot * n.value(r, c)) / n.saved[r];
                    }
                }
                accumulate(grads[n.inputs[0]], d);
                break;
            }
            case OpKind::softmax_rows_op: {
                // dx = y * (g - (g . y)) per row.
                Matrix d(n.value.rows(), n.value.cols());
                for (std::size_t r = 0; r < n.value.rows(); ++r) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < n.value.cols(); ++c) {
                        dot += g(r, c) * n.value(r, c);
                    }
                    for (std::size_t c = 0; c < n.value.cols(); ++c) {
                        d(r, c) = n.value(r, c) * (g(r, c) - dot);
                    }
                }
                accumulate(grads[n.inputs[0]], d);
                break;
            }
            case OpKind::gather_rows_op: {
                const Matrix& x = nodes_[n.inputs[0]].value;
                Matrix& slot = ensure(grads[n.inputs[0]], x.rows(), x.cols());
                for (std::size_t r = 0; r < n.indices.size(); ++r) {
                    for (std::size_t c = 0; c < x.cols(); ++c) {
                        slot(n.indices[r], c) += g(r, c);
                    }
                }
                break;
            }
            case OpKind::pick_per_row_op: {
                const Matrix& x = nodes_[n.inputs[0]].value;
                Matrix& slot = ensure(grads[n.inputs[0]], x.rows(), x.cols());
                for (std::size_t r = 0; r < n.indices.size(); ++r) {
                    slot(r, n.indices[r]) += g(r, 0);
                }
                break;
            }
            case OpKind::sub_col_op: {
                accumulate(grads[n.inputs[0]], g);
                Matrix d(n.value.rows(), 1);
                for (std::size_t r = 0; r < n.value.rows(); ++r) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < n.value.cols(); ++c) s += g(r, c);
                    d(r, 0) = -s;
                }
                accumulate(grads[n.inputs[1]], d);
                break;
            }
            case OpKind::add_row_op: {
                accumulate(grads[n.inputs[0]], g);
                Matrix d(1, n.value.cols());
                for (std::size_t c = 0; c < n.value.cols(); ++c) {
                    double s = 0.0;
                    for (std::size_t r = 0; r < n.value.rows(); ++r) s += g(r, c);
                    d(0, c) = s;
                }
                accumulate(grads[n.inputs[1]], d);
                break;
            }
            case OpKind::mul_scalar_op: {
                const Matrix& x = nodes_[n.inputs[0]].value;
                double s = nodes_[n.inputs[1]].value(0, 0);
                accumulate(grads[n.inputs[0]], crisp::scale(g, s));
                double acc = 0.0;
                for (std::size_t k = 0; k < x.size(); ++k) {
                    acc += g.data()[k] * x.data()[k];
                }
                accumulate(grads[n.inputs[1]], Matrix::filled(1, 1, acc));
                break;
            }
            case OpKind::frobenius_op: {
                const Matrix& x = nodes_[n.inputs[0]].value;
                double norm = n.value(0, 0);
                // Subgradient 0 at the origin.
                if (norm > 0.0) {
                    accumulate(grads[n.inputs[0]], crisp::scale(x, g(0, 0) / norm));
                }
                break;
            }
            case OpKind::concat_rows_op: {
                std::size_t at = 0;
                for (std::size_t ip : n.inputs) {
                    const Matrix& x = nodes_[ip].value;
                    Matrix d(x.rows(), x.cols());
                    for (std::size_t r = 0; r < x.rows(); ++r)
                        for (std::size_t c = 0; c < x.cols(); ++c) d(r, c) = g(at + r, c);
                    accumulate(grads[ip], d);
                    at += x.rows();
                }
                break;
            }
            case OpKind::slice_rows_op: {
                const Matrix& x = nodes_[n.inputs[0]].value;
                Matrix& slot = ensure(grads[n.inputs[0]], x.rows(), x.cols());
                std::size_t begin = n.indices[0];
                for (std::size_t r = 0; r < n.value.rows(); ++r) {
                    for (std::size_t c = 0; c < x.cols(); ++c) {
                        slot(begin + r, c) += g(r, c);
                    }
                }
                break;
            }
        }
    }

    // Materialize zeros for leaves the loss never touched so callers can rely
    // on wrt() returning a correctly shaped gradient for every parameter.
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (nodes_[i].kind == OpKind::leaf && out.grads_[i].empty()) {
            out.grads_[i] = Matrix(nodes_[i].value.rows(), nodes_[i].value.cols());
        }
    }
    return out;
}

// ---- finite-difference oracle --------------------------------------------------

double gradient_check(const ScalarFn& fn, const std::vector<Matrix>& params,
                      double step) {
    auto eval = [&](const std::vector<Matrix>& p) {
        Tape tape;
        std::vector<Var> leaves;
        leaves.reserve(p.size());
        for (const Matrix& m : p) leaves.push_back(tape.leaf(m));
        Var loss = fn(tape, leaves);
        const Matrix& v = tape.value(loss);
        if (v.rows() != 1 || v.cols() != 1) {
            throw ContractError("gradient_check: function must produce a 1x1 loss");
        }
        return v(0, 0);
    };

    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(params.size());
    for (const Matrix& m : params) leaves.push_back(tape.leaf(m));
    Var loss = fn(tape, leaves);
    const Matrix& lv = tape.value(loss);
    if (lv.rows() != 1 || lv.cols() != 1) {
        throw ContractError("gradient_check: function must produce a 1x1 loss");
    }
    Gradients grads = tape.backward(loss);

    double worst = 0.0;
    std::vector<Matrix> work = params;
    for (std::size_t p = 0; p < params.size(); ++p) {
        Matrix analytic = grads.wrt(leaves[p]);
        for (std::size_t i = 0; i < params[p].size(); ++i) {
            const double saved = work[p].data()[i];
            work[p].data()[i] = saved + step;
            double plus = eval(work);
            work[p].data()[i] = saved - step;
            double minus = eval(work);
            work[p].data()[i] = saved;

            double numeric = (plus - minus) / (2.0 * step);
            double a = analytic.data()[i];
            double rel = std::abs(a - numeric) /
                         std::max({std::abs(a), std::abs(numeric), 1e-8});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace crisp
