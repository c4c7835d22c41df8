#include "crisp/matrix.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>

#include "crisp/errors.hpp"

namespace crisp {

Matrix::Matrix(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw ShapeError("matrix: data length " + std::to_string(data_.size()) +
                         " does not match " + std::to_string(rows_) + "x" +
                         std::to_string(cols_));
    }
    require_finite(*this, "matrix construction");
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    std::size_t r = rows.size();
    std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) {
            throw ShapeError("matrix: ragged initializer rows");
        }
        for (double v : row) data.push_back(v);
    }
    return Matrix(r, c, std::move(data));
}

Matrix Matrix::filled(std::size_t rows, std::size_t cols, double value) {
    return Matrix(rows, cols, std::vector<double>(rows * cols, value));
}

void require_finite(const Matrix& m, const char* what) {
    for (double v : m.data()) {
        if (!std::isfinite(v)) {
            throw DegenerateError(std::string(what) + ": non-finite entry");
        }
    }
}

std::string shape_string(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a) +
                         " vs " + shape_string(b));
    }
}

Matrix add(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "add");
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    require_finite(out, "add");
    return out;
}

Matrix sub(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "sub");
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    require_finite(out, "sub");
    return out;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "hadamard");
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    require_finite(out, "hadamard");
    return out;
}

Matrix scale(const Matrix& a, double s) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * s;
    require_finite(out, "scale");
    return out;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions differ, " + shape_string(a) +
                         " vs " + shape_string(b));
    }
    Matrix out(a.rows(), b.cols());
    const std::size_t n = a.rows(), k_dim = a.cols(), m = b.cols();
    // i-k-j order: each output entry accumulates over k in ascending order,
    // which keeps results identical to the naive triple loop bit for bit.
    for (std::size_t i = 0; i < n; ++i) {
        double* out_row = &out.data()[i * m];
        for (std::size_t k = 0; k < k_dim; ++k) {
            const double aik = a(i, k);
            const double* b_row = &b.data()[k * m];
            for (std::size_t j = 0; j < m; ++j) out_row[j] += aik * b_row[j];
        }
    }
    require_finite(out, "matmul");
    return out;
}

Matrix transpose(const Matrix& a) {
    Matrix out(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
    return out;
}

Matrix row_normalize(const Matrix& a) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double sq = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) sq += a(i, j) * a(i, j);
        double norm = std::sqrt(sq);
        if (norm < 1e-12) {
            throw DegenerateError("row_normalize: row " + std::to_string(i) +
                                  " has norm below 1e-12");
        }
        for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a(i, j) / norm;
    }
    require_finite(out, "row_normalize");
    return out;
}

Matrix softmax_rows(const Matrix& a) {
    if (a.rows() == 0 || a.cols() == 0) {
        throw ShapeError("softmax_rows: empty matrix");
    }
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double mx = a(i, 0);
        for (std::size_t j = 1; j < a.cols(); ++j) mx = std::max(mx, a(i, j));
        double total = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) {
            double e = std::exp(a(i, j) - mx);
            out(i, j) = e;
            total += e;
        }
        for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) /= total;
    }
    require_finite(out, "softmax_rows");
    return out;
}

Matrix gram_matrix(const Matrix& a) {
    Matrix out(a.rows(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.rows(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * a(j, k);
            out(i, j) = s;
        }
    }
    require_finite(out, "gram_matrix");
    return out;
}

double frobenius_norm(const Matrix& a) {
    double sq = 0.0;
    for (double v : a.data()) sq += v * v;
    return std::sqrt(sq);
}

double sum(const Matrix& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return s;
}

double mean(const Matrix& a) {
    if (a.size() == 0) {
        throw DegenerateError("mean: empty matrix");
    }
    return sum(a) / static_cast<double>(a.size());
}

bool bits_equal(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) return false;
    return std::memcmp(a.data().data(), b.data().data(),
                       a.size() * sizeof(double)) == 0;
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string to_text(const Matrix& m) {
    std::ostringstream out;
    write_text(out, m);
    return out.str();
}

void write_text(std::ostream& out, const Matrix& m) {
    out << m.rows() << " " << m.cols() << "\n";
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) {
            if (j) out << " ";
            out << format_double(m(i, j));
        }
        out << "\n";
    }
}

Matrix matrix_from_text(std::istream& in) {
    std::size_t rows = 0, cols = 0;
    if (!(in >> rows >> cols)) {
        throw IoError("matrix text: missing or malformed header");
    }
    std::vector<double> data(rows * cols);
    for (std::size_t i = 0; i < rows * cols; ++i) {
        if (!(in >> data[i])) {
            throw IoError("matrix text: expected " + std::to_string(rows * cols) +
                          " entries, got " + std::to_string(i));
        }
    }
    return Matrix(rows, cols, std::move(data));
}

Matrix matrix_from_text(const std::string& text) {
    std::istringstream in(text);
    return matrix_from_text(in);
}

}  // namespace crisp
