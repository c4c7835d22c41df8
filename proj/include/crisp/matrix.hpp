#pragma once

#include <cstddef>
#include <initializer_list>
#include <iosfwd>
#include <string>
#include <vector>

namespace crisp {

// Dense row-major matrix of doubles. Constructors validate that every entry
// is finite; operations validate shapes and keep a fixed left-to-right
// summation order so results are bit-reproducible across runs.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols);  // zero-filled
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix identity(std::size_t n);
    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
    static Matrix filled(std::size_t rows, std::size_t cols, double value);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double operator()(std::size_t i, std::size_t j) const {
        return data_[i * cols_ + j];
    }
    double& operator()(std::size_t i, std::size_t j) {
        return data_[i * cols_ + j];
    }

    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }

    bool same_shape(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

// Throws DegenerateError naming `what` if any entry is non-finite.
void require_finite(const Matrix& m, const char* what);

// Shape helpers --------------------------------------------------------------

std::string shape_string(const Matrix& m);
void require_same_shape(const Matrix& a, const Matrix& b, const char* op);

// Arithmetic -----------------------------------------------------------------

Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

// Rows scaled to unit Euclidean norm. Rows with norm < 1e-12 raise
// DegenerateError naming the row index.
Matrix row_normalize(const Matrix& a);

// Row-wise softmax with max subtraction; rows sum to 1 within 1e-12 even for
// extreme magnitudes.
Matrix softmax_rows(const Matrix& a);

// A * A^T without forming the transpose; exactly symmetric by construction.
Matrix gram_matrix(const Matrix& a);

double frobenius_norm(const Matrix& a);
double sum(const Matrix& a);
double mean(const Matrix& a);

// True iff shapes match and every entry has the same bit pattern.
bool bits_equal(const Matrix& a, const Matrix& b);

// Text form ------------------------------------------------------------------
// First line "rows cols", then one line per row with entries printed at 17
// significant digits, space separated. Round-trips bit-exactly.

std::string to_text(const Matrix& m);
void write_text(std::ostream& out, const Matrix& m);
Matrix matrix_from_text(std::istream& in);
Matrix matrix_from_text(const std::string& text);

// 17-significant-digit rendering used everywhere a double becomes text.
std::string format_double(double v);

}  // namespace crisp
