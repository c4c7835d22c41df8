#include "crisp/pca.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "crisp/errors.hpp"

namespace crisp {

SymmetricEigen jacobi_eigen(const Matrix& symmetric) {
    if (symmetric.rows() != symmetric.cols()) {
        throw ShapeError("jacobi_eigen: matrix must be square, got " +
                         shape_string(symmetric));
    }
    const std::size_t n = symmetric.rows();
    Matrix a = symmetric;
    Matrix v = Matrix::identity(n);

    auto off_diagonal_sq = [&]() {
        double s = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) s += a(p, q) * a(p, q);
        return s;
    };

    const double scale = frobenius_norm(a);
    const double tol = 1e-28 * (scale * scale + 1e-300);
    constexpr int max_sweeps = 128;

    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        if (off_diagonal_sq() <= tol) break;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double apq = a(p, q);
                if (apq == 0.0) continue;
                double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                double t = (theta >= 0.0 ? 1.0 : -1.0) /
                           (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0);
                double s = t * c;

                for (std::size_t i = 0; i < n; ++i) {
                    double aip = a(i, p), aiq = a(i, q);
                    a(i, p) = c * aip - s * aiq;
                    a(i, q) = s * aip + c * aiq;
                }
                for (std::size_t j = 0; j < n; ++j) {
                    double apj = a(p, j), aqj = a(q, j);
                    a(p, j) = c * apj - s * aqj;
                    a(q, j) = s * apj + c * aqj;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    double vip = v(i, p), viq = v(i, q);
                    v(i, p) = c * vip - s * viq;
                    v(i, q) = s * vip + c * viq;
                }
            }
        }
    }

    SymmetricEigen out;
    out.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) out.values[i] = a(i, i);
    out.vectors = std::move(v);
    return out;
}

PcaResult pca(const Matrix& a, std::size_t k) {
    const std::size_t n = a.rows(), d = a.cols();
    if (n < 2) {
        throw ParamError("pca: need at least 2 rows, got " + std::to_string(n));
    }
    if (k < 1 || k > std::min(n, d)) {
        throw ParamError("pca: k = " + std::to_string(k) +
                         " outside [1, min(rows, cols)] for " + shape_string(a));
    }

    PcaResult result;
    result.mean.assign(d, 0.0);
    for (std::size_t j = 0; j < d; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += a(i, j);
        result.mean[j] = s / static_cast<double>(n);
    }

    Matrix centered(n, d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) centered(i, j) = a(i, j) - result.mean[j];

    // Scatter matrix B^T B, symmetric d x d with fixed summation order.
    Matrix scatter(d, d);
    for (std::size_t p = 0; p < d; ++p) {
        for (std::size_t q = 0; q < d; ++q) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += centered(i, p) * centered(i, q);
            scatter(p, q) = s;
        }
    }

    SymmetricEigen eig = jacobi_eigen(scatter);

    std::vector<std::size_t> order(d);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
        return eig.values[x] > eig.values[y];
    });

    result.singular_values.resize(k);
    result.components = Matrix(k, d);
    const double denom = std::sqrt(static_cast<double>(n - 1));
    for (std::size_t r = 0; r < k; ++r) {
        std::size_t idx = order[r];
        double lambda = std::max(eig.values[idx], 0.0);
        double sigma = std::sqrt(lambda);
        result.singular_values[r] = sigma;

        // Direction = eigenvector column, sign-fixed so the entry of largest
        // magnitude (first occurrence on ties) is positive.
        std::size_t arg = 0;
        double best = -1.0;
        for (std::size_t j = 0; j < d; ++j) {
            double mag = std::abs(eig.vectors(j, idx));
            if (mag > best) {
                best = mag;
                arg = j;
            }
        }
        double flip = eig.vectors(arg, idx) < 0.0 ? -1.0 : 1.0;
        double row_scale = flip * sigma / denom;
        for (std::size_t j = 0; j < d; ++j) {
            result.components(r, j) = eig.vectors(j, idx) * row_scale;
        }
    }
    require_finite(result.components, "pca components");
    return result;
}

}  // namespace crisp
