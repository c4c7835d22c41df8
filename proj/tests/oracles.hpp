#pragma once

// Reference implementations used only by tests. Each is written directly from
// the defining formula, independently of the production code paths, so the
// two can disagree when either has a bug.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <vector>

#include "crisp/matrix.hpp"

namespace oracle {

// Naive triple-loop matrix product, accumulating k in ascending order.
inline crisp::Matrix naive_matmul(const crisp::Matrix& a, const crisp::Matrix& b) {
    crisp::Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
            out(i, j) = s;
        }
    }
    return out;
}

struct EigenPair {
    std::vector<double> values;           // descending
    std::vector<std::vector<double>> vectors;  // unit vectors, same order
};

// Closed-form eigendecomposition of a symmetric 2x2 [[a, b], [b, c]].
inline EigenPair eig2(double a, double b, double c) {
    EigenPair out;
    double disc = std::sqrt((a - c) * (a - c) + 4.0 * b * b);
    double l1 = 0.5 * ((a + c) + disc);
    double l2 = 0.5 * ((a + c) - disc);
    auto vec_for = [&](double lambda) {
        std::vector<double> v;
        // (A - lambda I) v = 0; pick the better-conditioned null direction.
        if (std::abs(b) > 1e-300) {
            v = {b, lambda - a};
        } else if (a >= c) {
            v = lambda == l1 ? std::vector<double>{1.0, 0.0}
                             : std::vector<double>{0.0, 1.0};
        } else {
            v = lambda == l1 ? std::vector<double>{0.0, 1.0}
                             : std::vector<double>{1.0, 0.0};
        }
        double n = std::sqrt(v[0] * v[0] + v[1] * v[1]);
        return std::vector<double>{v[0] / n, v[1] / n};
    };
    out.values = {l1, l2};
    out.vectors = {vec_for(l1), vec_for(l2)};
    return out;
}

// Trigonometric closed form for a symmetric 3x3 with distinct eigenvalues.
inline EigenPair eig3(const crisp::Matrix& m) {
    double p1 = m(0, 1) * m(0, 1) + m(0, 2) * m(0, 2) + m(1, 2) * m(1, 2);
    std::vector<double> lambda(3);
    if (p1 == 0.0) {
        lambda = {m(0, 0), m(1, 1), m(2, 2)};
    } else {
        double q = (m(0, 0) + m(1, 1) + m(2, 2)) / 3.0;
        double p2 = (m(0, 0) - q) * (m(0, 0) - q) + (m(1, 1) - q) * (m(1, 1) - q) +
                    (m(2, 2) - q) * (m(2, 2) - q) + 2.0 * p1;
        double p = std::sqrt(p2 / 6.0);
        crisp::Matrix b(3, 3);
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 3; ++j)
                b(i, j) = (m(i, j) - (i == j ? q : 0.0)) / p;
        double det = b(0, 0) * (b(1, 1) * b(2, 2) - b(1, 2) * b(2, 1)) -
                     b(0, 1) * (b(1, 0) * b(2, 2) - b(1, 2) * b(2, 0)) +
                     b(0, 2) * (b(1, 0) * b(2, 1) - b(1, 1) * b(2, 0));
        double r = std::clamp(det / 2.0, -1.0, 1.0);
        double phi = std::acos(r) / 3.0;
        double l1 = q + 2.0 * p * std::cos(phi);
        double l3 = q + 2.0 * p * std::cos(phi + 2.0 * M_PI / 3.0);
        lambda = {l1, 3.0 * q - l1 - l3, l3};
    }
    std::sort(lambda.begin(), lambda.end(), std::greater<>());

    EigenPair out;
    out.values = lambda;
    for (double l : lambda) {
        // Null vector of (M - l I) via the largest cross product of its rows.
        crisp::Matrix s = m;
        for (std::size_t i = 0; i < 3; ++i) s(i, i) -= l;
        std::vector<std::vector<double>> rows(3);
        for (std::size_t i = 0; i < 3; ++i) rows[i] = {s(i, 0), s(i, 1), s(i, 2)};
        auto cross = [](const std::vector<double>& u, const std::vector<double>& v) {
            return std::vector<double>{u[1] * v[2] - u[2] * v[1],
                                       u[2] * v[0] - u[0] * v[2],
                                       u[0] * v[1] - u[1] * v[0]};
        };
        std::vector<double> best;
        double best_norm = -1.0;
        for (std::size_t i = 0; i < 3; ++i) {
            auto c = cross(rows[i], rows[(i + 1) % 3]);
            double n = std::sqrt(c[0] * c[0] + c[1] * c[1] + c[2] * c[2]);
            if (n > best_norm) {
                best_norm = n;
                best = c;
            }
        }
        for (double& x : best) x /= best_norm;
        out.vectors.push_back(best);
    }
    return out;
}

// Power iteration with deflation on a symmetric matrix. Needs clear eigen
// gaps; intended for comparing directions up to sign.
inline EigenPair power_eigen(crisp::Matrix s, std::size_t k, int iters = 20000) {
    const std::size_t n = s.rows();
    EigenPair out;
    for (std::size_t comp = 0; comp < k; ++comp) {
        std::vector<double> v(n);
        for (std::size_t i = 0; i < n; ++i) {
            v[i] = 1.0 / std::sqrt(static_cast<double>(n)) +
                   0.01 * static_cast<double>(i + comp + 1);
        }
        for (int it = 0; it < iters; ++it) {
            std::vector<double> w(n, 0.0);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j) w[i] += s(i, j) * v[j];
            double norm = std::sqrt(std::inner_product(w.begin(), w.end(), w.begin(), 0.0));
            if (norm == 0.0) break;
            for (std::size_t i = 0; i < n; ++i) w[i] /= norm;
            double delta = 0.0;
            for (std::size_t i = 0; i < n; ++i) delta += (w[i] - v[i]) * (w[i] - v[i]);
            v = w;
            if (delta < 1e-30 && it > 50) break;
        }
        double lambda = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) lambda += v[i] * s(i, j) * v[j];
        out.values.push_back(lambda);
        out.vectors.push_back(v);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) s(i, j) -= lambda * v[i] * v[j];
    }
    return out;
}

// Two-pass Pearson correlation between two equal-length sequences.
inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    const std::size_t n = x.size();
    double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
    double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    return sxy / std::sqrt(sxx * syy);
}

// Minimum-cost assignment by exhaustive permutation search, rows >= cols.
// Returns column assigned to each row (SIZE_MAX for unassigned rows) of the
// lexicographically smallest optimal assignment vector, where unassigned
// sorts after every real column index.
inline std::vector<std::size_t> brute_assignment(const crisp::Matrix& cost) {
    const std::size_t n = cost.rows(), m = cost.cols();
    std::vector<std::size_t> rows_perm(n);
    std::iota(rows_perm.begin(), rows_perm.end(), std::size_t{0});

    std::vector<std::size_t> best;
    double best_cost = 0.0;
    std::vector<std::size_t> assign(n, static_cast<std::size_t>(-1));

    // Choose which rows take the m columns and in what order.
    std::vector<std::size_t> cols(m);
    std::iota(cols.begin(), cols.end(), std::size_t{0});

    std::vector<std::size_t> chosen;
    std::vector<bool> used_row(n, false);

    std::function<void()> rec = [&]() {
        if (chosen.size() == m) {
            std::fill(assign.begin(), assign.end(), static_cast<std::size_t>(-1));
            double total = 0.0;
            for (std::size_t c = 0; c < m; ++c) {
                assign[chosen[c]] = c;
                total += cost(chosen[c], c);
            }
            bool better = best.empty() || total < best_cost - 1e-12;
            if (!better && !best.empty() && std::abs(total - best_cost) <= 1e-12) {
                better = assign < best;  // lexicographic on the assignment vector
            }
            if (better) {
                best = assign;
                best_cost = total;
            }
            return;
        }
        for (std::size_t r = 0; r < n; ++r) {
            if (used_row[r]) continue;
            used_row[r] = true;
            chosen.push_back(r);
            rec();
            chosen.pop_back();
            used_row[r] = false;
        }
    };
    rec();
    return best;
}

}  // namespace oracle
