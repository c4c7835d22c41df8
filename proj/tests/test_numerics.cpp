#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "crisp/errors.hpp"
#include "crisp/matrix.hpp"
#include "crisp/pca.hpp"
#include "crisp/rng.hpp"
#include "crisp/tape.hpp"
#include "oracles.hpp"

using namespace crisp;

namespace {

Matrix random_matrix(SeededRng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
    Matrix m(r, c);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.gaussian();
    return m;
}

double rel_frobenius(const Matrix& a, const Matrix& b) {
    return frobenius_norm(sub(a, b)) / std::max(frobenius_norm(a), 1.0);
}

}  // namespace

// ---- matrix -----------------------------------------------------------------

TEST_CASE("matmul identity and known product") {
    SeededRng rng(7);
    Matrix a = random_matrix(rng, 4, 4);
    CHECK(bits_equal(matmul(a, Matrix::identity(4)), a));
    CHECK(bits_equal(matmul(Matrix::identity(4), a), a));

    Matrix x = Matrix::from_rows({{1, 2}, {3, 4}});
    Matrix y = Matrix::from_rows({{5, 6}, {7, 8}});
    Matrix expect = Matrix::from_rows({{19, 22}, {43, 50}});
    CHECK(bits_equal(matmul(x, y), expect));
}

TEST_CASE("matmul shape error names both operand shapes") {
    Matrix a(2, 3), b(2, 2);
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        CHECK(msg.find("2x3") != std::string::npos);
        CHECK(msg.find("2x2") != std::string::npos);
    }
}

TEST_CASE("matmul matches naive triple loop bit for bit over seeds") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        SeededRng rng(seed);
        std::size_t n = 1 + rng.below(6), k = 1 + rng.below(6), m = 1 + rng.below(6);
        Matrix a = random_matrix(rng, n, k);
        Matrix b = random_matrix(rng, k, m);
        CHECK(bits_equal(matmul(a, b), oracle::naive_matmul(a, b)));
    }
}

TEST_CASE("matmul associativity within relative 1e-9") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        SeededRng rng(100 + seed);
        Matrix a = random_matrix(rng, 5, 4);
        Matrix b = random_matrix(rng, 4, 6);
        Matrix c = random_matrix(rng, 6, 3);
        CHECK(rel_frobenius(matmul(matmul(a, b), c), matmul(a, matmul(b, c))) < 1e-9);
    }
}

TEST_CASE("transpose involution and elementwise ops") {
    SeededRng rng(11);
    Matrix a = random_matrix(rng, 5, 3);
    Matrix b = random_matrix(rng, 5, 3);
    CHECK(bits_equal(transpose(transpose(a)), a));
    CHECK(bits_equal(add(a, b), add(b, a)));
    CHECK(bits_equal(hadamard(a, b), hadamard(b, a)));
    CHECK(bits_equal(scale(a, 2.0), add(a, a)));
    CHECK_THROWS_AS(add(Matrix(2, 2), Matrix(3, 2)), ShapeError);
}

TEST_CASE("row_normalize known values and guards") {
    Matrix m = Matrix::from_rows({{3, 4}});
    Matrix n = row_normalize(m);
    CHECK(n(0, 0) == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(n(0, 1) == doctest::Approx(0.8).epsilon(1e-15));

    // Unit rows come back bit-identical.
    Matrix u = Matrix::from_rows({{1, 0}, {0, -1}});
    CHECK(bits_equal(row_normalize(u), u));

    try {
        row_normalize(Matrix::from_rows({{1, 1}, {0, 0}}));
        FAIL("expected DegenerateError");
    } catch (const DegenerateError& e) {
        CHECK(std::string(e.what()).find("row 1") != std::string::npos);
    }

    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        SeededRng rng(300 + seed);
        Matrix r = random_matrix(rng, 8, 5);
        Matrix z = row_normalize(r);
        for (std::size_t i = 0; i < z.rows(); ++i) {
            double sq = 0.0;
            for (std::size_t j = 0; j < z.cols(); ++j) sq += z(i, j) * z(i, j);
            CHECK(std::abs(std::sqrt(sq) - 1.0) < 1e-14);
        }
    }
}

TEST_CASE("softmax_rows stability and normalization") {
    Matrix one_col = softmax_rows(Matrix::from_rows({{3.0}, {-500.0}}));
    CHECK(one_col(0, 0) == 1.0);
    CHECK(one_col(1, 0) == 1.0);

    Matrix even = softmax_rows(Matrix::from_rows({{0.0, 0.0}, {1000.0, 1000.0}}));
    CHECK(even(0, 0) == 0.5);
    CHECK(even(0, 1) == 0.5);
    CHECK(even(1, 0) == 0.5);

    Matrix extreme = softmax_rows(Matrix::from_rows({{1000.0, -1000.0}}));
    CHECK(extreme(0, 0) == doctest::Approx(1.0));
    CHECK(extreme(0, 1) == doctest::Approx(0.0));

    SeededRng rng(13);
    Matrix big = random_matrix(rng, 1000, 8, 700.0);
    Matrix s = softmax_rows(big);
    for (std::size_t i = 0; i < s.rows(); ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < s.cols(); ++j) total += s(i, j);
        CHECK(std::abs(total - 1.0) < 1e-12);
    }
}

TEST_CASE("gram matrix identities") {
    Matrix ortho = Matrix::from_rows({{1, 0, 0}, {0, 0, 1}});
    CHECK(rel_frobenius(gram_matrix(ortho), Matrix::identity(2)) < 1e-12);

    Matrix dup = Matrix::from_rows({{1, 0}, {1, 0}});
    CHECK(bits_equal(gram_matrix(dup), Matrix::filled(2, 2, 1.0)));

    SeededRng rng(17);
    Matrix a = random_matrix(rng, 6, 4);
    Matrix g = gram_matrix(a);
    CHECK(bits_equal(g, matmul(a, transpose(a))));
    CHECK(bits_equal(g, transpose(g)));
}

TEST_CASE("frobenius norm") {
    CHECK(frobenius_norm(Matrix::from_rows({{3, 4}})) == 5.0);
    CHECK(frobenius_norm(Matrix(3, 3)) == 0.0);
}

TEST_CASE("matrix text form round-trips bit-exactly") {
    SeededRng rng(19);
    Matrix a = random_matrix(rng, 4, 3, 1e3);
    a(0, 0) = -0.0;
    a(1, 2) = 1e-308;
    a(2, 1) = -9.8765432109876543e299;
    a(3, 0) = 1.0 / 3.0;
    Matrix back = matrix_from_text(to_text(a));
    CHECK(bits_equal(back, a));

    std::istringstream header("2 3\n1 2 3\n4 5 6\n");
    Matrix m = matrix_from_text(header);
    CHECK(m.rows() == 2);
    CHECK(m.cols() == 3);
    CHECK(m(1, 2) == 6.0);

    std::istringstream truncated("2 2\n1 2\n3\n");
    CHECK_THROWS_AS(matrix_from_text(truncated), IoError);
    std::istringstream garbage("x\n");
    CHECK_THROWS_AS(matrix_from_text(garbage), IoError);
}

TEST_CASE("construction rejects non-finite entries") {
    std::vector<double> bad = {1.0, std::nan("")};
    CHECK_THROWS_AS(Matrix(1, 2, bad), DegenerateError);
    std::vector<double> inf = {1.0, INFINITY};
    CHECK_THROWS_AS(Matrix(1, 2, inf), DegenerateError);
}

// ---- pca ---------------------------------------------------------------------

TEST_CASE("pca worked example with axis-aligned variance") {
    Matrix data = Matrix::from_rows({{3, 0}, {-3, 0}, {0, 1}, {0, -1}});
    PcaResult r = pca(data, 2);
    CHECK(r.mean[0] == 0.0);
    CHECK(r.mean[1] == 0.0);
    CHECK(r.singular_values[0] == doctest::Approx(std::sqrt(18.0)).epsilon(1e-12));
    CHECK(r.singular_values[1] == doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));
    CHECK(r.components(0, 0) == doctest::Approx(std::sqrt(6.0)).epsilon(1e-9));
    CHECK(std::abs(r.components(0, 1)) < 1e-9);
    CHECK(std::abs(r.components(1, 0)) < 1e-9);
    CHECK(r.components(1, 1) == doctest::Approx(std::sqrt(2.0 / 3.0)).epsilon(1e-9));
}

TEST_CASE("pca of identical rows is all-zero") {
    Matrix data = Matrix::from_rows({{2, 5, -1}, {2, 5, -1}, {2, 5, -1}});
    PcaResult r = pca(data, 3);
    for (double s : r.singular_values) CHECK(s == 0.0);
    CHECK(frobenius_norm(r.components) == 0.0);
    CHECK(r.mean[1] == doctest::Approx(5.0));
}

TEST_CASE("pca rank deficiency yields zero trailing singular value") {
    // All rows on the line y = 2x.
    Matrix data = Matrix::from_rows({{1, 2}, {2, 4}, {-1, -2}, {0.5, 1}});
    PcaResult r = pca(data, 2);
    CHECK(r.singular_values[0] > 0.1);
    CHECK(r.singular_values[1] == doctest::Approx(0.0).epsilon(1e-10));
}

TEST_CASE("pca covariance reconstruction from all components") {
    SeededRng rng(23);
    Matrix data = random_matrix(rng, 40, 6);
    PcaResult r = pca(data, 6);

    Matrix rebuilt(6, 6);
    for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t p = 0; p < 6; ++p)
            for (std::size_t q = 0; q < 6; ++q)
                rebuilt(p, q) += r.components(i, p) * r.components(i, q);
    }
    Matrix cov(6, 6);
    std::vector<double> mu(6, 0.0);
    for (std::size_t j = 0; j < 6; ++j) {
        for (std::size_t i = 0; i < 40; ++i) mu[j] += data(i, j);
        mu[j] /= 40.0;
    }
    for (std::size_t p = 0; p < 6; ++p)
        for (std::size_t q = 0; q < 6; ++q) {
            double s = 0.0;
            for (std::size_t i = 0; i < 40; ++i)
                s += (data(i, p) - mu[p]) * (data(i, q) - mu[q]);
            cov(p, q) = s / 39.0;
        }
    CHECK(rel_frobenius(rebuilt, cov) < 1e-8);
}

TEST_CASE("pca directions are mutually orthogonal with contracted row norms") {
    SeededRng rng(29);
    Matrix data = random_matrix(rng, 50, 8);
    PcaResult r = pca(data, 8);
    for (std::size_t i = 0; i < 8; ++i) {
        double row_norm = 0.0;
        for (std::size_t k = 0; k < 8; ++k)
            row_norm += r.components(i, k) * r.components(i, k);
        row_norm = std::sqrt(row_norm);
        CHECK(std::abs(row_norm - r.singular_values[i] / std::sqrt(49.0)) < 1e-10);

        if (r.singular_values[i] < 1e-10) continue;
        for (std::size_t j = i + 1; j < 8; ++j) {
            if (r.singular_values[j] < 1e-10) continue;
            double dot = 0.0;
            for (std::size_t k = 0; k < 8; ++k)
                dot += r.components(i, k) * r.components(j, k);
            dot /= r.singular_values[i] * r.singular_values[j] / 49.0;  // unscale
            CHECK(std::abs(dot) < 1e-10);
        }
    }
}

TEST_CASE("pca matches closed-form symmetric eigensolvers for d <= 3") {
    for (std::uint64_t seed = 0; seed < 12; ++seed) {
        SeededRng rng(400 + seed);
        std::size_t d = 2 + seed % 2;
        std::size_t n = 12;
        Matrix data = random_matrix(rng, n, d);
        // Stretch coordinates so eigenvalues separate clearly.
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) data(i, j) *= (1.0 + 2.0 * static_cast<double>(j));

        PcaResult r = pca(data, d);

        std::vector<double> mu(d, 0.0);
        for (std::size_t j = 0; j < d; ++j) {
            for (std::size_t i = 0; i < n; ++i) mu[j] += data(i, j);
            mu[j] /= static_cast<double>(n);
        }
        Matrix scatter(d, d);
        for (std::size_t p = 0; p < d; ++p)
            for (std::size_t q = 0; q < d; ++q) {
                double s = 0.0;
                for (std::size_t i = 0; i < n; ++i)
                    s += (data(i, p) - mu[p]) * (data(i, q) - mu[q]);
                scatter(p, q) = s;
            }

        oracle::EigenPair ref = d == 2
            ? oracle::eig2(scatter(0, 0), scatter(0, 1), scatter(1, 1))
            : oracle::eig3(scatter);

        for (std::size_t i = 0; i < d; ++i) {
            CHECK(r.singular_values[i] ==
                  doctest::Approx(std::sqrt(std::max(ref.values[i], 0.0))).epsilon(1e-8));
            if (r.singular_values[i] < 1e-8) continue;
            // Compare directions up to sign via |cosine| == 1.
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                dot += r.components(i, j) / (r.singular_values[i] / std::sqrt(n - 1.0)) *
                       ref.vectors[i][j];
            }
            CHECK(std::abs(std::abs(dot) - 1.0) < 1e-8);
        }
    }
}

TEST_CASE("pca matches power-iteration oracle at d = 16") {
    SeededRng rng(31);
    const std::size_t n = 60, d = 16;
    // Build data with a clearly separated spectrum.
    Matrix basis = random_matrix(rng, d, d);
    Matrix data(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < 6; ++k) {
            double coeff = rng.gaussian() * std::pow(1.8, 5.0 - static_cast<double>(k));
            for (std::size_t j = 0; j < d; ++j) data(i, j) += coeff * basis(k, j);
        }
        for (std::size_t j = 0; j < d; ++j) data(i, j) += 0.001 * rng.gaussian();
    }

    PcaResult r = pca(data, 4);

    std::vector<double> mu(d, 0.0);
    for (std::size_t j = 0; j < d; ++j) {
        for (std::size_t i = 0; i < n; ++i) mu[j] += data(i, j);
        mu[j] /= static_cast<double>(n);
    }
    Matrix scatter(d, d);
    for (std::size_t p = 0; p < d; ++p)
        for (std::size_t q = 0; q < d; ++q) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i)
                s += (data(i, p) - mu[p]) * (data(i, q) - mu[q]);
            scatter(p, q) = s;
        }
    oracle::EigenPair ref = oracle::power_eigen(scatter, 4);

    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(r.singular_values[i] ==
              doctest::Approx(std::sqrt(ref.values[i])).epsilon(1e-8));
        double dot = 0.0, self = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            double dir = r.components(i, j);
            dot += dir * ref.vectors[i][j];
            self += dir * dir;
        }
        CHECK(std::abs(std::abs(dot) / std::sqrt(self) - 1.0) < 1e-8);
    }
}

TEST_CASE("pca sign convention and tie ordering") {
    // Isotropic data: exactly equal eigenvalues keep original axis order.
    Matrix iso = Matrix::from_rows({{1, 0}, {-1, 0}, {0, 1}, {0, -1}});
    PcaResult r = pca(iso, 2);
    double expected = std::sqrt(2.0 / 3.0);
    CHECK(r.components(0, 0) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(r.components(1, 1) == doctest::Approx(expected).epsilon(1e-12));
    // Largest-magnitude entries are positive under the sign convention.
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        SeededRng rng(500 + seed);
        Matrix data = random_matrix(rng, 20, 5);
        PcaResult p = pca(data, 5);
        for (std::size_t i = 0; i < 5; ++i) {
            if (p.singular_values[i] < 1e-10) continue;
            double best = -1.0;
            std::size_t arg = 0;
            for (std::size_t j = 0; j < 5; ++j) {
                if (std::abs(p.components(i, j)) > best) {
                    best = std::abs(p.components(i, j));
                    arg = j;
                }
            }
            CHECK(p.components(i, arg) > 0.0);
        }
    }
}

TEST_CASE("pca parameter validation") {
    Matrix data(5, 3);
    CHECK_THROWS_AS(pca(data, 0), ParamError);
    CHECK_THROWS_AS(pca(data, 4), ParamError);
    CHECK_THROWS_AS(pca(Matrix(1, 3), 1), ParamError);
}

TEST_CASE("pca is deterministic") {
    SeededRng rng(37);
    Matrix data = random_matrix(rng, 30, 7);
    PcaResult a = pca(data, 5);
    PcaResult b = pca(data, 5);
    CHECK(bits_equal(a.components, b.components));
    CHECK(a.singular_values == b.singular_values);
}

// ---- tape --------------------------------------------------------------------

TEST_CASE("backward of sum is all ones") {
    Tape t;
    SeededRng rng(41);
    Matrix a = random_matrix(rng, 3, 4);
    Var x = t.leaf(a);
    Gradients g = t.backward(t.sum_all(x));
    CHECK(bits_equal(g.wrt(x), Matrix::filled(3, 4, 1.0)));
}

TEST_CASE("backward of squared frobenius is 2A") {
    Tape t;
    SeededRng rng(43);
    Matrix a = random_matrix(rng, 4, 4);
    Var x = t.leaf(a);
    Var loss = t.sum_all(t.hadamard(x, x));
    Gradients g = t.backward(loss);
    CHECK(bits_equal(g.wrt(x), scale(a, 2.0)));
}

TEST_CASE("shared subexpressions accumulate") {
    Tape t;
    Var x = t.leaf(Matrix::filled(2, 2, 3.0));
    Var y = t.add(x, x);
    Gradients g = t.backward(t.sum_all(y));
    CHECK(bits_equal(g.wrt(x), Matrix::filled(2, 2, 2.0)));
}

TEST_CASE("unreachable leaves get explicit zero gradients") {
    Tape t;
    Var used = t.leaf(Matrix::filled(2, 2, 1.0));
    Var unused = t.leaf(Matrix::filled(3, 1, 5.0));
    Gradients g = t.backward(t.sum_all(used));
    Matrix gz = g.wrt(unused);
    CHECK(gz.rows() == 3);
    CHECK(gz.cols() == 1);
    CHECK(frobenius_norm(gz) == 0.0);
}

TEST_CASE("backward requires scalar loss") {
    Tape t;
    Var x = t.leaf(Matrix::filled(2, 2, 1.0));
    CHECK_THROWS_AS(t.backward(x), ContractError);
}

TEST_CASE("gradient_check on quadratic is near machine precision") {
    SeededRng rng(47);
    Matrix a = random_matrix(rng, 3, 3);
    double err = gradient_check(
        [](Tape& t, const std::vector<Var>& p) {
            return t.sum_all(t.hadamard(p[0], p[0]));
        },
        {a});
    CHECK(err < 1e-8);
}

TEST_CASE("gradient_check on softmax cross-entropy toy") {
    SeededRng rng(53);
    Matrix logits = random_matrix(rng, 4, 5);
    double err = gradient_check(
        [](Tape& t, const std::vector<Var>& p) {
            Var probs = t.softmax_rows(p[0]);
            Var logp = t.log(probs);
            Var picked = t.pick_per_row(logp, {0, 2, 4, 1});
            return t.scale(t.sum_all(picked), -0.25);
        },
        {logits});
    CHECK(err < 1e-5);
}

TEST_CASE("every primitive passes finite-difference checks across seeds") {
    struct Case {
        const char* name;
        ScalarFn fn;
        std::function<std::vector<Matrix>(SeededRng&)> make;
    };

    // Loss = sum(op * positive_weights). Positive weights keep reduction
    // gradients bounded away from zero, so finite-difference noise at
    // step 1e-5 stays far below the 1e-6 relative tolerance.
    auto weighted_sum = [](Tape& t, Var v, std::uint64_t seed) {
        const Matrix& val = t.value(v);
        SeededRng wr(seed);
        Matrix w(val.rows(), val.cols());
        for (std::size_t i = 0; i < w.size(); ++i) {
            w.data()[i] = 0.5 + std::abs(wr.gaussian());
        }
        return t.sum_all(t.hadamard(v, t.constant(w)));
    };
    // Entries in [0.25, 2.5]: inside the well-conditioned region of every
    // saturating op, and bounded away from zero.
    auto positive_matrix = [](SeededRng& r, std::size_t rows, std::size_t cols) {
        Matrix m(rows, cols);
        for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = 0.25 + 2.25 * r.uniform01();
        return m;
    };

    std::vector<Case> cases;
    cases.push_back({"add", [&](Tape& t, const std::vector<Var>& p) {
        return weighted_sum(t, t.add(p[0], p[1]), 1);
    }, [&](SeededRng& r) {
        return std::vector<Matrix>{random_matrix(r, 3, 4), random_matrix(r, 3, 4)};
    }});
    cases.push_back({"sub", [&](Tape& t, const std::vector<Var>& p) {
        return weighted_sum(t, t.sub(p[0], p[1]), 2);
    }, [&](SeededRng& r) {
        return std::vector<Matrix>{random_matrix(r, 3, 4), random_matrix(r, 3, 4)};
    }});
    cases.push_back({"hadamard", [&](Tape& t, const std::vector<Var>& p) {
        return weighted_sum(t, t.hadamard(p[0], p[1]), 3);
    }, [&](SeededRng& r) {
        return std::vector<Matrix>{positive_matrix(r, 3, 4), positive_matrix(r, 3, 4)};
    }});
    cases.push_back({"scale", [&](Tape& t, const std::vector<Var>& p) {
        return weighted_sum(t, t.scale(p[0], -1.7), 4);
    }, [&](SeededRng& r) { return std::vector<Matrix>{random_matrix(r, 3, 4)}; }});
    cases.push_back({"matmul", [&](Tape& t, const std::vector<Var>& p) {
        return weighted_sum(t, t.matmul(p[0], p[1]), 5);
    }, [&](SeededRng& r) {
        return std::vector<Matrix>{positive_matrix(r, 3, 4), positive_matrix(r, 4, 2)};
    }});
    cases.push_back({"transpose", [&](Tape& t, const std::vector<Var>& p) {
        return weighted_sum(t, t.transpose(p[0]), 6);
    }, [&](SeededRng& r) { return std::vector<Matrix>{random_matrix(r, 3, 4)}; }});
    cases.push_back({"mean_all", [&](Tape& t, const std::vector<Var>& p) {
        return t.mean_all(p[0]);
    }, [&](SeededRng& r) { return std::vector<Matrix>{random_matrix(r, 3, 4)}; }});
    cases.push_back({"row_sum", [&](Tape& t, const std::vector<Var>& p) {
        return weighted_sum(t, t.row_sum(p[0]), 7);
    }, [&](SeededRng& r) { return std::vector<Matrix>{random_matrix(r, 3, 4)}; }});
    cases.push_back({"exp", [&](Tape& t, const std::vector<Var>& p) {
        return weighted_sum(t, t.exp(p[0]), 8);
    }, [&](SeededRng& r) { return std::vector<Matrix>{positive_matrix(r, 3, 4)}; }});
    cases.push_back({"log", [&](Tape& t, const std::vector<Var>& p) {
        return weighted_sum(t, t.log(p[0]), 9);
    }, [&](SeededRng& r) { return std::vector<Matrix>{positive_matrix(r, 3, 4)}; }});
    cases.push_back({"sigmoid", [&](Tape& t, const std::vector<Var>& p) {
        return weighted_sum(t, t.sigmoid(p[0]), 10);
    }, [&](SeededRng& r) { return std::vector<Matrix>{positive_matrix(r, 3, 4)}; }});
    cases.push_back({"tanh", [&](Tape& t, const std::vector<Var>& p) {
        return weighted_sum(t, t.tanh(p[0]), 11);
    }, [&](SeededRng& r) { return std::vector<Matrix>{positive_matrix(r, 3, 4)}; }});
    cases.push_back({"reciprocal", [&](Tape& t, const std::vector<Var>& p) {
        return weighted_sum(t, t.reciprocal(p[0]), 12);
    }, [&](SeededRng& r) { return std::vector<Matrix>{positive_matrix(r, 3, 4)}; }});
    cases.push_back({"row_normalize", [&](Tape& t, const std::vector<Var>& p) {
        return weighted_sum(t, t.row_normalize(p[0]), 13);
    }, [&](SeededRng& r) { return std::vector<Matrix>{positive_matrix(r, 3, 4)}; }});
    cases.push_back({"softmax_rows", [&](Tape& t, const std::vector<Var>& p) {
        return weighted_sum(t, t.softmax_rows(p[0]), 14);
    }, [&](SeededRng& r) { return std::vector<Matrix>{positive_matrix(r, 3, 4)}; }});
    cases.push_back({"gather_rows", [&](Tape& t, const std::vector<Var>& p) {
        return weighted_sum(t, t.gather_rows(p[0], {2, 0, 2, 1}), 15);
    }, [&](SeededRng& r) { return std::vector<Matrix>{random_matrix(r, 3, 4)}; }});
    cases.push_back({"pick_per_row", [&](Tape& t, const std::vector<Var>& p) {
        return weighted_sum(t, t.pick_per_row(p[0], {1, 3, 0}), 16);
    }, [&](SeededRng& r) { return std::vector<Matrix>{random_matrix(r, 3, 4)}; }});
    cases.push_back({"sub_col", [&](Tape& t, const std::vector<Var>& p) {
        return weighted_sum(t, t.sub_col(p[0], p[1]), 17);
    }, [&](SeededRng& r) {
        return std::vector<Matrix>{random_matrix(r, 3, 4), random_matrix(r, 3, 1)};
    }});
    cases.push_back({"add_row", [&](Tape& t, const std::vector<Var>& p) {
        return weighted_sum(t, t.add_row(p[0], p[1]), 18);
    }, [&](SeededRng& r) {
        return std::vector<Matrix>{random_matrix(r, 3, 4), random_matrix(r, 1, 4)};
    }});
    cases.push_back({"mul_scalar", [&](Tape& t, const std::vector<Var>& p) {
        return weighted_sum(t, t.mul_scalar(p[0], p[1]), 19);
    }, [&](SeededRng& r) {
        return std::vector<Matrix>{positive_matrix(r, 3, 4), positive_matrix(r, 1, 1)};
    }});
    cases.push_back({"frobenius", [&](Tape& t, const std::vector<Var>& p) {
        return t.frobenius(p[0]);
    }, [&](SeededRng& r) { return std::vector<Matrix>{positive_matrix(r, 3, 4)}; }});
    cases.push_back({"concat_rows", [&](Tape& t, const std::vector<Var>& p) {
        return weighted_sum(t, t.concat_rows({p[0], p[1], p[0]}), 20);
    }, [&](SeededRng& r) {
        return std::vector<Matrix>{random_matrix(r, 2, 4), random_matrix(r, 3, 4)};
    }});
    cases.push_back({"slice_rows", [&](Tape& t, const std::vector<Var>& p) {
        return weighted_sum(t, t.slice_rows(p[0], 1, 4), 21);
    }, [&](SeededRng& r) { return std::vector<Matrix>{random_matrix(r, 5, 3)}; }});
    cases.push_back({"add_scalar", [&](Tape& t, const std::vector<Var>& p) {
        return weighted_sum(t, t.add_scalar(p[0], 2.5), 22);
    }, [&](SeededRng& r) { return std::vector<Matrix>{random_matrix(r, 3, 4)}; }});

    for (const Case& c : cases) {
        INFO("op: " << c.name);
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            SeededRng rng(1000 + seed * 31);
            std::vector<Matrix> params = c.make(rng);
            double err = gradient_check(c.fn, params);
            INFO("seed " << seed << " err " << err);
            CHECK(err < 1e-4);
        }
    }
}

TEST_CASE("log floors its argument at 1e-300") {
    Tape t;
    Var x = t.leaf(Matrix::from_rows({{0.0, 1.0}}));
    Var y = t.log(x);
    CHECK(t.value(y)(0, 0) == doctest::Approx(std::log(1e-300)));
    CHECK(t.value(y)(0, 1) == 0.0);
    Gradients g = t.backward(t.sum_all(y));
    CHECK(std::isfinite(g.wrt(x)(0, 0)));
}

TEST_CASE("backward twice on the same graph is bit-identical") {
    SeededRng rng(59);
    Matrix a = random_matrix(rng, 4, 4);
    Matrix b = random_matrix(rng, 4, 4);

    auto run = [&]() {
        Tape t;
        Var x = t.leaf(a);
        Var y = t.leaf(b);
        Var z = t.matmul(t.softmax_rows(x), t.tanh(y));
        Var loss = t.mean_all(t.hadamard(z, z));
        Gradients g = t.backward(loss);
        return std::pair<Matrix, Matrix>(g.wrt(x), g.wrt(y));
    };
    auto [g1x, g1y] = run();
    auto [g2x, g2y] = run();
    CHECK(bits_equal(g1x, g2x));
    CHECK(bits_equal(g1y, g2y));
}

TEST_CASE("rng streams are deterministic and tag-separated") {
    SeededRng a(123), b(123);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    CHECK(derive_seed(1, "generator") != derive_seed(1, "training"));
    CHECK(derive_seed(1, "generator") == derive_seed(1, "generator"));
    CHECK(derive_seed(7, std::uint64_t{0}) != derive_seed(7, std::uint64_t{1}));

    SeededRng g(99);
    for (int i = 0; i < 1000; ++i) {
        double u = g.uniform01();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        CHECK(g.below(17) < 17);
        CHECK(std::isfinite(g.gaussian()));
    }
}
