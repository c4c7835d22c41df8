#pragma once

#include <vector>

#include "crisp/matrix.hpp"

namespace crisp {

// Principal component analysis of the rows of a matrix.
//
// `mean` holds the column means of the input. `components` has k rows; row i
// is the i-th principal direction scaled by singular_values[i] / sqrt(n - 1),
// so that summing components[i]^T components[i] over all directions rebuilds
// the sample covariance. `singular_values` are the singular values of the
// centered data, descending; ties keep ascending direction index.
//
// Sign convention: each direction is flipped, if needed, so its
// largest-magnitude entry (first occurrence on ties) is positive.
struct PcaResult {
    std::vector<double> mean;
    Matrix components;
    std::vector<double> singular_values;
};

// Requires rows >= 2 and 1 <= k <= min(rows, cols). Deterministic: cyclic
// Jacobi sweeps on the centered scatter matrix, no randomization.
PcaResult pca(const Matrix& a, std::size_t k);

// Jacobi eigendecomposition of a symmetric matrix. Returns eigenvalues in
// `values` and matching eigenvectors as columns of `vectors`, in the order
// the sweeps leave them (unsorted). Exposed for tests.
struct SymmetricEigen {
    std::vector<double> values;
    Matrix vectors;
};
SymmetricEigen jacobi_eigen(const Matrix& symmetric);

}  // namespace crisp
