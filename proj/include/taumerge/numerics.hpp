#pragma once

#include "taumerge/adapters.hpp"

namespace taumerge {

/// Symmetric eigendecomposition of a PSD matrix, truncated to the leading
/// components. For PSD input the left and right singular bases coincide, so
/// a single orthonormal basis is stored.
struct SpectralDecomposition {
    Matrix basis;     // d x r, orthonormal columns
    Vector energies;  // length r, nonincreasing, all >= 0

    int rank() const { return static_cast<int>(energies.size()); }
};

/// Least-squares solve of H * X = rhs for symmetric PSD H. Singular values
/// below 1e-12 * sigma_max are treated as zero, giving the minimum-norm
/// (pseudo-inverse) solution on singular input.
Matrix solve_psd(const Matrix& H, const Matrix& rhs);

/// Keep the smallest r such that sum_{i<=r} sigma_i^2 / sum_i sigma_i^2 >= gamma.
SpectralDecomposition truncated_svd(const Matrix& M, double gamma);

/// basis * diag(energies) * basis^T.
Matrix reconstruct(const SpectralDecomposition& sd);

}  // namespace taumerge
