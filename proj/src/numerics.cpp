#include "taumerge/numerics.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>

namespace taumerge {

namespace {

constexpr double kSingularCutoff = 1e-12;  // relative to sigma_max
constexpr double kSymmetryTol = 1e-8;
constexpr double kPsdTol = 1e-10;          // relative to trace

// Symmetrize after checking the input is symmetric within tolerance;
// accumulation round-off breaks exact symmetry.
Matrix checked_symmetrize(const Matrix& H, const char* who) {
    if (H.rows() != H.cols()) {
        throw ShapeError(std::string(who) + ": matrix not square");
    }
    require_finite(H, who);
    const double scale = std::max(H.cwiseAbs().maxCoeff(), 1e-300);
    const double asym = (H - H.transpose()).cwiseAbs().maxCoeff();
    if (asym > kSymmetryTol * scale) {
        throw NumericError(std::string(who) + ": input asymmetric beyond tolerance");
    }
    return 0.5 * (H + H.transpose());
}

}  // namespace

Matrix solve_psd(const Matrix& H, const Matrix& rhs) {
    if (H.rows() != rhs.rows()) {
        throw ShapeError("solve_psd: rhs row count does not match H");
    }
    require_finite(rhs, "solve_psd rhs");
    const Matrix S = checked_symmetrize(H, "solve_psd");

    Eigen::SelfAdjointEigenSolver<Matrix> eig(S);
    if (eig.info() != Eigen::Success) {
        throw NumericError("solve_psd: eigendecomposition failed");
    }
    const Vector& ev = eig.eigenvalues();  // ascending
    const double trace = std::max(S.trace(), 0.0);
    if (ev.minCoeff() < -kPsdTol * std::max(trace, 1.0)) {
        throw NumericError("solve_psd: input not PSD within tolerance");
    }

    const double sigma_max = std::max(ev.maxCoeff(), 0.0);
    const double cutoff = kSingularCutoff * sigma_max;
    Vector inv = Vector::Zero(ev.size());
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
        if (ev[i] > cutoff) inv[i] = 1.0 / ev[i];
    }
    return eig.eigenvectors() * inv.asDiagonal() *
           (eig.eigenvectors().transpose() * rhs);
}

SpectralDecomposition truncated_svd(const Matrix& M, double gamma) {
    if (!(gamma > 0.0 && gamma <= 1.0)) {
        throw ShapeError("truncated_svd: gamma must lie in (0, 1]");
    }
    const Matrix S = checked_symmetrize(M, "truncated_svd");

    Eigen::SelfAdjointEigenSolver<Matrix> eig(S);
    if (eig.info() != Eigen::Success) {
        throw NumericError("truncated_svd: eigendecomposition failed");
    }
    const Eigen::Index d = S.rows();
    const double trace = std::max(S.trace(), 0.0);
    if (eig.eigenvalues().minCoeff() < -kPsdTol * std::max(trace, 1.0)) {
        throw NumericError("truncated_svd: input not PSD within tolerance");
    }

    // Descending order; clamp round-off negatives to zero.
    Vector sigma(d);
    Matrix basis(d, d);
    for (Eigen::Index i = 0; i < d; ++i) {
        sigma[i] = std::max(eig.eigenvalues()[d - 1 - i], 0.0);
        basis.col(i) = eig.eigenvectors().col(d - 1 - i);
    }
    const double cutoff = kSingularCutoff * sigma[0];
    const double total_energy = sigma.array().square().sum();

    Eigen::Index r = 0;
    if (total_energy > 0.0) {
        double cum = 0.0;
        for (r = 0; r < d; ++r) {
            if (sigma[r] <= cutoff) break;  // numerical rank reached
            cum += sigma[r] * sigma[r];
            if (cum / total_energy >= gamma) {
                ++r;
                break;
            }
        }
    }

    SpectralDecomposition out;
    out.basis = basis.leftCols(r);
    out.energies = sigma.head(r);
    return out;
}

Matrix reconstruct(const SpectralDecomposition& sd) {
    if (sd.rank() == 0) {
        return Matrix::Zero(sd.basis.rows(), sd.basis.rows());
    }
    return sd.basis * sd.energies.asDiagonal() * sd.basis.transpose();
}

}  // namespace taumerge
