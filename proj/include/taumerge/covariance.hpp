#pragma once

#include <optional>

#include "taumerge/numerics.hpp"

namespace taumerge {

/// Input feature matrix X for one task at one layer; rows are samples.
struct FeatureBatch {
    LayerId layer;
    Matrix samples;  // n x d

    int dim() const { return static_cast<int>(samples.cols()); }
};

/// Cumulative feature covariance H_t = sum_i X_i^T X_i, full or
/// SVD-compressed. H_0 = 0. Feature batches are folded in and discarded;
/// no operation ever takes historical batches.
struct CumulativeCovariance {
    LayerId layer;
    bool is_compressed = false;
    Matrix full;                    // d x d when !is_compressed
    SpectralDecomposition spectral; // when is_compressed
    double gamma = 1.0;             // energy threshold used for compression
    int task_count = 0;
    std::optional<Matrix> momentum; // Q_t = sum_i X_i^T X_i tau_i, d x d_out

    int dim() const {
        return is_compressed ? static_cast<int>(spectral.basis.rows())
                             : static_cast<int>(full.rows());
    }

    static CumulativeCovariance zero(LayerId layer, int d);
};

/// S_t = H_t^-1 (X_t^T X_t); eigenvalues lie in [0, 1].
struct GainMatrix {
    LayerId layer;
    Matrix gain;  // d x d
};

CumulativeCovariance update_covariance(const CumulativeCovariance& prev,
                                       const FeatureBatch& batch);

/// Same fold using a precomputed Gram matrix X^T X (the persisted form).
CumulativeCovariance update_covariance_gram(const CumulativeCovariance& prev,
                                            const Matrix& gram);

CumulativeCovariance compress_covariance(const CumulativeCovariance& cov,
                                         double gamma);

Matrix reconstruct_covariance(const CumulativeCovariance& cov);

/// cov_t must already include batch_t (it is H_t, not H_{t-1}).
GainMatrix compute_gain(const CumulativeCovariance& cov_t,
                        const FeatureBatch& batch_t);

GainMatrix compute_gain_gram(const CumulativeCovariance& cov_t,
                             const Matrix& gram_t);

/// Floats stored if persisted compressed: basis d*r + energies r, vs d*d full.
double storage_ratio(const CumulativeCovariance& cov);

}  // namespace taumerge
