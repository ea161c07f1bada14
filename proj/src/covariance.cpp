#include "taumerge/covariance.hpp"

namespace taumerge {

CumulativeCovariance CumulativeCovariance::zero(LayerId layer, int d) {
    CumulativeCovariance cov;
    cov.layer = std::move(layer);
    cov.full = Matrix::Zero(d, d);
    return cov;
}

CumulativeCovariance update_covariance_gram(const CumulativeCovariance& prev,
                                            const Matrix& gram) {
    if (gram.rows() != prev.dim() || gram.cols() != prev.dim()) {
        throw ShapeError("update_covariance: dimension mismatch");
    }
    require_finite(gram, "update_covariance gram");

    CumulativeCovariance next = prev;
    next.task_count = prev.task_count + 1;
    if (prev.is_compressed) {
        // Reconstruct, add, re-truncate at the stored gamma; keeps memory
        // bounded after every task.
        const Matrix h = reconstruct_covariance(prev) + gram;
        next.spectral = truncated_svd(h, prev.gamma);
        next.full.resize(0, 0);
    } else {
        next.full = prev.full + gram;
    }
    return next;
}

CumulativeCovariance update_covariance(const CumulativeCovariance& prev,
                                       const FeatureBatch& batch) {
    if (!(batch.layer == prev.layer)) {
        throw ShapeError("update_covariance: layer mismatch");
    }
    if (batch.samples.rows() < 1) {
        throw ShapeError("update_covariance: empty batch");
    }
    require_finite(batch.samples, "update_covariance batch");
    return update_covariance_gram(prev, batch.samples.transpose() * batch.samples);
}

CumulativeCovariance compress_covariance(const CumulativeCovariance& cov,
                                         double gamma) {
    if (!(gamma > 0.0 && gamma <= 1.0)) {
        throw ShapeError("compress_covariance: gamma must lie in (0, 1]");
    }
    CumulativeCovariance out = cov;
    out.is_compressed = true;
    out.gamma = gamma;
    out.spectral = truncated_svd(reconstruct_covariance(cov), gamma);
    out.full.resize(0, 0);
    return out;
}

Matrix reconstruct_covariance(const CumulativeCovariance& cov) {
    if (!cov.is_compressed) return cov.full;
    if (cov.spectral.rank() == 0) {
        const auto d = cov.spectral.basis.rows();
        return Matrix::Zero(d, d);
    }
    return reconstruct(cov.spectral);
}

GainMatrix compute_gain_gram(const CumulativeCovariance& cov_t,
                             const Matrix& gram_t) {
    if (cov_t.task_count == 0) {
        throw ShapeError("compute_gain: covariance has not folded any batch");
    }
    if (gram_t.rows() != cov_t.dim() || gram_t.cols() != cov_t.dim()) {
        throw ShapeError("compute_gain: dimension mismatch");
    }
    return GainMatrix{cov_t.layer, solve_psd(reconstruct_covariance(cov_t), gram_t)};
}

GainMatrix compute_gain(const CumulativeCovariance& cov_t,
                        const FeatureBatch& batch_t) {
    if (!(batch_t.layer == cov_t.layer)) {
        throw ShapeError("compute_gain: layer mismatch");
    }
    return compute_gain_gram(cov_t, batch_t.samples.transpose() * batch_t.samples);
}

double storage_ratio(const CumulativeCovariance& cov) {
    const double d = cov.dim();
    if (!cov.is_compressed) return 1.0;
    const double r = cov.spectral.rank();
    return (d * r + r) / (d * d);
}

}  // namespace taumerge
