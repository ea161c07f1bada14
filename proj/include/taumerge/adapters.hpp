#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace taumerge {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Shape or argument violations detected at construction / call boundaries.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Numerical contract violations (non-finite data, asymmetry, non-PSD input).
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Persistence failures (truncated blobs, checksum mismatch, bad manifests).
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Identifies one linear layer of the frozen backbone. Layers are treated
/// abstractly as an ordered list; no attention/MLP semantics attached.
struct LayerId {
    int index = 0;
    std::string name;

    friend bool operator==(const LayerId&, const LayerId&) = default;
};

void require_finite(const Matrix& m, const std::string& what);

/// Dense weight delta for one layer, tau = B * A, shape d_out x d_in.
struct TaskVector {
    LayerId layer;
    Matrix delta;
};

/// Bias-free low-rank adapter: up (d_out x r) times down (r x d_in).
struct LowRankAdapter {
    LayerId layer;
    Matrix down;
    Matrix up;
    int rank = 0;
};

/// tau = up * down.
TaskVector materialize_task_vector(const LowRankAdapter& adapter);

/// tau = fine_tuned - base, element-wise.
TaskVector diff_weights(const Matrix& fine_tuned, const Matrix& base,
                        const LayerId& layer);

/// W_final = base + lambda * merged.delta.
Matrix assemble_final_weights(const Matrix& base, const TaskVector& merged,
                              double lambda);

}  // namespace taumerge
