#include "taumerge/adapters.hpp"

#include <cmath>

namespace taumerge {

void require_finite(const Matrix& m, const std::string& what) {
    if (!m.allFinite()) {
        throw NumericError(what + ": non-finite entries");
    }
}

TaskVector materialize_task_vector(const LowRankAdapter& adapter) {
    if (adapter.up.cols() != adapter.down.rows()) {
        throw ShapeError("materialize_task_vector: up is " +
                         std::to_string(adapter.up.rows()) + "x" +
                         std::to_string(adapter.up.cols()) + ", down is " +
                         std::to_string(adapter.down.rows()) + "x" +
                         std::to_string(adapter.down.cols()));
    }
    require_finite(adapter.up, "adapter.up");
    require_finite(adapter.down, "adapter.down");
    return TaskVector{adapter.layer, adapter.up * adapter.down};
}

TaskVector diff_weights(const Matrix& fine_tuned, const Matrix& base,
                        const LayerId& layer) {
    if (fine_tuned.rows() != base.rows() || fine_tuned.cols() != base.cols()) {
        throw ShapeError("diff_weights: shape mismatch");
    }
    return TaskVector{layer, fine_tuned - base};
}

Matrix assemble_final_weights(const Matrix& base, const TaskVector& merged,
                              double lambda) {
    if (base.rows() != merged.delta.rows() || base.cols() != merged.delta.cols()) {
        throw ShapeError("assemble_final_weights: shape mismatch");
    }
    if (!std::isfinite(lambda)) {
        throw NumericError("assemble_final_weights: non-finite lambda");
    }
    return base + lambda * merged.delta;
}

}  // namespace taumerge
