#pragma once

#include <map>
#include <optional>
#include <vector>

#include "taumerge/covariance.hpp"

namespace taumerge {

// Merging algebra orientation: features multiply from the left, f(W) = X * W,
// so internally tau has shape d_in x d_out. TaskVector carries d_out x d_in;
// the transpose at the boundary is owned by this module.

struct MergedLayerState {
    TaskVector tau_star;       // d_out x d_in (adapters convention)
    CumulativeCovariance cov;  // H_t for this layer
};

/// Per-layer consolidated task vectors plus their covariance statistics.
struct MergedState {
    std::map<int, MergedLayerState> layers;  // keyed by LayerId.index
    int tasks_merged = 0;
    // When set, covariance is kept SVD-compressed at this energy threshold
    // after every fold (the memory-bounded variant).
    std::optional<double> compress_gamma;
    // Track Q_t = sum X^T X tau alongside H_t (only used to cross-check the
    // batch solution; the recursive path never reads it).
    bool track_momentum = false;
};

/// Zero-initialized state for a declared layer set.
struct LayerSpec {
    LayerId layer;
    int d_in = 0;
    int d_out = 0;
};
MergedState make_merged_state(const std::vector<LayerSpec>& layers,
                              std::optional<double> compress_gamma = {},
                              bool track_momentum = false);

/// One RLS step: fold the batch into H, compute the gain, move tau_star.
MergedState recursive_merge_step(const MergedState& state, const LayerId& layer,
                                 const FeatureBatch& batch, const TaskVector& tau);

/// Same step from a persisted Gram matrix X^T X.
MergedState recursive_merge_step_gram(const MergedState& state, const LayerId& layer,
                                      const Matrix& gram, const TaskVector& tau);

/// Batch least-squares optimum (sum X_i^T X_i)^+ sum X_i^T X_i tau_i,
/// computed jointly. Test oracle for the recursive path.
TaskVector batch_merge_oracle(const std::vector<FeatureBatch>& batches,
                              const std::vector<TaskVector>& taus);

/// ||X (tau_star - tau_i)||_F.
double feature_drift(const FeatureBatch& batch, const TaskVector& merged,
                     const TaskVector& original);

struct TaskLayerInput {
    FeatureBatch batch;
    TaskVector tau;
};
using TaskInput = std::vector<TaskLayerInput>;  // one entry per layer

/// Fold recursive_merge_step over an ordered task stream.
MergedState merge_sequence(const std::vector<TaskInput>& stream,
                           std::optional<double> compress_gamma = {});

/// Per-task, per-layer drift of a merged solution against the original
/// task vectors.
struct DriftReport {
    std::vector<std::vector<double>> per_task_layer;  // [task][layer]
    std::vector<double> per_task_total;
    double grand_total = 0.0;
};

DriftReport drift_report(const std::vector<TaskInput>& stream,
                         const MergedState& merged);

}  // namespace taumerge
