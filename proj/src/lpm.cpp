#include "taumerge/lpm.hpp"

#include <algorithm>
#include <cmath>

namespace taumerge {

namespace {

int min_task_count(const MergedState& state) {
    int m = 0;
    bool first = true;
    for (const auto& [idx, ls] : state.layers) {
        if (first || ls.cov.task_count < m) m = ls.cov.task_count;
        first = false;
    }
    return m;
}

}  // namespace

MergedState make_merged_state(const std::vector<LayerSpec>& layers,
                              std::optional<double> compress_gamma,
                              bool track_momentum) {
    MergedState state;
    state.compress_gamma = compress_gamma;
    state.track_momentum = track_momentum;
    for (const auto& spec : layers) {
        MergedLayerState ls;
        ls.tau_star = TaskVector{spec.layer, Matrix::Zero(spec.d_out, spec.d_in)};
        ls.cov = CumulativeCovariance::zero(spec.layer, spec.d_in);
        if (compress_gamma) {
            ls.cov = compress_covariance(ls.cov, *compress_gamma);
        }
        if (track_momentum) {
            ls.cov.momentum = Matrix::Zero(spec.d_in, spec.d_out);
        }
        if (state.layers.count(spec.layer.index)) {
            throw ShapeError("make_merged_state: duplicate layer index");
        }
        state.layers.emplace(spec.layer.index, std::move(ls));
    }
    return state;
}

MergedState recursive_merge_step_gram(const MergedState& state, const LayerId& layer,
                                      const Matrix& gram, const TaskVector& tau) {
    auto it = state.layers.find(layer.index);
    if (it == state.layers.end()) {
        throw ShapeError("recursive_merge_step: unknown layer " + layer.name);
    }
    const MergedLayerState& prev = it->second;
    if (tau.delta.rows() != prev.tau_star.delta.rows() ||
        tau.delta.cols() != prev.tau_star.delta.cols()) {
        throw ShapeError("recursive_merge_step: task vector shape mismatch");
    }
    require_finite(tau.delta, "recursive_merge_step tau");

    MergedState next = state;
    MergedLayerState& ls = next.layers.at(layer.index);
    ls.cov = update_covariance_gram(prev.cov, gram);
    const GainMatrix gain = compute_gain_gram(ls.cov, gram);

    // Merging orientation: X multiplies from the left, tau is d_in x d_out.
    const Matrix t_prev = prev.tau_star.delta.transpose();
    const Matrix t_new = tau.delta.transpose();
    const Matrix t_star = t_prev + gain.gain * (t_new - t_prev);
    ls.tau_star = TaskVector{layer, t_star.transpose()};

    if (state.track_momentum && prev.cov.momentum) {
        ls.cov.momentum = *prev.cov.momentum + gram * t_new;
    }
    next.tasks_merged = min_task_count(next);
    return next;
}

MergedState recursive_merge_step(const MergedState& state, const LayerId& layer,
                                 const FeatureBatch& batch, const TaskVector& tau) {
    if (!(batch.layer == layer) || !(tau.layer == layer)) {
        throw ShapeError("recursive_merge_step: layer mismatch");
    }
    return recursive_merge_step_gram(
        state, layer, batch.samples.transpose() * batch.samples, tau);
}

TaskVector batch_merge_oracle(const std::vector<FeatureBatch>& batches,
                              const std::vector<TaskVector>& taus) {
    if (batches.empty() || batches.size() != taus.size()) {
        throw ShapeError("batch_merge_oracle: need equal nonempty lists");
    }
    const int d_in = batches.front().dim();
    const auto d_out = taus.front().delta.rows();

    Matrix H = Matrix::Zero(d_in, d_in);
    Matrix Q = Matrix::Zero(d_in, d_out);
    for (std::size_t i = 0; i < batches.size(); ++i) {
        if (batches[i].dim() != d_in || taus[i].delta.cols() != d_in ||
            taus[i].delta.rows() != d_out) {
            throw ShapeError("batch_merge_oracle: inconsistent shapes");
        }
        const Matrix gram = batches[i].samples.transpose() * batches[i].samples;
        H += gram;
        Q += gram * taus[i].delta.transpose();
    }
    const Matrix t_star = solve_psd(H, Q);
    return TaskVector{taus.front().layer, t_star.transpose()};
}

double feature_drift(const FeatureBatch& batch, const TaskVector& merged,
                     const TaskVector& original) {
    if (merged.delta.rows() != original.delta.rows() ||
        merged.delta.cols() != original.delta.cols() ||
        batch.dim() != merged.delta.cols()) {
        throw ShapeError("feature_drift: shape mismatch");
    }
    return (batch.samples * (merged.delta - original.delta).transpose()).norm();
}

MergedState merge_sequence(const std::vector<TaskInput>& stream,
                           std::optional<double> compress_gamma) {
    std::vector<LayerSpec> specs;
    if (!stream.empty()) {
        for (const auto& tl : stream.front()) {
            specs.push_back(LayerSpec{tl.batch.layer,
                                      tl.batch.dim(),
                                      static_cast<int>(tl.tau.delta.rows())});
        }
    }
    MergedState state = make_merged_state(specs, compress_gamma);
    for (const auto& task : stream) {
        if (task.size() != specs.size()) {
            throw ShapeError("merge_sequence: inconsistent layer sets");
        }
        for (const auto& tl : task) {
            state = recursive_merge_step(state, tl.batch.layer, tl.batch, tl.tau);
        }
    }
    return state;
}

DriftReport drift_report(const std::vector<TaskInput>& stream,
                         const MergedState& merged) {
    DriftReport report;
    double grand_sq = 0.0;
    for (const auto& task : stream) {
        std::vector<double> per_layer;
        double task_sq = 0.0;
        for (const auto& tl : task) {
            const auto& tau_star = merged.layers.at(tl.batch.layer.index).tau_star;
            const double d = feature_drift(tl.batch, tau_star, tl.tau);
            per_layer.push_back(d);
            task_sq += d * d;
        }
        report.per_task_layer.push_back(std::move(per_layer));
        report.per_task_total.push_back(std::sqrt(task_sq));
        grand_sq += task_sq;
    }
    report.grand_total = std::sqrt(grand_sq);
    return report;
}

}  // namespace taumerge
