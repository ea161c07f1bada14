#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "taumerge/cpm.hpp"
#include "taumerge/lpm.hpp"
#include "taumerge/metrics.hpp"

namespace taumerge {

/// Geometry and size knobs for a synthetic continual task stream.
/// overlap = 0 gives mutually orthogonal task feature subspaces,
/// overlap = 1 a single shared subspace.
struct StreamConfig {
    int task_count = 4;
    int feature_dim = 16;      // d (layer input width)
    int output_dim = 8;        // d_out per layer
    int samples_per_task = 32;
    int eval_samples = 32;
    int adapter_rank = 4;
    int layer_count = 2;
    double overlap = 0.0;
    int proto_dim = 16;        // d_v
    int proto_samples = 32;
    int proj_out_dim = 8;      // d_l
    double proto_separation = 8.0;
    double noise_scale = 0.0;  // perturbs fitting targets
    std::uint64_t seed = 0;

    void validate() const;
};

struct SyntheticTask {
    int index = 0;
    std::vector<FeatureBatch> train;    // per layer, n_s x d
    std::vector<Matrix> targets;        // per layer, d x d_out (fit targets, noisy)
    std::vector<Matrix> eval_features;  // per layer, n_ev x d
    std::vector<Matrix> eval_targets;   // per layer, n_ev x d_out (clean)
    Matrix task_basis;                  // d x k right-singular basis V_t
    std::vector<GlobalFeature> proto_features;
    std::vector<GlobalFeature> eval_queries;
    SpatialFeatures eval_spatial;       // n_tokens x d_v
    Matrix proj_target;                 // d_l x d_v projector target map
};

enum class Strategy { Many, ManyStar, NaiveAverage, FinalTaskOnly, OracleTaskId };

Strategy strategy_from_name(const std::string& name);
std::string strategy_name(Strategy s);

struct RunOptions {
    double lambda = 1.0;  // synthetic tasks need no attenuation compensation
    double gamma = 0.999; // only used by Strategy::ManyStar
    double eta = 0.1;
};

struct EvalReport {
    AccuracyMatrix accuracy;
    Metrics metrics;
    DriftReport drift;
    std::string strategy;
    StreamConfig config;
    RunOptions options;
    // Fraction of eval queries routed to their true task, per stream position.
    std::vector<double> routing_accuracy;
    // Mean covariance storage ratio across layers (1.0 unless compressed).
    double mean_storage_ratio = 1.0;
    double wall_time_ms = 0.0;  // excluded from serialized reports
};

std::vector<SyntheticTask> generate_stream(const StreamConfig& config);

/// Rank-r minimizer of ||X (tau - G)||_F, returned in adapter factored form.
LowRankAdapter fit_task_adapter(const SyntheticTask& task, const LayerId& layer,
                                int rank);

/// Rank-r weighted low-rank solve: argmin_{rank(T)<=r} ||X T - Y||_F,
/// minimum-norm in the null space of X.
Matrix weighted_low_rank_fit(const Matrix& X, const Matrix& Y, int rank);

EvalReport run_continual(const std::vector<SyntheticTask>& stream,
                         Strategy strategy, const StreamConfig& config,
                         const RunOptions& options = {});

}  // namespace taumerge
