#include "taumerge/simulator.hpp"

#include <Eigen/QR>
#include <Eigen/SVD>

#include <chrono>
#include <cmath>
#include <random>

namespace taumerge {

namespace {

Matrix gaussian(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols) {
    std::normal_distribution<double> dist(0.0, 1.0);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) {
            m(i, j) = dist(rng);
        }
    }
    return m;
}

Matrix random_orthonormal(std::mt19937_64& rng, Eigen::Index dim, Eigen::Index cols) {
    const Matrix g = gaussian(rng, dim, cols);
    Eigen::HouseholderQR<Matrix> qr(g);
    Matrix q = qr.householderQ() * Matrix::Identity(dim, cols);
    // Fix column signs so the basis is a deterministic function of g alone.
    const Matrix rmat = qr.matrixQR().topRows(cols).triangularView<Eigen::Upper>();
    for (Eigen::Index j = 0; j < cols; ++j) {
        if (rmat(j, j) < 0.0) q.col(j) = -q.col(j);
    }
    return q;
}

LayerId layer_id(int l) { return LayerId{l, "layer" + std::to_string(l)}; }

struct Geometry {
    int shared = 0;  // dims shared by every task
    int unique = 0;  // dims private to each task
};

Geometry subspace_geometry(const StreamConfig& c) {
    Geometry g;
    const double d = c.feature_dim;
    g.unique = c.overlap < 1.0
                   ? static_cast<int>(std::ceil(d * (1.0 - c.overlap) / c.task_count))
                   : 0;
    const int k = static_cast<int>(std::ceil(d / c.task_count));
    g.shared = std::max(k - g.unique, 0);
    return g;
}

}  // namespace

void StreamConfig::validate() const {
    if (task_count < 1 || feature_dim < 1 || output_dim < 1 || layer_count < 1 ||
        samples_per_task < 1 || eval_samples < 1 || proto_samples < 1 ||
        proto_dim < 1 || proj_out_dim < 1) {
        throw ShapeError("StreamConfig: counts must be positive");
    }
    if (overlap < 0.0 || overlap > 1.0) {
        throw ShapeError("StreamConfig: overlap must lie in [0, 1]");
    }
    if (adapter_rank < 1 || adapter_rank > std::min(feature_dim, output_dim)) {
        throw ShapeError("StreamConfig: adapter rank infeasible");
    }
    if (!(noise_scale >= 0.0) || !(proto_separation >= 0.0)) {
        throw ShapeError("StreamConfig: scales must be nonnegative");
    }
    const Geometry g = subspace_geometry(*this);
    if (g.shared + task_count * g.unique > feature_dim) {
        throw ShapeError("StreamConfig: infeasible subspace geometry");
    }
    if (proto_dim < task_count) {
        throw ShapeError("StreamConfig: proto_dim must be >= task_count");
    }
}

std::vector<SyntheticTask> generate_stream(const StreamConfig& config) {
    config.validate();
    std::mt19937_64 rng(config.seed);
    const Geometry geo = subspace_geometry(config);
    const int k = geo.shared + geo.unique;
    const int n_tokens = 8;

    const Matrix global_basis =
        random_orthonormal(rng, config.feature_dim,
                           geo.shared + config.task_count * geo.unique);
    const Matrix centers =
        random_orthonormal(rng, config.proto_dim, config.task_count) *
        config.proto_separation;

    std::vector<SyntheticTask> stream;
    stream.reserve(static_cast<std::size_t>(config.task_count));
    for (int t = 0; t < config.task_count; ++t) {
        SyntheticTask task;
        task.index = t;

        Matrix basis(config.feature_dim, k);
        basis.leftCols(geo.shared) = global_basis.leftCols(geo.shared);
        basis.rightCols(geo.unique) =
            global_basis.middleCols(geo.shared + t * geo.unique, geo.unique);
        task.task_basis = basis;

        for (int l = 0; l < config.layer_count; ++l) {
            const Matrix coeff = gaussian(rng, config.samples_per_task, k);
            const Matrix coeff_ev = gaussian(rng, config.eval_samples, k);
            const Matrix g_clean =
                basis * gaussian(rng, k, config.output_dim);
            Matrix g_fit = g_clean;
            if (config.noise_scale > 0.0) {
                g_fit += config.noise_scale *
                         gaussian(rng, config.feature_dim, config.output_dim);
            }
            const Matrix x = coeff * basis.transpose();
            const Matrix x_ev = coeff_ev * basis.transpose();
            task.train.push_back(FeatureBatch{layer_id(l), x});
            task.targets.push_back(g_fit);
            task.eval_features.push_back(x_ev);
            task.eval_targets.push_back(x_ev * g_clean);
        }

        const Vector center = centers.col(t);
        for (int j = 0; j < config.proto_samples; ++j) {
            task.proto_features.push_back(
                GlobalFeature{center + gaussian(rng, config.proto_dim, 1).col(0)});
        }
        for (int j = 0; j < config.eval_samples; ++j) {
            task.eval_queries.push_back(
                GlobalFeature{center + gaussian(rng, config.proto_dim, 1).col(0)});
        }
        task.eval_spatial = SpatialFeatures{gaussian(rng, n_tokens, config.proto_dim)};
        task.proj_target = gaussian(rng, config.proj_out_dim, config.proto_dim);
        stream.push_back(std::move(task));
    }
    return stream;
}

Matrix weighted_low_rank_fit(const Matrix& X, const Matrix& Y, int rank) {
    if (X.rows() != Y.rows()) {
        throw ShapeError("weighted_low_rank_fit: sample counts differ");
    }
    if (rank < 1) {
        throw ShapeError("weighted_low_rank_fit: rank must be positive");
    }
    Eigen::BDCSVD<Matrix> svd(X, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Vector& s = svd.singularValues();
    const double cutoff = 1e-12 * (s.size() > 0 ? s[0] : 0.0);

    // Project Y onto the column space of X, then truncate to rank r; the
    // minimizer is X^+ times that truncation (minimum-norm off the row space).
    Matrix py = Matrix::Zero(Y.rows(), Y.cols());
    for (Eigen::Index i = 0; i < s.size(); ++i) {
        if (s[i] > cutoff) {
            py += svd.matrixU().col(i) * (svd.matrixU().col(i).transpose() * Y);
        }
    }
    Matrix z = py;
    if (rank < std::min(py.rows(), py.cols())) {
        Eigen::BDCSVD<Matrix> tsvd(py, Eigen::ComputeThinU | Eigen::ComputeThinV);
        const auto r = std::min<Eigen::Index>(rank, tsvd.singularValues().size());
        z = tsvd.matrixU().leftCols(r) *
            tsvd.singularValues().head(r).asDiagonal() *
            tsvd.matrixV().leftCols(r).transpose();
    }
    Matrix t = Matrix::Zero(X.cols(), Y.cols());
    for (Eigen::Index i = 0; i < s.size(); ++i) {
        if (s[i] > cutoff) {
            t += svd.matrixV().col(i) *
                 ((svd.matrixU().col(i).transpose() * z) / s[i]);
        }
    }
    return t;
}

LowRankAdapter fit_task_adapter(const SyntheticTask& task, const LayerId& layer,
                                int rank) {
    const auto l = static_cast<std::size_t>(layer.index);
    if (l >= task.train.size()) {
        throw ShapeError("fit_task_adapter: unknown layer");
    }
    const Matrix& X = task.train[l].samples;
    const Matrix& G = task.targets[l];
    if (rank > std::min(X.cols(), G.cols())) {
        throw ShapeError("fit_task_adapter: rank infeasible");
    }
    const Matrix tau = weighted_low_rank_fit(X, X * G, rank).transpose();  // d_out x d_in

    Eigen::BDCSVD<Matrix> svd(tau, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto r = std::min<Eigen::Index>(rank, svd.singularValues().size());
    LowRankAdapter adapter;
    adapter.layer = layer;
    adapter.rank = rank;
    adapter.up = svd.matrixU().leftCols(r) * svd.singularValues().head(r).asDiagonal();
    adapter.down = svd.matrixV().leftCols(r).transpose();
    return adapter;
}

Strategy strategy_from_name(const std::string& name) {
    if (name == "many") return Strategy::Many;
    if (name == "many_star") return Strategy::ManyStar;
    if (name == "naive_average") return Strategy::NaiveAverage;
    if (name == "final_task_only") return Strategy::FinalTaskOnly;
    if (name == "oracle_task_id") return Strategy::OracleTaskId;
    throw ShapeError("unknown strategy: " + name);
}

std::string strategy_name(Strategy s) {
    switch (s) {
        case Strategy::Many: return "many";
        case Strategy::ManyStar: return "many_star";
        case Strategy::NaiveAverage: return "naive_average";
        case Strategy::FinalTaskOnly: return "final_task_only";
        case Strategy::OracleTaskId: return "oracle_task_id";
    }
    throw ShapeError("unknown strategy");
}

namespace {

// Per-layer task vectors the strategy exposes for evaluating task j after
// stream position t.
struct StrategyState {
    MergedState merged;                                // many / many_star
    std::vector<std::vector<TaskVector>> per_task;     // [task][layer]
    std::vector<TaskVector> average;                   // running mean

    const TaskVector& tau_for(Strategy s, int t, int j, int layer) const {
        switch (s) {
            case Strategy::Many:
            case Strategy::ManyStar:
                return merged.layers.at(layer).tau_star;
            case Strategy::NaiveAverage:
                return average[static_cast<std::size_t>(layer)];
            case Strategy::FinalTaskOnly:
                return per_task[static_cast<std::size_t>(t)]
                               [static_cast<std::size_t>(layer)];
            case Strategy::OracleTaskId:
                return per_task[static_cast<std::size_t>(j)]
                               [static_cast<std::size_t>(layer)];
        }
        throw ShapeError("unknown strategy");
    }
};

}  // namespace

EvalReport run_continual(const std::vector<SyntheticTask>& stream,
                         Strategy strategy, const StreamConfig& config,
                         const RunOptions& options) {
    if (stream.empty()) {
        throw ShapeError("run_continual: empty stream");
    }
    const auto t0 = std::chrono::steady_clock::now();

    std::vector<LayerSpec> specs;
    for (int l = 0; l < config.layer_count; ++l) {
        specs.push_back(LayerSpec{layer_id(l), config.feature_dim, config.output_dim});
    }
    std::optional<double> gamma;
    if (strategy == Strategy::ManyStar) gamma = options.gamma;

    StrategyState st;
    st.merged = make_merged_state(specs, gamma);
    ProjectorRegistry registry;
    registry.temperature = options.eta;

    EvalReport report;
    report.strategy = strategy_name(strategy);
    report.config = config;
    report.options = options;

    for (std::size_t t = 0; t < stream.size(); ++t) {
        const SyntheticTask& task = stream[t];

        std::vector<TaskVector> taus;
        for (int l = 0; l < config.layer_count; ++l) {
            taus.push_back(materialize_task_vector(
                fit_task_adapter(task, layer_id(l), config.adapter_rank)));
        }
        st.per_task.push_back(taus);
        if (t == 0) {
            st.average = taus;
        } else {
            for (int l = 0; l < config.layer_count; ++l) {
                auto& avg = st.average[static_cast<std::size_t>(l)];
                avg.delta = (avg.delta * static_cast<double>(t) +
                             taus[static_cast<std::size_t>(l)].delta) /
                            static_cast<double>(t + 1);
            }
        }
        for (int l = 0; l < config.layer_count; ++l) {
            st.merged = recursive_merge_step(
                st.merged, layer_id(l), task.train[static_cast<std::size_t>(l)],
                taus[static_cast<std::size_t>(l)]);
        }

        Projector proj;
        proj.task = static_cast<int>(t);
        proj.layers.push_back(
            Projector::Layer{task.proj_target, Vector::Zero(config.proj_out_dim)});
        registry.append(compute_prototype(static_cast<int>(t), task.proto_features),
                        std::move(proj));

        // Evaluate every task seen so far on its held-out set.
        double routed_correct = 0.0;
        double routed_total = 0.0;
        for (std::size_t j = 0; j <= t; ++j) {
            const SyntheticTask& ev = stream[j];
            double num_sq = 0.0;
            double den_sq = 0.0;
            for (int l = 0; l < config.layer_count; ++l) {
                const TaskVector& tau = st.tau_for(strategy, static_cast<int>(t),
                                                   static_cast<int>(j), l);
                const Matrix pred =
                    ev.eval_features[static_cast<std::size_t>(l)] *
                    (options.lambda * tau.delta.transpose());
                const Matrix& target = ev.eval_targets[static_cast<std::size_t>(l)];
                num_sq += (pred - target).squaredNorm();
                den_sq += target.squaredNorm();
            }
            const double rel = den_sq > 0.0 ? std::sqrt(num_sq / den_sq) : 0.0;
            report.accuracy.set(static_cast<int>(t), static_cast<int>(j),
                                100.0 * std::clamp(1.0 - rel, 0.0, 1.0));

            for (const auto& q : ev.eval_queries) {
                Eigen::Index best = 0;
                double best_sim = -2.0;
                for (std::size_t i = 0; i < registry.entries.size(); ++i) {
                    const double s = similarity(q, registry.entries[i].first);
                    if (s > best_sim) {
                        best_sim = s;
                        best = static_cast<Eigen::Index>(i);
                    }
                }
                routed_correct += (best == static_cast<Eigen::Index>(j)) ? 1.0 : 0.0;
                routed_total += 1.0;
            }
        }
        report.routing_accuracy.push_back(routed_correct / routed_total);
    }

    // Drift of the final consolidated vectors against each task's own tau.
    const int n = static_cast<int>(stream.size());
    double grand_sq = 0.0;
    for (int i = 0; i < n; ++i) {
        std::vector<double> per_layer;
        double task_sq = 0.0;
        for (int l = 0; l < config.layer_count; ++l) {
            const TaskVector& final_tau = st.tau_for(strategy, n - 1, i, l);
            const double d = feature_drift(
                stream[static_cast<std::size_t>(i)].train[static_cast<std::size_t>(l)],
                final_tau,
                st.per_task[static_cast<std::size_t>(i)][static_cast<std::size_t>(l)]);
            per_layer.push_back(d);
            task_sq += d * d;
        }
        report.drift.per_task_layer.push_back(std::move(per_layer));
        report.drift.per_task_total.push_back(std::sqrt(task_sq));
        grand_sq += task_sq;
    }
    report.drift.grand_total = std::sqrt(grand_sq);

    double ratio_sum = 0.0;
    for (const auto& [idx, ls] : st.merged.layers) {
        ratio_sum += storage_ratio(ls.cov);
    }
    report.mean_storage_ratio = ratio_sum / static_cast<double>(st.merged.layers.size());

    report.metrics = compute_metrics(report.accuracy);
    report.wall_time_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                  t0)
            .count();
    return report;
}

}  // namespace taumerge
