#pragma once

#include <utility>
#include <vector>

#include "taumerge/adapters.hpp"

namespace taumerge {

/// Global ([CLS]-style) embedding of one image / sample.
struct GlobalFeature {
    Vector v;
};

/// Dense spatial tokens, one row per token.
struct SpatialFeatures {
    Matrix tokens;  // n_tokens x d_v
};

/// Mean global embedding of one task's samples, the routing anchor.
struct Prototype {
    int task = 0;
    Vector mean;
    long sample_count = 0;
    bool near_zero = false;  // ||mean|| < 1e-9 * dim; routes with similarity 0
};

/// MLP projector: ReLU between layers, none after the last.
struct Projector {
    struct Layer {
        Matrix weight;  // out x in
        Vector bias;    // out
    };
    int task = 0;
    std::vector<Layer> layers;

    Matrix apply(const Matrix& tokens) const;  // tokens: n x d_in
};

/// One (prototype, projector) entry per task, appended in task order.
struct ProjectorRegistry {
    std::vector<std::pair<Prototype, Projector>> entries;
    double temperature = 0.1;  // eta

    void append(Prototype proto, Projector proj);
};

Prototype compute_prototype(int task, const std::vector<GlobalFeature>& features);

/// Cosine similarity in [-1, 1]. Near-zero prototypes score 0; a zero-norm
/// query throws (merged_projection falls back to uniform weights instead).
double similarity(const GlobalFeature& query, const Prototype& proto);

/// Temperature-scaled softmax with max-shift; sums to 1.
Vector routing_weights(const Vector& similarities, double eta);

/// sum_i w_i * P_i(tokens) for caller-chosen weights (outputs are blended,
/// never the projector parameters).
Matrix blend_projection(const SpatialFeatures& spatial,
                        const ProjectorRegistry& registry, const Vector& weights);

/// Route by prototype similarity, then blend.
Matrix merged_projection(const SpatialFeatures& spatial,
                         const ProjectorRegistry& registry,
                         const GlobalFeature& query);

}  // namespace taumerge
