#include "taumerge/cpm.hpp"

#include <cmath>
#include <iostream>

namespace taumerge {

namespace {
constexpr double kNormEps = 1e-12;
}

Matrix Projector::apply(const Matrix& tokens) const {
    if (layers.empty()) {
        throw ShapeError("Projector: needs at least one layer");
    }
    Matrix x = tokens;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        if (x.cols() != l.weight.cols()) {
            throw ShapeError("Projector: layer widths do not chain");
        }
        x = (x * l.weight.transpose()).rowwise() + l.bias.transpose();
        if (i + 1 < layers.size()) {
            x = x.cwiseMax(0.0);  // ReLU between layers, none after the last
        }
    }
    return x;
}

void ProjectorRegistry::append(Prototype proto, Projector proj) {
    const int expected = static_cast<int>(entries.size());
    if (proto.task != expected || proj.task != expected) {
        throw ShapeError("ProjectorRegistry: task indices must be contiguous");
    }
    entries.emplace_back(std::move(proto), std::move(proj));
}

Prototype compute_prototype(int task, const std::vector<GlobalFeature>& features) {
    if (features.empty()) {
        throw ShapeError("compute_prototype: empty feature list");
    }
    const auto dim = features.front().v.size();
    Vector sum = Vector::Zero(dim);
    for (const auto& f : features) {
        if (f.v.size() != dim) {
            throw ShapeError("compute_prototype: dimension mismatch");
        }
        sum += f.v;
    }
    Prototype proto;
    proto.task = task;
    proto.mean = sum / static_cast<double>(features.size());
    proto.sample_count = static_cast<long>(features.size());
    proto.near_zero = proto.mean.norm() < 1e-9 * static_cast<double>(dim);
    return proto;
}

double similarity(const GlobalFeature& query, const Prototype& proto) {
    if (query.v.size() != proto.mean.size()) {
        throw ShapeError("similarity: dimension mismatch");
    }
    if (proto.near_zero) return 0.0;
    const double qn = query.v.norm();
    const double pn = proto.mean.norm();
    if (qn <= kNormEps || pn <= kNormEps) {
        throw NumericError("similarity: zero-norm input");
    }
    return query.v.dot(proto.mean) / (qn * pn);
}

Vector routing_weights(const Vector& similarities, double eta) {
    if (similarities.size() < 1) {
        throw ShapeError("routing_weights: empty similarity vector");
    }
    if (!(eta > 0.0)) {
        throw ShapeError("routing_weights: eta must be positive");
    }
    const double shift = similarities.maxCoeff();
    Vector w = ((similarities.array() - shift) / eta).exp();
    return w / w.sum();
}

Matrix blend_projection(const SpatialFeatures& spatial,
                        const ProjectorRegistry& registry, const Vector& weights) {
    if (registry.entries.empty()) {
        throw ShapeError("blend_projection: empty registry");
    }
    if (weights.size() != static_cast<Eigen::Index>(registry.entries.size())) {
        throw ShapeError("blend_projection: weight count mismatch");
    }
    Matrix out;
    for (std::size_t i = 0; i < registry.entries.size(); ++i) {
        const Matrix y = registry.entries[i].second.apply(spatial.tokens);
        if (i == 0) {
            out = weights[0] * y;
        } else {
            if (y.rows() != out.rows() || y.cols() != out.cols()) {
                throw ShapeError("blend_projection: projector output shape mismatch");
            }
            out += weights[static_cast<Eigen::Index>(i)] * y;
        }
    }
    return out;
}

Matrix merged_projection(const SpatialFeatures& spatial,
                         const ProjectorRegistry& registry,
                         const GlobalFeature& query) {
    if (registry.entries.empty()) {
        throw ShapeError("merged_projection: empty registry");
    }
    const auto t = static_cast<Eigen::Index>(registry.entries.size());
    Vector weights(t);
    if (query.v.norm() <= kNormEps) {
        std::cerr << "{\"event\":\"zero_norm_query\",\"fallback\":\"uniform\"}\n";
        weights.setConstant(1.0 / static_cast<double>(t));
    } else {
        Vector sims(t);
        for (Eigen::Index i = 0; i < t; ++i) {
            sims[i] = similarity(query, registry.entries[static_cast<std::size_t>(i)].first);
        }
        weights = routing_weights(sims, registry.temperature);
    }
    return blend_projection(spatial, registry, weights);
}

}  // namespace taumerge
