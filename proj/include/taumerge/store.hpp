#pragma once

#include <nlohmann/json.hpp>

#include <string>
#include <utility>
#include <vector>

#include "taumerge/cpm.hpp"
#include "taumerge/lpm.hpp"
#include "taumerge/simulator.hpp"

namespace taumerge {

// On-disk layout: one JSON manifest at <path>, one blob at <path>.blob.
// Blobs are little-endian float32, row-major, one CRC32 per tensor.
// Doubles are rounded to float on save, so round-trip identity holds after
// one save-load normalization pass.

enum class BundleKind {
    base_weights,
    adapter,
    task_vector,
    merged_state,
    covariance,
    registry,
};

std::string kind_name(BundleKind k);
BundleKind kind_from_name(const std::string& name);

/// Generic manifest + ordered named tensors. Typed wrappers below convert
/// to/from domain objects.
struct Bundle {
    int format_version = 1;
    BundleKind kind = BundleKind::base_weights;
    nlohmann::json metadata;  // task index, gamma, lambda, eta, seed, layers
    std::vector<std::pair<std::string, Matrix>> tensors;

    const Matrix& tensor(const std::string& name) const;
    bool has_tensor(const std::string& name) const;
};

void save_bundle(const Bundle& bundle, const std::string& path);
Bundle load_bundle(const std::string& path);

// ---- typed conversions ------------------------------------------------

Bundle bundle_from_weights(const std::vector<std::pair<LayerId, Matrix>>& weights,
                           nlohmann::json metadata = {});
std::vector<std::pair<LayerId, Matrix>> weights_from_bundle(const Bundle& b);

Bundle bundle_from_adapters(const std::vector<LowRankAdapter>& adapters,
                            nlohmann::json metadata = {});
std::vector<LowRankAdapter> adapters_from_bundle(const Bundle& b);

Bundle bundle_from_task_vectors(const std::vector<TaskVector>& taus,
                                nlohmann::json metadata = {});
std::vector<TaskVector> task_vectors_from_bundle(const Bundle& b);

Bundle bundle_from_covariances(const std::vector<CumulativeCovariance>& covs,
                               nlohmann::json metadata = {});
std::vector<CumulativeCovariance> covariances_from_bundle(const Bundle& b);

Bundle bundle_from_merged_state(const MergedState& state,
                                nlohmann::json metadata = {});
MergedState merged_state_from_bundle(const Bundle& b);

Bundle bundle_from_registry(const ProjectorRegistry& registry,
                            nlohmann::json metadata = {});
ProjectorRegistry registry_from_bundle(const Bundle& b);

// ---- JSON documents ----------------------------------------------------

nlohmann::json config_to_json(const StreamConfig& c);
StreamConfig config_from_json(const nlohmann::json& j);

nlohmann::json accuracy_matrix_to_json(const AccuracyMatrix& acc);
AccuracyMatrix accuracy_matrix_from_json(const nlohmann::json& j);

nlohmann::json eval_report_to_json(const EvalReport& report);
EvalReport eval_report_from_json(const nlohmann::json& j);

std::string accuracy_matrix_to_csv(const AccuracyMatrix& acc);

/// Write-to-temp, atomic rename.
void write_text_atomic(const std::string& path, const std::string& content);

}  // namespace taumerge
