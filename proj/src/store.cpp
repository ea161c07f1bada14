#include "taumerge/store.hpp"

#include <zlib.h>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace taumerge {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string tag(const char* prefix, int i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s%03d", prefix, i);
    return buf;
}

std::vector<char> matrix_to_f32(const Matrix& m) {
    std::vector<char> out(sizeof(float) * static_cast<std::size_t>(m.size()));
    auto* p = reinterpret_cast<float*>(out.data());
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            *p++ = static_cast<float>(m(i, j));  // row-major on disk
        }
    }
    return out;
}

Matrix matrix_from_f32(const char* data, Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    const auto* p = reinterpret_cast<const float*>(data);
    for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) {
            m(i, j) = static_cast<double>(*p++);
        }
    }
    return m;
}

std::uint32_t checksum(const std::vector<char>& bytes) {
    return static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()),
              static_cast<uInt>(bytes.size())));
}

void write_binary_atomic(const std::string& path, const std::vector<char>& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("short write to " + tmp);
    }
    fs::rename(tmp, path);
}

json layer_json(const LayerId& l) {
    return json{{"index", l.index}, {"name", l.name}};
}

LayerId layer_from_json(const json& j) {
    return LayerId{j.at("index").get<int>(), j.at("name").get<std::string>()};
}

}  // namespace

std::string kind_name(BundleKind k) {
    switch (k) {
        case BundleKind::base_weights: return "base_weights";
        case BundleKind::adapter: return "adapter";
        case BundleKind::task_vector: return "task_vector";
        case BundleKind::merged_state: return "merged_state";
        case BundleKind::covariance: return "covariance";
        case BundleKind::registry: return "registry";
    }
    throw IoError("unknown bundle kind");
}

BundleKind kind_from_name(const std::string& name) {
    for (BundleKind k :
         {BundleKind::base_weights, BundleKind::adapter, BundleKind::task_vector,
          BundleKind::merged_state, BundleKind::covariance, BundleKind::registry}) {
        if (kind_name(k) == name) return k;
    }
    throw IoError("unknown bundle kind: " + name);
}

const Matrix& Bundle::tensor(const std::string& name) const {
    for (const auto& [n, m] : tensors) {
        if (n == name) return m;
    }
    throw IoError("bundle has no tensor named " + name);
}

bool Bundle::has_tensor(const std::string& name) const {
    for (const auto& [n, m] : tensors) {
        if (n == name) return true;
    }
    return false;
}

void write_text_atomic(const std::string& path, const std::string& content) {
    write_binary_atomic(path, std::vector<char>(content.begin(), content.end()));
}

void save_bundle(const Bundle& bundle, const std::string& path) {
    std::vector<char> blob;
    json tensors = json::array();
    for (const auto& [name, m] : bundle.tensors) {
        const std::vector<char> bytes = matrix_to_f32(m);
        tensors.push_back(json{{"name", name},
                               {"rows", m.rows()},
                               {"cols", m.cols()},
                               {"offset", blob.size()},
                               {"length", bytes.size()},
                               {"crc32", checksum(bytes)}});
        blob.insert(blob.end(), bytes.begin(), bytes.end());
    }

    json manifest{{"format_version", bundle.format_version},
                  {"kind", kind_name(bundle.kind)},
                  {"metadata", bundle.metadata},
                  {"blob", fs::path(path).filename().string() + ".blob"},
                  {"blob_bytes", blob.size()},
                  {"tensors", tensors}};

    write_binary_atomic(path + ".blob", blob);
    write_text_atomic(path, manifest.dump(2) + "\n");
}

Bundle load_bundle(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest " + path);
    json manifest;
    try {
        in >> manifest;
    } catch (const json::exception& e) {
        throw IoError("bad manifest " + path + ": " + e.what());
    }

    Bundle bundle;
    bundle.format_version = manifest.at("format_version").get<int>();
    if (bundle.format_version != 1) {
        throw IoError("unsupported bundle format version " +
                      std::to_string(bundle.format_version));
    }
    bundle.kind = kind_from_name(manifest.at("kind").get<std::string>());
    bundle.metadata = manifest.value("metadata", json::object());

    const std::string blob_path =
        (fs::path(path).parent_path() / manifest.at("blob").get<std::string>())
            .string();
    std::ifstream bin(blob_path, std::ios::binary);
    if (!bin) throw IoError("cannot open blob " + blob_path);
    std::vector<char> blob((std::istreambuf_iterator<char>(bin)),
                           std::istreambuf_iterator<char>());
    if (blob.size() != manifest.at("blob_bytes").get<std::size_t>()) {
        throw IoError("blob size mismatch for " + path);
    }

    for (const auto& t : manifest.at("tensors")) {
        const auto offset = t.at("offset").get<std::size_t>();
        const auto length = t.at("length").get<std::size_t>();
        const auto rows = t.at("rows").get<Eigen::Index>();
        const auto cols = t.at("cols").get<Eigen::Index>();
        if (offset + length > blob.size() ||
            length != sizeof(float) * static_cast<std::size_t>(rows * cols)) {
            throw IoError("tensor extent out of range in " + path);
        }
        std::vector<char> bytes(blob.begin() + static_cast<std::ptrdiff_t>(offset),
                                blob.begin() +
                                    static_cast<std::ptrdiff_t>(offset + length));
        if (checksum(bytes) != t.at("crc32").get<std::uint32_t>()) {
            throw IoError("checksum failure for tensor " +
                          t.at("name").get<std::string>() + " in " + path);
        }
        bundle.tensors.emplace_back(t.at("name").get<std::string>(),
                                    matrix_from_f32(bytes.data(), rows, cols));
    }
    return bundle;
}

// ---- typed conversions ------------------------------------------------

Bundle bundle_from_weights(const std::vector<std::pair<LayerId, Matrix>>& weights,
                           json metadata) {
    Bundle b;
    b.kind = BundleKind::base_weights;
    b.metadata = std::move(metadata);
    json layers = json::array();
    int i = 0;
    for (const auto& [layer, m] : weights) {
        layers.push_back(layer_json(layer));
        b.tensors.emplace_back(tag("layer", i++) + "/weight", m);
    }
    b.metadata["layers"] = layers;
    return b;
}

std::vector<std::pair<LayerId, Matrix>> weights_from_bundle(const Bundle& b) {
    if (b.kind != BundleKind::base_weights) {
        throw IoError("expected base_weights bundle");
    }
    std::vector<std::pair<LayerId, Matrix>> out;
    int i = 0;
    for (const auto& lj : b.metadata.at("layers")) {
        out.emplace_back(layer_from_json(lj), b.tensor(tag("layer", i++) + "/weight"));
    }
    return out;
}

Bundle bundle_from_adapters(const std::vector<LowRankAdapter>& adapters,
                            json metadata) {
    Bundle b;
    b.kind = BundleKind::adapter;
    b.metadata = std::move(metadata);
    json layers = json::array();
    int i = 0;
    for (const auto& a : adapters) {
        json lj = layer_json(a.layer);
        lj["rank"] = a.rank;
        layers.push_back(lj);
        b.tensors.emplace_back(tag("layer", i) + "/down", a.down);
        b.tensors.emplace_back(tag("layer", i) + "/up", a.up);
        ++i;
    }
    b.metadata["layers"] = layers;
    return b;
}

std::vector<LowRankAdapter> adapters_from_bundle(const Bundle& b) {
    if (b.kind != BundleKind::adapter) throw IoError("expected adapter bundle");
    std::vector<LowRankAdapter> out;
    int i = 0;
    for (const auto& lj : b.metadata.at("layers")) {
        LowRankAdapter a;
        a.layer = layer_from_json(lj);
        a.rank = lj.at("rank").get<int>();
        a.down = b.tensor(tag("layer", i) + "/down");
        a.up = b.tensor(tag("layer", i) + "/up");
        out.push_back(std::move(a));
        ++i;
    }
    return out;
}

Bundle bundle_from_task_vectors(const std::vector<TaskVector>& taus,
                                json metadata) {
    Bundle b;
    b.kind = BundleKind::task_vector;
    b.metadata = std::move(metadata);
    json layers = json::array();
    int i = 0;
    for (const auto& t : taus) {
        layers.push_back(layer_json(t.layer));
        b.tensors.emplace_back(tag("layer", i++) + "/delta", t.delta);
    }
    b.metadata["layers"] = layers;
    return b;
}

std::vector<TaskVector> task_vectors_from_bundle(const Bundle& b) {
    if (b.kind != BundleKind::task_vector) {
        throw IoError("expected task_vector bundle");
    }
    std::vector<TaskVector> out;
    int i = 0;
    for (const auto& lj : b.metadata.at("layers")) {
        out.push_back(
            TaskVector{layer_from_json(lj), b.tensor(tag("layer", i++) + "/delta")});
    }
    return out;
}

namespace {

void put_covariance_tensors(Bundle& b, const CumulativeCovariance& cov,
                            const std::string& prefix, json& lj) {
    lj["compressed"] = cov.is_compressed;
    lj["gamma"] = cov.gamma;
    lj["task_count"] = cov.task_count;
    lj["storage_ratio"] = storage_ratio(cov);
    lj["dim"] = cov.dim();
    if (cov.is_compressed) {
        b.tensors.emplace_back(prefix + "/basis", cov.spectral.basis);
        b.tensors.emplace_back(prefix + "/energies",
                               Matrix(cov.spectral.energies));
    } else {
        b.tensors.emplace_back(prefix + "/H", cov.full);
    }
    if (cov.momentum) {
        b.tensors.emplace_back(prefix + "/Q", *cov.momentum);
        lj["has_momentum"] = true;
    }
}

CumulativeCovariance get_covariance_tensors(const Bundle& b,
                                            const std::string& prefix,
                                            const json& lj) {
    CumulativeCovariance cov;
    cov.layer = layer_from_json(lj);
    cov.is_compressed = lj.at("compressed").get<bool>();
    cov.gamma = lj.at("gamma").get<double>();
    cov.task_count = lj.at("task_count").get<int>();
    if (cov.is_compressed) {
        cov.spectral.basis = b.tensor(prefix + "/basis");
        cov.spectral.energies = b.tensor(prefix + "/energies").col(0);
        if (cov.spectral.basis.rows() == 0) {
            cov.spectral.basis.resize(lj.at("dim").get<int>(), 0);
        }
    } else {
        // Tensors are stored in f32, which can nudge eigenvalues of a PSD
        // matrix slightly negative. Project back to the PSD cone on load so
        // downstream solves keep their strict tolerance.
        Matrix h = b.tensor(prefix + "/H");
        h = ((h + h.transpose()) / 2.0).eval();
        Eigen::SelfAdjointEigenSolver<Matrix> eig(h);
        if (eig.info() == Eigen::Success && eig.eigenvalues().minCoeff() < 0.0) {
            const Vector clamped = eig.eigenvalues().cwiseMax(0.0);
            h = eig.eigenvectors() * clamped.asDiagonal() *
                eig.eigenvectors().transpose();
            h = ((h + h.transpose()) / 2.0).eval();
        }
        cov.full = std::move(h);
    }
    if (lj.value("has_momentum", false)) {
        cov.momentum = b.tensor(prefix + "/Q");
    }
    return cov;
}

}  // namespace

Bundle bundle_from_covariances(const std::vector<CumulativeCovariance>& covs,
                               json metadata) {
    Bundle b;
    b.kind = BundleKind::covariance;
    b.metadata = std::move(metadata);
    json layers = json::array();
    int i = 0;
    for (const auto& cov : covs) {
        json lj = layer_json(cov.layer);
        put_covariance_tensors(b, cov, tag("layer", i++), lj);
        layers.push_back(lj);
    }
    b.metadata["layers"] = layers;
    return b;
}

std::vector<CumulativeCovariance> covariances_from_bundle(const Bundle& b) {
    if (b.kind != BundleKind::covariance) {
        throw IoError("expected covariance bundle");
    }
    std::vector<CumulativeCovariance> out;
    int i = 0;
    for (const auto& lj : b.metadata.at("layers")) {
        out.push_back(get_covariance_tensors(b, tag("layer", i++), lj));
    }
    return out;
}

Bundle bundle_from_merged_state(const MergedState& state, json metadata) {
    Bundle b;
    b.kind = BundleKind::merged_state;
    b.metadata = std::move(metadata);
    b.metadata["tasks_merged"] = state.tasks_merged;
    if (state.compress_gamma) b.metadata["compress_gamma"] = *state.compress_gamma;
    json layers = json::array();
    int i = 0;
    for (const auto& [idx, ls] : state.layers) {
        json lj = layer_json(ls.tau_star.layer);
        b.tensors.emplace_back(tag("layer", i) + "/tau_star", ls.tau_star.delta);
        put_covariance_tensors(b, ls.cov, tag("layer", i), lj);
        layers.push_back(lj);
        ++i;
    }
    b.metadata["layers"] = layers;
    return b;
}

MergedState merged_state_from_bundle(const Bundle& b) {
    if (b.kind != BundleKind::merged_state) {
        throw IoError("expected merged_state bundle");
    }
    MergedState state;
    state.tasks_merged = b.metadata.at("tasks_merged").get<int>();
    if (b.metadata.contains("compress_gamma")) {
        state.compress_gamma = b.metadata["compress_gamma"].get<double>();
    }
    int i = 0;
    for (const auto& lj : b.metadata.at("layers")) {
        MergedLayerState ls;
        ls.cov = get_covariance_tensors(b, tag("layer", i), lj);
        ls.tau_star = TaskVector{ls.cov.layer, b.tensor(tag("layer", i) + "/tau_star")};
        state.layers.emplace(ls.cov.layer.index, std::move(ls));
        ++i;
    }
    return state;
}

Bundle bundle_from_registry(const ProjectorRegistry& registry, json metadata) {
    Bundle b;
    b.kind = BundleKind::registry;
    b.metadata = std::move(metadata);
    b.metadata["eta"] = registry.temperature;
    json tasks = json::array();
    int i = 0;
    for (const auto& [proto, proj] : registry.entries) {
        tasks.push_back(json{{"task", proto.task},
                             {"sample_count", proto.sample_count},
                             {"near_zero", proto.near_zero},
                             {"layer_count", proj.layers.size()}});
        b.tensors.emplace_back(tag("task", i) + "/mean", Matrix(proto.mean));
        int l = 0;
        for (const auto& layer : proj.layers) {
            const std::string p = tag("task", i) + "/" + tag("proj", l++);
            b.tensors.emplace_back(p + "/weight", layer.weight);
            b.tensors.emplace_back(p + "/bias", Matrix(layer.bias));
        }
        ++i;
    }
    b.metadata["tasks"] = tasks;
    return b;
}

ProjectorRegistry registry_from_bundle(const Bundle& b) {
    if (b.kind != BundleKind::registry) throw IoError("expected registry bundle");
    ProjectorRegistry registry;
    registry.temperature = b.metadata.at("eta").get<double>();
    int i = 0;
    for (const auto& tj : b.metadata.at("tasks")) {
        Prototype proto;
        proto.task = tj.at("task").get<int>();
        proto.sample_count = tj.at("sample_count").get<long>();
        proto.near_zero = tj.at("near_zero").get<bool>();
        proto.mean = b.tensor(tag("task", i) + "/mean").col(0);
        Projector proj;
        proj.task = proto.task;
        const int nl = tj.at("layer_count").get<int>();
        for (int l = 0; l < nl; ++l) {
            const std::string p = tag("task", i) + "/" + tag("proj", l);
            proj.layers.push_back(Projector::Layer{
                b.tensor(p + "/weight"), b.tensor(p + "/bias").col(0)});
        }
        registry.append(std::move(proto), std::move(proj));
        ++i;
    }
    return registry;
}

// ---- JSON documents ----------------------------------------------------

json accuracy_matrix_to_json(const AccuracyMatrix& acc) {
    acc.validate();
    json entries = json::object();
    for (int i = 0; i < acc.task_count(); ++i) {
        for (int j = 0; j <= i; ++j) {
            // 1-indexed "i,j" keys.
            entries[std::to_string(i + 1) + "," + std::to_string(j + 1)] =
                acc.at(i, j);
        }
    }
    return json{{"n", acc.task_count()}, {"entries", entries}};
}

AccuracyMatrix accuracy_matrix_from_json(const json& j) {
    AccuracyMatrix acc;
    const int n = j.at("n").get<int>();
    for (const auto& [key, value] : j.at("entries").items()) {
        const auto comma = key.find(',');
        if (comma == std::string::npos) throw IoError("bad entry key " + key);
        const int i = std::stoi(key.substr(0, comma)) - 1;
        const int jj = std::stoi(key.substr(comma + 1)) - 1;
        acc.set(i, jj, value.get<double>());
    }
    if (acc.task_count() != n) throw IoError("accuracy matrix incomplete");
    acc.validate();
    return acc;
}

json config_to_json(const StreamConfig& c) {
    return json{{"task_count", c.task_count},
                {"feature_dim", c.feature_dim},
                {"output_dim", c.output_dim},
                {"samples_per_task", c.samples_per_task},
                {"eval_samples", c.eval_samples},
                {"adapter_rank", c.adapter_rank},
                {"layer_count", c.layer_count},
                {"overlap", c.overlap},
                {"proto_dim", c.proto_dim},
                {"proto_samples", c.proto_samples},
                {"proj_out_dim", c.proj_out_dim},
                {"proto_separation", c.proto_separation},
                {"noise_scale", c.noise_scale},
                {"seed", c.seed}};
}

StreamConfig config_from_json(const json& j) {
    StreamConfig c;
    c.task_count = j.value("task_count", c.task_count);
    c.feature_dim = j.value("feature_dim", c.feature_dim);
    c.output_dim = j.value("output_dim", c.output_dim);
    c.samples_per_task = j.value("samples_per_task", c.samples_per_task);
    c.eval_samples = j.value("eval_samples", c.eval_samples);
    c.adapter_rank = j.value("adapter_rank", c.adapter_rank);
    c.layer_count = j.value("layer_count", c.layer_count);
    c.overlap = j.value("overlap", c.overlap);
    c.proto_dim = j.value("proto_dim", c.proto_dim);
    c.proto_samples = j.value("proto_samples", c.proto_samples);
    c.proj_out_dim = j.value("proj_out_dim", c.proj_out_dim);
    c.proto_separation = j.value("proto_separation", c.proto_separation);
    c.noise_scale = j.value("noise_scale", c.noise_scale);
    c.seed = j.value("seed", c.seed);
    return c;
}

json eval_report_to_json(const EvalReport& report) {
    json metrics{{"faa", report.metrics.faa}, {"caa", report.metrics.caa}};
    if (report.metrics.ffm) {
        metrics["ffm"] = *report.metrics.ffm;
    } else {
        metrics["ffm"] = nullptr;  // absent for n == 1
    }
    json acc = accuracy_matrix_to_json(report.accuracy);
    acc["metrics"] = metrics;
    // Wall time deliberately omitted so seeded runs serialize byte-identically.
    return json{{"accuracy", acc},
                {"metrics", metrics},
                {"strategy", report.strategy},
                {"config", config_to_json(report.config)},
                {"options",
                 {{"lambda", report.options.lambda},
                  {"gamma", report.options.gamma},
                  {"eta", report.options.eta}}},
                {"routing_accuracy", report.routing_accuracy},
                {"mean_storage_ratio", report.mean_storage_ratio},
                {"drift",
                 {{"per_task_layer", report.drift.per_task_layer},
                  {"per_task_total", report.drift.per_task_total},
                  {"grand_total", report.drift.grand_total}}}};
}

EvalReport eval_report_from_json(const json& j) {
    EvalReport r;
    r.accuracy = accuracy_matrix_from_json(j.at("accuracy"));
    r.metrics.faa = j.at("metrics").at("faa").get<double>();
    r.metrics.caa = j.at("metrics").at("caa").get<double>();
    if (!j.at("metrics").at("ffm").is_null()) {
        r.metrics.ffm = j.at("metrics").at("ffm").get<double>();
    }
    r.strategy = j.at("strategy").get<std::string>();
    r.config = config_from_json(j.at("config"));
    r.options.lambda = j.at("options").at("lambda").get<double>();
    r.options.gamma = j.at("options").at("gamma").get<double>();
    r.options.eta = j.at("options").at("eta").get<double>();
    r.routing_accuracy = j.at("routing_accuracy").get<std::vector<double>>();
    r.mean_storage_ratio = j.value("mean_storage_ratio", 1.0);
    const auto& dj = j.at("drift");
    r.drift.per_task_layer =
        dj.at("per_task_layer").get<std::vector<std::vector<double>>>();
    r.drift.per_task_total = dj.at("per_task_total").get<std::vector<double>>();
    r.drift.grand_total = dj.at("grand_total").get<double>();
    return r;
}

std::string accuracy_matrix_to_csv(const AccuracyMatrix& acc) {
    acc.validate();
    std::string out = "i,j,accuracy\n";
    for (int i = 0; i < acc.task_count(); ++i) {
        for (int j = 0; j <= i; ++j) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%d,%d,%.17g\n", i + 1, j + 1,
                          acc.at(i, j));
            out += buf;
        }
    }
    return out;
}

}  // namespace taumerge
