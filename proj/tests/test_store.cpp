#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "taumerge/store.hpp"
#include "test_support.hpp"

using namespace taumerge;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("taumerge_test_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter()++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    static int& counter() {
        static int c = 0;
        return c;
    }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

// f32-on-disk normalization
Matrix to_f32(const Matrix& m) {
    return m.cast<float>().cast<double>();
}

bool same(const Matrix& a, const Matrix& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() && (a - b).norm() == 0.0;
}

}  // namespace

TEST_CASE("task vector round trip, including the zero matrix") {
    TempDir dir;
    std::mt19937_64 rng(1);
    std::vector<TaskVector> taus{{LayerId{0, "q"}, Matrix::Zero(3, 4)},
                                 {LayerId{1, "k"}, test::gaussian(rng, 5, 2)}};
    const auto p = dir.file("tv.bundle");
    save_bundle(bundle_from_task_vectors(taus), p);
    const auto back = task_vectors_from_bundle(load_bundle(p));
    REQUIRE(back.size() == 2);
    CHECK(back[0].layer == taus[0].layer);
    CHECK(same(back[0].delta, Matrix::Zero(3, 4)));
    CHECK(same(back[1].delta, to_f32(taus[1].delta)));
}

TEST_CASE("round trip is the identity after one normalization pass") {
    TempDir dir;
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<TaskVector> taus{{LayerId{0, "l"}, test::gaussian(rng, 4, 6)}};
        const auto p1 = dir.file("a.bundle");
        const auto p2 = dir.file("b.bundle");
        save_bundle(bundle_from_task_vectors(taus), p1);
        const auto once = task_vectors_from_bundle(load_bundle(p1));
        save_bundle(bundle_from_task_vectors(once), p2);
        const auto twice = task_vectors_from_bundle(load_bundle(p2));
        CHECK(same(once[0].delta, twice[0].delta));
    }
}

TEST_CASE("adapter and weights round trips") {
    TempDir dir;
    std::mt19937_64 rng(3);
    LowRankAdapter a{LayerId{2, "v"}, test::gaussian(rng, 3, 7), test::gaussian(rng, 5, 3), 3};
    save_bundle(bundle_from_adapters({a}), dir.file("ad.bundle"));
    const auto back = adapters_from_bundle(load_bundle(dir.file("ad.bundle")));
    CHECK(back[0].rank == 3);
    CHECK(back[0].layer == a.layer);
    CHECK(same(back[0].down, to_f32(a.down)));
    CHECK(same(back[0].up, to_f32(a.up)));

    std::vector<std::pair<LayerId, Matrix>> w{{LayerId{0, "w"}, test::gaussian(rng, 4, 4)}};
    save_bundle(bundle_from_weights(w), dir.file("w.bundle"));
    const auto wb = weights_from_bundle(load_bundle(dir.file("w.bundle")));
    CHECK(same(wb[0].second, to_f32(w[0].second)));
}

TEST_CASE("covariance round trip, full and compressed") {
    TempDir dir;
    std::mt19937_64 rng(4);
    auto cov = CumulativeCovariance::zero(LayerId{0, "l"}, 6);
    cov.full = test::random_spd(rng, 6);
    cov.task_count = 3;
    cov.momentum = test::gaussian(rng, 6, 4);

    save_bundle(bundle_from_covariances({cov}), dir.file("cov.bundle"));
    const auto back = covariances_from_bundle(load_bundle(dir.file("cov.bundle")));
    CHECK_FALSE(back[0].is_compressed);
    CHECK(back[0].task_count == 3);
    CHECK(same(back[0].full, to_f32(cov.full)));
    REQUIRE(back[0].momentum.has_value());
    CHECK(same(*back[0].momentum, to_f32(*cov.momentum)));

    const auto comp = compress_covariance(cov, 0.99);
    save_bundle(bundle_from_covariances({comp}), dir.file("covc.bundle"));
    const auto cback = covariances_from_bundle(load_bundle(dir.file("covc.bundle")));
    CHECK(cback[0].is_compressed);
    CHECK(cback[0].gamma == 0.99);
    CHECK(same(cback[0].spectral.basis, to_f32(comp.spectral.basis)));
    CHECK(same(Matrix(cback[0].spectral.energies),
               to_f32(Matrix(comp.spectral.energies))));
}

TEST_CASE("compressed covariance blob size is exactly the basis plus energies") {
    TempDir dir;
    std::mt19937_64 rng(5);
    auto cov = CumulativeCovariance::zero(LayerId{0, "l"}, 16);
    const Matrix a = test::gaussian(rng, 16, 3);
    cov.full = a * a.transpose();  // rank 3
    cov.task_count = 1;
    const auto comp = compress_covariance(cov, 1.0);
    REQUIRE(comp.spectral.rank() == 3);
    const auto p = dir.file("c16.bundle");
    save_bundle(bundle_from_covariances({comp}), p);
    CHECK(fs::file_size(p + ".blob") == 4 * (16 * 3 + 3));
}

TEST_CASE("merged state and registry round trips") {
    TempDir dir;
    std::mt19937_64 rng(6);
    MergedState state = make_merged_state(
        {LayerSpec{LayerId{0, "a"}, 5, 3}, LayerSpec{LayerId{1, "b"}, 5, 3}});
    for (int t = 0; t < 2; ++t) {
        for (int l = 0; l < 2; ++l) {
            const LayerId layer{l, l == 0 ? "a" : "b"};
            state = recursive_merge_step(
                state, layer, FeatureBatch{layer, test::gaussian(rng, 8, 5)},
                TaskVector{layer, test::gaussian(rng, 3, 5)});
        }
    }
    save_bundle(bundle_from_merged_state(state), dir.file("ms.bundle"));
    const auto back = merged_state_from_bundle(load_bundle(dir.file("ms.bundle")));
    CHECK(back.tasks_merged == 2);
    CHECK(same(back.layers.at(0).tau_star.delta,
               to_f32(state.layers.at(0).tau_star.delta)));
    CHECK(same(back.layers.at(1).cov.full, to_f32(state.layers.at(1).cov.full)));

    ProjectorRegistry reg;
    reg.temperature = 0.25;
    for (int t = 0; t < 2; ++t) {
        Prototype proto;
        proto.task = t;
        proto.mean = test::gaussian(rng, 4, 1).col(0);
        proto.sample_count = 10;
        Projector proj;
        proj.task = t;
        proj.layers.push_back(
            Projector::Layer{test::gaussian(rng, 3, 4), test::gaussian(rng, 3, 1).col(0)});
        proj.layers.push_back(
            Projector::Layer{test::gaussian(rng, 2, 3), test::gaussian(rng, 2, 1).col(0)});
        reg.append(std::move(proto), std::move(proj));
    }
    save_bundle(bundle_from_registry(reg), dir.file("reg.bundle"));
    const auto rback = registry_from_bundle(load_bundle(dir.file("reg.bundle")));
    CHECK(rback.temperature == 0.25);
    REQUIRE(rback.entries.size() == 2);
    CHECK(same(Matrix(rback.entries[1].first.mean),
               to_f32(Matrix(reg.entries[1].first.mean))));
    CHECK(same(rback.entries[0].second.layers[1].weight,
               to_f32(reg.entries[0].second.layers[1].weight)));
}

TEST_CASE("single corrupted byte fails the checksum, no partial data") {
    TempDir dir;
    std::mt19937_64 rng(7);
    std::vector<TaskVector> taus{{LayerId{0, "l"}, test::gaussian(rng, 4, 4)}};
    const auto p = dir.file("x.bundle");
    save_bundle(bundle_from_task_vectors(taus), p);

    std::fstream f(p + ".blob", std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(17);
    char c;
    f.read(&c, 1);
    c = static_cast<char>(c ^ 0x40);
    f.seekp(17);
    f.write(&c, 1);
    f.close();

    CHECK_THROWS_AS(load_bundle(p), IoError);
}

TEST_CASE("truncated blob and bad manifests rejected") {
    TempDir dir;
    std::mt19937_64 rng(8);
    std::vector<TaskVector> taus{{LayerId{0, "l"}, test::gaussian(rng, 4, 4)}};
    const auto p = dir.file("y.bundle");
    save_bundle(bundle_from_task_vectors(taus), p);
    fs::resize_file(p + ".blob", 10);
    CHECK_THROWS_AS(load_bundle(p), IoError);

    write_text_atomic(dir.file("z.bundle"), "{ not json");
    CHECK_THROWS_AS(load_bundle(dir.file("z.bundle")), IoError);

    // version and kind checks
    nlohmann::json m{{"format_version", 99}, {"kind", "task_vector"},
                     {"metadata", nlohmann::json::object()}, {"blob", "none"},
                     {"blob_bytes", 0}, {"tensors", nlohmann::json::array()}};
    write_text_atomic(dir.file("v.bundle"), m.dump());
    CHECK_THROWS_AS(load_bundle(dir.file("v.bundle")), IoError);
    CHECK_THROWS_AS(kind_from_name("mystery"), IoError);
}

TEST_CASE("accuracy matrix JSON schema round trip") {
    AccuracyMatrix acc;
    acc.set(0, 0, 80.0);
    acc.set(1, 0, 70.5);
    acc.set(1, 1, 90.25);
    const auto j = accuracy_matrix_to_json(acc);
    CHECK(j.at("n") == 2);
    CHECK(j.at("entries").at("2,1") == 70.5);
    const AccuracyMatrix back = accuracy_matrix_from_json(j);
    CHECK(back.at(1, 1) == 90.25);

    const std::string csv = accuracy_matrix_to_csv(acc);
    CHECK(csv.find("2,1,70.5") != std::string::npos);
}

TEST_CASE("eval report JSON round trip excludes wall time") {
    StreamConfig c;
    c.task_count = 2;
    c.feature_dim = 8;
    c.proto_dim = 8;
    c.adapter_rank = 2;
    const auto stream = generate_stream(c);
    auto report = run_continual(stream, Strategy::Many, c);
    report.wall_time_ms = 123.0;
    const auto j = eval_report_to_json(report);
    CHECK(j.dump().find("wall_time") == std::string::npos);
    const EvalReport back = eval_report_from_json(j);
    CHECK(back.metrics.faa == report.metrics.faa);
    CHECK(back.strategy == "many");
    CHECK(back.config.seed == c.seed);
    CHECK(back.drift.grand_total == report.drift.grand_total);
}
