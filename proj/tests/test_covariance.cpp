#include <doctest.h>

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <numeric>

#include "taumerge/covariance.hpp"
#include "test_support.hpp"

using namespace taumerge;

namespace {
const LayerId kLayer{0, "l0"};
}

TEST_CASE("update_covariance: identity features") {
    auto h0 = CumulativeCovariance::zero(kLayer, 2);
    const FeatureBatch x{kLayer, Matrix::Identity(2, 2)};
    const auto h1 = update_covariance(h0, x);
    CHECK((h1.full - Matrix::Identity(2, 2)).norm() == 0.0);
    CHECK(h1.task_count == 1);
    const auto h2 = update_covariance(h1, x);
    CHECK((h2.full - 2.0 * Matrix::Identity(2, 2)).norm() == 0.0);
    CHECK(h2.task_count == 2);
}

TEST_CASE("update_covariance: sequential folds equal joint sum") {
    std::mt19937_64 rng(3);
    auto cov = CumulativeCovariance::zero(kLayer, 4);
    Matrix joint = Matrix::Zero(4, 4);
    for (int i = 0; i < 3; ++i) {
        const Matrix x = test::gaussian(rng, 8, 4);
        joint += x.transpose() * x;
        cov = update_covariance(cov, FeatureBatch{kLayer, x});
    }
    CHECK(test::rel_err(cov.full, joint) < 1e-12);
}

TEST_CASE("update_covariance: order invariance in the full form") {
    std::mt19937_64 rng(4);
    std::vector<Matrix> xs;
    for (int i = 0; i < 4; ++i) xs.push_back(test::gaussian(rng, 6, 5));

    auto fold = [&](const std::vector<int>& order) {
        auto cov = CumulativeCovariance::zero(kLayer, 5);
        for (int i : order) cov = update_covariance(cov, FeatureBatch{kLayer, xs[i]});
        return cov.full;
    };
    const Matrix ref = fold({0, 1, 2, 3});
    CHECK(test::rel_err(fold({3, 1, 0, 2}), ref) < 1e-12);
    CHECK(test::rel_err(fold({2, 3, 1, 0}), ref) < 1e-12);
}

TEST_CASE("update_covariance: stays symmetric PSD") {
    std::mt19937_64 rng(5);
    auto cov = CumulativeCovariance::zero(kLayer, 6);
    for (int i = 0; i < 5; ++i) {
        cov = update_covariance(cov, FeatureBatch{kLayer, test::gaussian(rng, 3, 6)});
        Eigen::SelfAdjointEigenSolver<Matrix> eig(cov.full);
        CHECK(eig.eigenvalues().minCoeff() >= -1e-10 * cov.full.trace());
        CHECK((cov.full - cov.full.transpose()).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("update_covariance: dimension mismatch throws") {
    auto cov = CumulativeCovariance::zero(kLayer, 4);
    CHECK_THROWS_AS(update_covariance(cov, FeatureBatch{kLayer, Matrix::Zero(2, 3)}),
                    ShapeError);
}

TEST_CASE("compress/reconstruct examples") {
    Matrix h = Matrix::Zero(2, 2);
    h(0, 0) = 9.0;
    h(1, 1) = 1.0;
    auto cov = CumulativeCovariance::zero(kLayer, 2);
    cov.full = h;
    cov.task_count = 1;

    const auto c09 = compress_covariance(cov, 0.9);
    CHECK(c09.spectral.rank() == 1);
    Matrix want = Matrix::Zero(2, 2);
    want(0, 0) = 9.0;
    CHECK((reconstruct_covariance(c09) - want).cwiseAbs().maxCoeff() < 1e-12);

    // the production-default threshold needs both components here
    CHECK(compress_covariance(cov, 0.999).spectral.rank() == 2);

    const auto c1 = compress_covariance(cov, 1.0);
    CHECK(test::rel_err(reconstruct_covariance(c1), h) < 1e-10);

    CHECK_THROWS_AS(compress_covariance(cov, 0.0), ShapeError);
}

TEST_CASE("reconstruct_covariance: full form is the identity map") {
    std::mt19937_64 rng(6);
    auto cov = CumulativeCovariance::zero(kLayer, 5);
    cov.full = test::random_spd(rng, 5);
    CHECK((reconstruct_covariance(cov) - cov.full).norm() == 0.0);
}

TEST_CASE("compression monotonicity") {
    std::mt19937_64 rng(7);
    auto cov = CumulativeCovariance::zero(kLayer, 8);
    cov.full = test::random_spd(rng, 8);
    cov.task_count = 1;
    double prev = -1.0;
    for (double gamma : {0.5, 0.9, 0.99, 0.999, 1.0}) {
        const double err =
            (cov.full - reconstruct_covariance(compress_covariance(cov, gamma)))
                .norm();
        if (prev >= 0.0) CHECK(err <= prev + 1e-12);
        prev = err;
    }
}

TEST_CASE("compressed update reconstructs, adds, re-truncates") {
    std::mt19937_64 rng(8);
    auto cov = compress_covariance(CumulativeCovariance::zero(kLayer, 5), 1.0);
    Matrix joint = Matrix::Zero(5, 5);
    for (int i = 0; i < 3; ++i) {
        const Matrix x = test::gaussian(rng, 7, 5);
        joint += x.transpose() * x;
        cov = update_covariance(cov, FeatureBatch{kLayer, x});
        CHECK(cov.is_compressed);
    }
    CHECK(test::rel_err(reconstruct_covariance(cov), joint) < 1e-8);
}

TEST_CASE("compute_gain: first task gives identity gain") {
    std::mt19937_64 rng(9);
    const FeatureBatch x{kLayer, test::gaussian(rng, 8, 4)};  // full rank
    const auto h1 = update_covariance(CumulativeCovariance::zero(kLayer, 4), x);
    const auto s1 = compute_gain(h1, x);
    CHECK((s1.gain - Matrix::Identity(4, 4)).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("compute_gain: repeated batch halves the gain") {
    std::mt19937_64 rng(10);
    const FeatureBatch x{kLayer, test::gaussian(rng, 9, 4)};
    auto cov = update_covariance(CumulativeCovariance::zero(kLayer, 4), x);
    cov = update_covariance(cov, x);
    const auto s2 = compute_gain(cov, x);
    CHECK((s2.gain - 0.5 * Matrix::Identity(4, 4)).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("compute_gain: residual oracle on a random stream") {
    std::mt19937_64 rng(11);
    auto cov = CumulativeCovariance::zero(kLayer, 6);
    Matrix last_gram;
    for (int i = 0; i < 3; ++i) {
        const FeatureBatch x{kLayer, test::gaussian(rng, 10, 6)};
        cov = update_covariance(cov, x);
        last_gram = x.samples.transpose() * x.samples;
        const auto s = compute_gain(cov, x);
        CHECK((cov.full * s.gain - last_gram).norm() / last_gram.norm() < 1e-10);
    }
}

TEST_CASE("compute_gain: eigenvalues lie in [0,1]") {
    std::mt19937_64 rng(12);
    auto cov = CumulativeCovariance::zero(kLayer, 5);
    for (int i = 0; i < 4; ++i) {
        const FeatureBatch x{kLayer, test::gaussian(rng, 3, 5)};  // rank-deficient
        cov = update_covariance(cov, x);
        const auto s = compute_gain(cov, x);
        const Eigen::EigenSolver<Matrix> eig(s.gain);
        for (Eigen::Index k = 0; k < 5; ++k) {
            CHECK(eig.eigenvalues()[k].real() >= -1e-8);
            CHECK(eig.eigenvalues()[k].real() <= 1.0 + 1e-8);
        }
    }
}

TEST_CASE("compute_gain: rejects empty covariance") {
    std::mt19937_64 rng(13);
    const auto cov = CumulativeCovariance::zero(kLayer, 4);
    CHECK_THROWS_AS(compute_gain(cov, FeatureBatch{kLayer, test::gaussian(rng, 4, 4)}),
                    ShapeError);
}

TEST_CASE("storage_ratio") {
    std::mt19937_64 rng(14);
    auto cov = CumulativeCovariance::zero(kLayer, 16);
    const Matrix a = test::gaussian(rng, 16, 3);
    cov.full = a * a.transpose();  // rank 3
    cov.task_count = 1;
    CHECK(storage_ratio(cov) == 1.0);
    const auto c = compress_covariance(cov, 1.0);
    CHECK(c.spectral.rank() == 3);
    CHECK(storage_ratio(c) == doctest::Approx((16.0 * 3 + 3) / 256.0));
}
