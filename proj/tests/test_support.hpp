#pragma once

#include <Eigen/SVD>

#include <random>

#include "taumerge/adapters.hpp"

namespace taumerge::test {

inline Matrix gaussian(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols) {
    std::normal_distribution<double> dist(0.0, 1.0);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
    return m;
}

inline Matrix random_spd(std::mt19937_64& rng, Eigen::Index d) {
    const Matrix a = gaussian(rng, d + 4, d);
    return a.transpose() * a;
}

inline int svd_rank(const Matrix& m, double tol = 1e-10) {
    Eigen::BDCSVD<Matrix> svd(m);
    const auto& s = svd.singularValues();
    if (s.size() == 0) return 0;
    int r = 0;
    for (Eigen::Index i = 0; i < s.size(); ++i) {
        if (s[i] > tol * s[0]) ++r;
    }
    return r;
}

inline double rel_err(const Matrix& got, const Matrix& want) {
    const double n = want.norm();
    return n > 0.0 ? (got - want).norm() / n : (got - want).norm();
}

}  // namespace taumerge::test
