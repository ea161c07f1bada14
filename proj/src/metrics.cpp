#include "taumerge/metrics.hpp"

namespace taumerge {

double AccuracyMatrix::at(int i, int j) const {
    if (i < 0 || i >= task_count() || j < 0 || j > i) {
        throw ShapeError("AccuracyMatrix: index out of range");
    }
    return rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
}

void AccuracyMatrix::set(int i, int j, double v) {
    if (i < 0 || j < 0 || j > i) {
        throw ShapeError("AccuracyMatrix: index out of range");
    }
    if (i >= task_count()) {
        rows.resize(static_cast<std::size_t>(i) + 1);
    }
    auto& row = rows[static_cast<std::size_t>(i)];
    if (row.size() < static_cast<std::size_t>(i) + 1) {
        row.resize(static_cast<std::size_t>(i) + 1, 0.0);
    }
    row[static_cast<std::size_t>(j)] = v;
}

void AccuracyMatrix::validate() const {
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != i + 1) {
            throw ShapeError("AccuracyMatrix: row " + std::to_string(i) +
                             " incomplete");
        }
    }
}

Metrics compute_metrics(const AccuracyMatrix& acc) {
    acc.validate();
    const int n = acc.task_count();
    if (n < 1) {
        throw ShapeError("compute_metrics: empty matrix");
    }

    // AA_i = (1/i) sum_{j<=i} A_ij
    std::vector<double> aa(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j <= i; ++j) s += acc.at(i, j);
        aa[static_cast<std::size_t>(i)] = s / static_cast<double>(i + 1);
    }

    Metrics m;
    m.faa = aa.back();
    double caa = 0.0;
    for (double v : aa) caa += v;
    m.caa = caa / static_cast<double>(n);

    if (n >= 2) {
        double f = 0.0;
        for (int j = 0; j < n - 1; ++j) {
            f += acc.at(j, j) - acc.at(n - 1, j);
        }
        m.ffm = f / static_cast<double>(n - 1);
    }
    return m;
}

}  // namespace taumerge
