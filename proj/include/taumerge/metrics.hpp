#pragma once

#include <optional>
#include <vector>

#include "taumerge/adapters.hpp"

namespace taumerge {

/// Lower-triangular accuracy records: A_ij = accuracy on task j after
/// learning task i, as a percentage. Row i (0-based) holds i+1 entries.
struct AccuracyMatrix {
    std::vector<std::vector<double>> rows;

    int task_count() const { return static_cast<int>(rows.size()); }
    double at(int i, int j) const;       // 0-based, j <= i
    void set(int i, int j, double v);
    void validate() const;
};

struct Metrics {
    double faa = 0.0;
    double caa = 0.0;
    std::optional<double> ffm;  // absent when n == 1
};

/// FAA = AA_n, CAA = mean of AA_i, FFM = mean_j (A_jj - A_nj).
Metrics compute_metrics(const AccuracyMatrix& acc);

}  // namespace taumerge
