#pragma once

// Data-parallel inner loops of the scoring engine. Each kernel has a serial
// reference and an OpenMP version built from the same per-row routine; the
// OpenMP version partitions rows only, so both produce identical bits.

#include <cstddef>
#include <vector>

#include <Eigen/Dense>

#include "oodkit/embedding_store.hpp"

namespace oodkit::kernels {

using RowMatrixXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Neighbor {
    std::size_t index = 0;
    double similarity = 0.0;
};

struct NearestCenter {
    std::vector<double> squared_distance;
    std::vector<std::size_t> index;
};

/// 1/||row|| in double for every row; throws on zero-norm rows.
std::vector<double> inverse_row_norms(const FeatureMatrix& m);

namespace serial {

/// max_i cos(test[j], train[i]) for every test row j.
std::vector<double> max_cosine(const FeatureMatrix& train, const FeatureMatrix& test);

/// The k most similar train rows per test row, similarity descending, ties by lower index.
std::vector<std::vector<Neighbor>> top_k_cosine(const FeatureMatrix& train,
                                                const FeatureMatrix& test, std::size_t k);

/// Forward substitution: solves lower * y = r for every row r.
RowMatrixXd lower_solve_rows(const Eigen::MatrixXd& lower, const RowMatrixXd& rows);

/// Nearest center by squared Euclidean distance; ties go to the lower index.
NearestCenter nearest_center(const RowMatrixXd& points, const RowMatrixXd& centers);

}  // namespace serial

namespace parallel {

std::vector<double> max_cosine(const FeatureMatrix& train, const FeatureMatrix& test);
std::vector<std::vector<Neighbor>> top_k_cosine(const FeatureMatrix& train,
                                                const FeatureMatrix& test, std::size_t k);
RowMatrixXd lower_solve_rows(const Eigen::MatrixXd& lower, const RowMatrixXd& rows);
NearestCenter nearest_center(const RowMatrixXd& points, const RowMatrixXd& centers);

}  // namespace parallel

}  // namespace oodkit::kernels
