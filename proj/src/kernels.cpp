#include "oodkit/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace oodkit::kernels {
namespace {

double dot(std::span<const float> a, std::span<const float> b) {
    double acc = 0.0;
    const std::size_t d = a.size();
    for (std::size_t k = 0; k < d; ++k) acc += double(a[k]) * double(b[k]);
    return acc;
}

void check_dims(const FeatureMatrix& train, const FeatureMatrix& test) {
    require(train.dim() == test.dim(), ErrorCode::DimensionMismatch,
            "dimension mismatch: train dim " + std::to_string(train.dim()) + " vs test dim " +
                std::to_string(test.dim()));
}

struct CosineContext {
    const FeatureMatrix& train;
    const FeatureMatrix& test;
    std::vector<double> train_inv;
    std::vector<double> test_inv;

    CosineContext(const FeatureMatrix& tr, const FeatureMatrix& te)
        : train((check_dims(tr, te), tr)),
          test(te),
          train_inv(inverse_row_norms(tr)),
          test_inv(inverse_row_norms(te)) {}

    double cosine(std::size_t j, std::size_t i) const {
        return dot(test.row(j), train.row(i)) * test_inv[j] * train_inv[i];
    }

    double max_row(std::size_t j) const {
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < train.n_samples(); ++i) best = std::max(best, cosine(j, i));
        return best;
    }

    std::vector<Neighbor> top_k_row(std::size_t j, std::size_t k) const {
        std::vector<Neighbor> all(train.n_samples());
        for (std::size_t i = 0; i < train.n_samples(); ++i) all[i] = {i, cosine(j, i)};
        auto better = [](const Neighbor& a, const Neighbor& b) {
            if (a.similarity != b.similarity) return a.similarity > b.similarity;
            return a.index < b.index;
        };
        std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(),
                          better);
        all.resize(k);
        return all;
    }
};

void check_top_k(const FeatureMatrix& train, std::size_t k) {
    require(k >= 1 && k <= train.n_samples(), ErrorCode::ContractViolation,
            "k must lie in [1, n_train]; got k=" + std::to_string(k));
}

void lower_solve_row(const Eigen::MatrixXd& lower, const RowMatrixXd& rows, RowMatrixXd& out,
                     Eigen::Index r) {
    const Eigen::Index d = lower.rows();
    for (Eigen::Index i = 0; i < d; ++i) {
        double acc = rows(r, i);
        for (Eigen::Index k = 0; k < i; ++k) acc -= lower(i, k) * out(r, k);
        out(r, i) = acc / lower(i, i);
    }
}

void check_solve(const Eigen::MatrixXd& lower, const RowMatrixXd& rows) {
    require(lower.rows() == lower.cols() && lower.cols() == rows.cols(),
            ErrorCode::DimensionMismatch, "dimension mismatch in triangular solve");
}

void nearest_row(const RowMatrixXd& points, const RowMatrixXd& centers, NearestCenter& out,
                 Eigen::Index r) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (Eigen::Index c = 0; c < centers.rows(); ++c) {
        const double d2 = (points.row(r) - centers.row(c)).squaredNorm();
        if (d2 < best) {
            best = d2;
            arg = static_cast<std::size_t>(c);
        }
    }
    out.squared_distance[static_cast<std::size_t>(r)] = best;
    out.index[static_cast<std::size_t>(r)] = arg;
}

void check_centers(const RowMatrixXd& points, const RowMatrixXd& centers) {
    require(points.cols() == centers.cols(), ErrorCode::DimensionMismatch,
            "dimension mismatch: points vs centers");
    require(centers.rows() >= 1, ErrorCode::ContractViolation, "at least one center required");
}

NearestCenter make_nearest(Eigen::Index n) {
    NearestCenter nc;
    nc.squared_distance.resize(static_cast<std::size_t>(n));
    nc.index.resize(static_cast<std::size_t>(n));
    return nc;
}

}  // namespace

std::vector<double> inverse_row_norms(const FeatureMatrix& m) {
    std::vector<double> inv(m.n_samples());
    for (std::size_t i = 0; i < m.n_samples(); ++i) {
        const double sq = dot(m.row(i), m.row(i));
        require(sq > 0.0, ErrorCode::InvariantViolation,
                "invariant violation: zero-norm row " + std::to_string(i));
        inv[i] = 1.0 / std::sqrt(sq);
    }
    return inv;
}

namespace serial {

std::vector<double> max_cosine(const FeatureMatrix& train, const FeatureMatrix& test) {
    const CosineContext ctx(train, test);
    std::vector<double> out(test.n_samples());
    for (std::size_t j = 0; j < test.n_samples(); ++j) out[j] = ctx.max_row(j);
    return out;
}

std::vector<std::vector<Neighbor>> top_k_cosine(const FeatureMatrix& train,
                                                const FeatureMatrix& test, std::size_t k) {
    check_top_k(train, k);
    const CosineContext ctx(train, test);
    std::vector<std::vector<Neighbor>> out(test.n_samples());
    for (std::size_t j = 0; j < test.n_samples(); ++j) out[j] = ctx.top_k_row(j, k);
    return out;
}

RowMatrixXd lower_solve_rows(const Eigen::MatrixXd& lower, const RowMatrixXd& rows) {
    check_solve(lower, rows);
    RowMatrixXd out(rows.rows(), rows.cols());
    for (Eigen::Index r = 0; r < rows.rows(); ++r) lower_solve_row(lower, rows, out, r);
    return out;
}

NearestCenter nearest_center(const RowMatrixXd& points, const RowMatrixXd& centers) {
    check_centers(points, centers);
    auto out = make_nearest(points.rows());
    for (Eigen::Index r = 0; r < points.rows(); ++r) nearest_row(points, centers, out, r);
    return out;
}

}  // namespace serial

namespace parallel {

std::vector<double> max_cosine(const FeatureMatrix& train, const FeatureMatrix& test) {
    const CosineContext ctx(train, test);
    const auto m = static_cast<std::ptrdiff_t>(test.n_samples());
    std::vector<double> out(test.n_samples());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t j = 0; j < m; ++j) out[std::size_t(j)] = ctx.max_row(std::size_t(j));
    return out;
}

std::vector<std::vector<Neighbor>> top_k_cosine(const FeatureMatrix& train,
                                                const FeatureMatrix& test, std::size_t k) {
    check_top_k(train, k);
    const CosineContext ctx(train, test);
    const auto m = static_cast<std::ptrdiff_t>(test.n_samples());
    std::vector<std::vector<Neighbor>> out(test.n_samples());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t j = 0; j < m; ++j) out[std::size_t(j)] = ctx.top_k_row(std::size_t(j), k);
    return out;
}

RowMatrixXd lower_solve_rows(const Eigen::MatrixXd& lower, const RowMatrixXd& rows) {
    check_solve(lower, rows);
    RowMatrixXd out(rows.rows(), rows.cols());
    const Eigen::Index n = rows.rows();
#pragma omp parallel for schedule(static)
    for (Eigen::Index r = 0; r < n; ++r) lower_solve_row(lower, rows, out, r);
    return out;
}

NearestCenter nearest_center(const RowMatrixXd& points, const RowMatrixXd& centers) {
    check_centers(points, centers);
    auto out = make_nearest(points.rows());
    const Eigen::Index n = points.rows();
#pragma omp parallel for schedule(static)
    for (Eigen::Index r = 0; r < n; ++r) nearest_row(points, centers, out, r);
    return out;
}

}  // namespace parallel

}  // namespace oodkit::kernels
