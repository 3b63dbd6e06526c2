#include <algorithm>
#include <limits>
#include <random>

#include "oodkit/detection_scores.hpp"

namespace oodkit {
namespace {

using kernels::RowMatrixXd;

RowMatrixXd plus_plus_init(const RowMatrixXd& x, std::size_t k, std::mt19937_64& rng) {
    const auto n = static_cast<std::size_t>(x.rows());
    RowMatrixXd centers(static_cast<Eigen::Index>(k), x.cols());
    std::vector<bool> chosen(n, false);
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());

    std::size_t pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    for (std::size_t c = 0;; ++c) {
        chosen[pick] = true;
        centers.row(static_cast<Eigen::Index>(c)) = x.row(static_cast<Eigen::Index>(pick));
        if (c + 1 == k) break;

        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double dist = (x.row(Eigen::Index(i)) - centers.row(Eigen::Index(c))).squaredNorm();
            d2[i] = std::min(d2[i], dist);
            if (!chosen[i]) total += d2[i];
        }
        if (total > 0.0) {
            const double u = std::uniform_real_distribution<double>(0.0, total)(rng);
            double acc = 0.0;
            pick = n;
            std::size_t last = n;
            for (std::size_t i = 0; i < n; ++i) {
                if (chosen[i]) continue;
                last = i;
                acc += d2[i];
                if (u < acc && d2[i] > 0.0) {
                    pick = i;
                    break;
                }
            }
            if (pick == n) pick = last;
        } else {
            // Every remaining point coincides with a center: pick uniformly among the unchosen.
            std::vector<std::size_t> rest;
            for (std::size_t i = 0; i < n; ++i) {
                if (!chosen[i]) rest.push_back(i);
            }
            pick = rest[std::uniform_int_distribution<std::size_t>(0, rest.size() - 1)(rng)];
        }
    }
    return centers;
}

// Empty cluster repair: the point farthest from its center (taken from a cluster
// with more than one member) becomes the sole member of the empty cluster.
void repair_empty(std::vector<std::size_t>& assign, std::vector<double>& dist, std::size_t k) {
    std::vector<std::size_t> counts(k, 0);
    for (auto a : assign) ++counts[a];
    for (std::size_t c = 0; c < k; ++c) {
        if (counts[c] != 0) continue;
        std::size_t far = assign.size();
        for (std::size_t i = 0; i < assign.size(); ++i) {
            if (counts[assign[i]] < 2) continue;
            if (far == assign.size() || dist[i] > dist[far]) far = i;
        }
        --counts[assign[far]];
        assign[far] = c;
        dist[far] = 0.0;
        counts[c] = 1;
    }
}

void update_centers(const RowMatrixXd& x, const std::vector<std::size_t>& assign, RowMatrixXd& centers) {
    const auto k = static_cast<std::size_t>(centers.rows());
    std::vector<std::size_t> counts(k, 0);
    centers.setZero();
    for (std::size_t i = 0; i < assign.size(); ++i) {
        centers.row(Eigen::Index(assign[i])) += x.row(Eigen::Index(i));
        ++counts[assign[i]];
    }
    for (std::size_t c = 0; c < k; ++c) centers.row(Eigen::Index(c)) /= double(counts[c]);
}

double inertia_of(const RowMatrixXd& x, const std::vector<std::size_t>& assign, const RowMatrixXd& centers) {
    double total = 0.0;
    for (std::size_t i = 0; i < assign.size(); ++i) {
        total += (x.row(Eigen::Index(i)) - centers.row(Eigen::Index(assign[i]))).squaredNorm();
    }
    return total;
}

}  // namespace

ClusterModel kmeans_fit(const FeatureMatrix& features, std::size_t k, std::size_t max_iters,
                        std::uint64_t seed) {
    const std::size_t n = features.n_samples();
    require(k >= 1, ErrorCode::ContractViolation, "k must be at least 1");
    require(k <= n, ErrorCode::ContractViolation,
            "k > n_samples (" + std::to_string(k) + " > " + std::to_string(n) + ")");
    require(max_iters >= 1, ErrorCode::ContractViolation, "max_iters must be at least 1");

    RowMatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(features.dim()));
    std::copy(features.data().begin(), features.data().end(), x.data());

    std::mt19937_64 rng(seed);
    ClusterModel model;
    model.k = k;
    model.centers = plus_plus_init(x, k, rng);

    std::vector<std::size_t> prev;
    for (std::size_t it = 0; it < max_iters; ++it) {
        auto nearest = kernels::parallel::nearest_center(x, model.centers);
        repair_empty(nearest.index, nearest.squared_distance, k);
        if (nearest.index == prev) break;
        update_centers(x, nearest.index, model.centers);
        model.inertia_trace.push_back(inertia_of(x, nearest.index, model.centers));
        prev = std::move(nearest.index);
    }
    model.assignments.assign(prev.begin(), prev.end());
    return model;
}

}  // namespace oodkit
