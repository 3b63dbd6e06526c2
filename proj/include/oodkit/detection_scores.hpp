#pragma once

// Anomaly scores over feature embeddings. Every score follows one orientation:
// higher means more in-distribution.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "oodkit/embedding_store.hpp"
#include "oodkit/kernels.hpp"

namespace oodkit {

enum class ScoreKind { Nn, Md, Rmd, KmeansMd, Msp, RmdLogits };

const char* to_string(ScoreKind kind);
ScoreKind parse_score_kind(const std::string& text);
/// md and rmd (and their logit variant) need class labels on the reference set.
bool requires_labels(ScoreKind kind);

struct ScoreVector {
    std::vector<double> scores;
    ScoreKind kind = ScoreKind::Nn;

    std::size_t size() const noexcept { return scores.size(); }
};

/// Class-conditional Gaussians with one shared covariance, plus a single
/// background Gaussian over all samples. The Cholesky factors are of the
/// regularized matrices Σ + εI and Σ₀ + εI.
struct GaussianStats {
    kernels::RowMatrixXd class_means;       // C×D
    Eigen::MatrixXd shared_covariance;      // Σ
    Eigen::MatrixXd shared_cholesky;        // lower L, L·Lᵀ = Σ + εI
    Eigen::VectorXd background_mean;        // μ₀
    Eigen::MatrixXd background_covariance;  // Σ₀
    Eigen::MatrixXd background_cholesky;    // lower L₀, L₀·L₀ᵀ = Σ₀ + εI
    double epsilon = 0.0;

    std::size_t dim() const noexcept { return static_cast<std::size_t>(class_means.cols()); }
    std::size_t n_classes() const noexcept { return static_cast<std::size_t>(class_means.rows()); }
};

struct ClusterModel {
    kernels::RowMatrixXd centers;  // k×D
    std::vector<std::uint32_t> assignments;
    std::size_t k = 0;
    /// Sum of squared distances to assigned centers after each Lloyd iteration.
    std::vector<double> inertia_trace;

    double inertia() const { return inertia_trace.empty() ? 0.0 : inertia_trace.back(); }
    LabelVector as_labels() const { return {assignments, static_cast<std::uint32_t>(k)}; }
};

inline constexpr std::size_t kDefaultKmeansIters = 300;
inline constexpr double kDefaultEpsilonScale = 1e-6;

/// Maximum cosine similarity of each test row to any train row.
ScoreVector nn_score(const FeatureMatrix& train, const FeatureMatrix& test);

/// Majority class among the k most similar train rows. Ties go to the class
/// with the larger summed similarity, then to the lower class index.
std::vector<std::uint32_t> knn_classify(const FeatureMatrix& train, const LabelVector& train_labels,
                                        const FeatureMatrix& test, std::size_t k);

/// Fits per-class means and the shared covariance (normalized by N). Without an
/// explicit epsilon the ridge is 1e-6 · trace(Σ) / D.
GaussianStats fit_gaussian_stats(const FeatureMatrix& features, const LabelVector& labels,
                                 std::optional<double> epsilon = std::nullopt);

/// M×C matrix of squared Mahalanobis distances to each class mean.
kernels::RowMatrixXd class_mahalanobis(const GaussianStats& stats, const FeatureMatrix& test);
/// Squared Mahalanobis distance to the background Gaussian, per test row.
std::vector<double> background_mahalanobis(const GaussianStats& stats, const FeatureMatrix& test);

ScoreVector md_score(const GaussianStats& stats, const FeatureMatrix& test);
ScoreVector rmd_score(const GaussianStats& stats, const FeatureMatrix& test);

/// Lloyd's algorithm from a seeded k-means++ start. Stops when assignments no
/// longer change or after max_iters; an empty cluster takes over the point
/// farthest from its current center.
ClusterModel kmeans_fit(const FeatureMatrix& features, std::size_t k,
                        std::size_t max_iters = kDefaultKmeansIters, std::uint64_t seed = 0);

/// k-means clusters used as pseudo-labels for an MD score.
ScoreVector kmeans_md_score(const FeatureMatrix& features, const FeatureMatrix& test,
                            std::size_t k, std::optional<double> epsilon = std::nullopt,
                            std::uint64_t seed = 0);

/// Maximum softmax probability of each logit row.
ScoreVector msp_score(const FeatureMatrix& logits);

/// Softmax of one row, computed with max subtraction.
std::vector<double> softmax(std::span<const float> logits);

}  // namespace oodkit
