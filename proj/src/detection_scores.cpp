#include "oodkit/detection_scores.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace oodkit {

const char* to_string(ScoreKind kind) {
    switch (kind) {
        case ScoreKind::Nn: return "nn";
        case ScoreKind::Md: return "md";
        case ScoreKind::Rmd: return "rmd";
        case ScoreKind::KmeansMd: return "kmeans-md";
        case ScoreKind::Msp: return "msp";
        case ScoreKind::RmdLogits: return "rmd-logits";
    }
    return "unknown";
}

ScoreKind parse_score_kind(const std::string& text) {
    for (auto k : {ScoreKind::Nn, ScoreKind::Md, ScoreKind::Rmd, ScoreKind::KmeansMd,
                   ScoreKind::Msp, ScoreKind::RmdLogits}) {
        if (text == to_string(k)) return k;
    }
    fail(ErrorCode::ContractViolation, "unknown score kind '" + text + "'");
}

bool requires_labels(ScoreKind kind) {
    return kind == ScoreKind::Md || kind == ScoreKind::Rmd || kind == ScoreKind::RmdLogits;
}

namespace {

kernels::RowMatrixXd to_double(const FeatureMatrix& m) {
    kernels::RowMatrixXd out(static_cast<Eigen::Index>(m.n_samples()),
                             static_cast<Eigen::Index>(m.dim()));
    const auto data = m.data();
    std::copy(data.begin(), data.end(), out.data());
    return out;
}

// Σ = (1/N) Σ_i (z_i − μ_{y_i})(z_i − μ_{y_i})ᵀ, accumulated over row blocks.
Eigen::MatrixXd centered_covariance(const FeatureMatrix& features,
                                    const kernels::RowMatrixXd& means,
                                    const std::vector<std::uint32_t>& row_class) {
    const auto n = static_cast<Eigen::Index>(features.n_samples());
    const auto d = static_cast<Eigen::Index>(features.dim());
    constexpr Eigen::Index kBlock = 2048;
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
    kernels::RowMatrixXd block;
    for (Eigen::Index start = 0; start < n; start += kBlock) {
        const Eigen::Index rows = std::min(kBlock, n - start);
        block.resize(rows, d);
        for (Eigen::Index r = 0; r < rows; ++r) {
            const auto i = static_cast<std::size_t>(start + r);
            const auto z = features.row(i);
            const auto c = static_cast<Eigen::Index>(row_class[i]);
            for (Eigen::Index j = 0; j < d; ++j) block(r, j) = double(z[std::size_t(j)]) - means(c, j);
        }
        cov.noalias() += block.transpose() * block;
    }
    cov /= static_cast<double>(n);
    return 0.5 * (cov + cov.transpose());
}

Eigen::MatrixXd regularized_cholesky(const Eigen::MatrixXd& cov, double epsilon) {
    const auto d = cov.rows();
    Eigen::LLT<Eigen::MatrixXd> llt(cov + epsilon * Eigen::MatrixXd::Identity(d, d));
    Eigen::MatrixXd lower = llt.matrixL();
    bool ok = llt.info() == Eigen::Success;
    for (Eigen::Index i = 0; ok && i < d; ++i) ok = std::isfinite(lower(i, i)) && lower(i, i) > 0.0;
    require(ok, ErrorCode::SingularCovariance, "covariance singular; increase epsilon");
    return lower;
}

void check_dim(const GaussianStats& stats, const FeatureMatrix& test) {
    require(test.dim() == stats.dim(), ErrorCode::DimensionMismatch,
            "dimension mismatch: stats dim " + std::to_string(stats.dim()) + " vs test dim " +
                std::to_string(test.dim()));
}

}  // namespace

ScoreVector nn_score(const FeatureMatrix& train, const FeatureMatrix& test) {
    return {kernels::parallel::max_cosine(train, test), ScoreKind::Nn};
}

std::vector<std::uint32_t> knn_classify(const FeatureMatrix& train, const LabelVector& train_labels,
                                        const FeatureMatrix& test, std::size_t k) {
    require(train_labels.size() == train.n_samples(), ErrorCode::DimensionMismatch,
            "label count does not match train rows");
    train_labels.validate();
    const auto neighbors = kernels::parallel::top_k_cosine(train, test, k);
    std::vector<std::uint32_t> out(test.n_samples());
    std::vector<std::size_t> votes(train_labels.n_classes);
    std::vector<double> sims(train_labels.n_classes);
    for (std::size_t j = 0; j < neighbors.size(); ++j) {
        std::fill(votes.begin(), votes.end(), 0);
        std::fill(sims.begin(), sims.end(), 0.0);
        for (const auto& nb : neighbors[j]) {
            const auto y = train_labels.labels[nb.index];
            ++votes[y];
            sims[y] += nb.similarity;
        }
        std::uint32_t best = 0;
        for (std::uint32_t c = 1; c < train_labels.n_classes; ++c) {
            if (votes[c] > votes[best] || (votes[c] == votes[best] && sims[c] > sims[best])) best = c;
        }
        out[j] = best;
    }
    return out;
}

GaussianStats fit_gaussian_stats(const FeatureMatrix& features, const LabelVector& labels,
                                 std::optional<double> epsilon) {
    require(labels.size() == features.n_samples(), ErrorCode::DimensionMismatch,
            "label count " + std::to_string(labels.size()) + " does not match feature rows " +
                std::to_string(features.n_samples()));
    require(labels.n_classes >= 1, ErrorCode::ContractViolation, "at least one class required");
    labels.require_all_classes_present();
    if (epsilon) {
        require(std::isfinite(*epsilon) && *epsilon >= 0.0, ErrorCode::ContractViolation,
                "epsilon must be a finite non-negative number");
    }

    const auto n = features.n_samples();
    const auto d = static_cast<Eigen::Index>(features.dim());
    const auto c_count = static_cast<Eigen::Index>(labels.n_classes);
    const auto counts = labels.class_counts();

    GaussianStats s;
    s.class_means = kernels::RowMatrixXd::Zero(c_count, d);
    s.background_mean = Eigen::VectorXd::Zero(d);
    for (std::size_t i = 0; i < n; ++i) {
        const auto z = features.row(i);
        const auto c = static_cast<Eigen::Index>(labels.labels[i]);
        for (Eigen::Index j = 0; j < d; ++j) {
            s.class_means(c, j) += z[std::size_t(j)];
            s.background_mean(j) += z[std::size_t(j)];
        }
    }
    for (Eigen::Index c = 0; c < c_count; ++c) s.class_means.row(c) /= double(counts[std::size_t(c)]);
    s.background_mean /= double(n);

    s.shared_covariance = centered_covariance(features, s.class_means, labels.labels);
    const std::vector<std::uint32_t> all_zero(n, 0);
    const kernels::RowMatrixXd mu0 = s.background_mean.transpose();
    s.background_covariance = centered_covariance(features, mu0, all_zero);

    s.epsilon = epsilon ? *epsilon
                        : kDefaultEpsilonScale * s.shared_covariance.trace() / static_cast<double>(d);
    s.shared_cholesky = regularized_cholesky(s.shared_covariance, s.epsilon);
    s.background_cholesky = regularized_cholesky(s.background_covariance, s.epsilon);
    return s;
}

kernels::RowMatrixXd class_mahalanobis(const GaussianStats& stats, const FeatureMatrix& test) {
    check_dim(stats, test);
    const auto white_test = kernels::parallel::lower_solve_rows(stats.shared_cholesky, to_double(test));
    const auto white_means = kernels::serial::lower_solve_rows(stats.shared_cholesky, stats.class_means);
    const Eigen::Index m = white_test.rows();
    const Eigen::Index c = white_means.rows();
    kernels::RowMatrixXd out(m, c);
#pragma omp parallel for schedule(static)
    for (Eigen::Index j = 0; j < m; ++j) {
        for (Eigen::Index k = 0; k < c; ++k) out(j, k) = (white_test.row(j) - white_means.row(k)).squaredNorm();
    }
    return out;
}

std::vector<double> background_mahalanobis(const GaussianStats& stats, const FeatureMatrix& test) {
    check_dim(stats, test);
    const kernels::RowMatrixXd mu0 = stats.background_mean.transpose();
    const auto white_mean = kernels::serial::lower_solve_rows(stats.background_cholesky, mu0);
    const auto nearest = kernels::parallel::nearest_center(
        kernels::parallel::lower_solve_rows(stats.background_cholesky, to_double(test)), white_mean);
    return nearest.squared_distance;
}

ScoreVector md_score(const GaussianStats& stats, const FeatureMatrix& test) {
    const auto md = class_mahalanobis(stats, test);
    ScoreVector out{std::vector<double>(test.n_samples()), ScoreKind::Md};
    for (Eigen::Index j = 0; j < md.rows(); ++j) out.scores[std::size_t(j)] = -md.row(j).minCoeff();
    return out;
}

ScoreVector rmd_score(const GaussianStats& stats, const FeatureMatrix& test) {
    const auto md = class_mahalanobis(stats, test);
    const auto md0 = background_mahalanobis(stats, test);
    ScoreVector out{std::vector<double>(test.n_samples()), ScoreKind::Rmd};
    for (Eigen::Index j = 0; j < md.rows(); ++j) {
        const auto jj = std::size_t(j);
        out.scores[jj] = -(md.row(j).minCoeff() - md0[jj]);
    }
    return out;
}

ScoreVector kmeans_md_score(const FeatureMatrix& features, const FeatureMatrix& test,
                            std::size_t k, std::optional<double> epsilon, std::uint64_t seed) {
    const auto model = kmeans_fit(features, k, kDefaultKmeansIters, seed);
    const auto stats = fit_gaussian_stats(features, model.as_labels(), epsilon);
    auto out = md_score(stats, test);
    out.kind = ScoreKind::KmeansMd;
    return out;
}

std::vector<double> softmax(std::span<const float> logits) {
    require(!logits.empty(), ErrorCode::ContractViolation, "softmax of an empty row");
    const double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double sum = 0.0;
    for (std::size_t c = 0; c < logits.size(); ++c) {
        p[c] = std::exp(double(logits[c]) - mx);
        sum += p[c];
    }
    for (auto& v : p) v /= sum;
    return p;
}

ScoreVector msp_score(const FeatureMatrix& logits) {
    ScoreVector out{std::vector<double>(logits.n_samples()), ScoreKind::Msp};
    const auto m = static_cast<std::ptrdiff_t>(logits.n_samples());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t j = 0; j < m; ++j) {
        const auto row = logits.row(std::size_t(j));
        const double mx = *std::max_element(row.begin(), row.end());
        double sum = 0.0;
        for (float v : row) sum += std::exp(double(v) - mx);
        out.scores[std::size_t(j)] = 1.0 / sum;
    }
    return out;
}

}  // namespace oodkit
