#include <doctest.h>

#include <cmath>
#include <random>

#include "oodkit/detection_scores.hpp"
#include "oracles.hpp"

using namespace oodkit;

namespace {

FeatureMatrix transform(const FeatureMatrix& m, const Eigen::MatrixXd& q) {
    std::vector<float> v(m.n_samples() * m.dim());
    for (std::size_t i = 0; i < m.n_samples(); ++i) {
        const Eigen::VectorXd r = q * oracle::row_vec(m, i);
        for (std::size_t j = 0; j < m.dim(); ++j) v[i * m.dim() + j] = float(r(Eigen::Index(j)));
    }
    return FeatureMatrix(m.n_samples(), m.dim(), std::move(v));
}

Eigen::MatrixXd random_orthogonal(std::mt19937_64& rng, Eigen::Index d) {
    std::normal_distribution<double> nd;
    Eigen::MatrixXd a(d, d);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = nd(rng);
    return Eigen::HouseholderQR<Eigen::MatrixXd>(a).householderQ();
}

LabelVector single_class(std::size_t n) { return {std::vector<std::uint32_t>(n, 0), 1}; }

}  // namespace

TEST_CASE("nn_score examples") {
    CHECK(nn_score(FeatureMatrix::from_rows({{1, 0}, {0, 1}}), FeatureMatrix::from_rows({{1, 0}})).scores[0] == 1.0);
    CHECK(nn_score(FeatureMatrix::from_rows({{1, 0}}), FeatureMatrix::from_rows({{-1, 0}})).scores[0] == -1.0);
    CHECK_THROWS_AS(nn_score(FeatureMatrix::from_rows({{1, 0}}), FeatureMatrix::from_rows({{1, 0, 0}})), Error);
}

TEST_CASE("property: nn_score matches the brute-force oracle") {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 100; ++trial) {
        const auto train = gen::gaussian_matrix(rng, 50, 8);
        const auto test = gen::gaussian_matrix(rng, 20, 8);
        const auto got = nn_score(train, test);
        CHECK(got.kind == ScoreKind::Nn);
        const auto want = oracle::nn_scores(train, test);
        for (std::size_t j = 0; j < want.size(); ++j) CHECK(std::abs(got.scores[j] - want[j]) < 1e-6);
    }
}

TEST_CASE("nn_score is invariant to positive row rescaling") {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> scale(0.1, 10.0);
    const auto train = gen::gaussian_matrix(rng, 30, 5);
    const auto test = gen::gaussian_matrix(rng, 10, 5);
    auto scaled = [&](const FeatureMatrix& m) {
        std::vector<std::vector<double>> rows = oracle::rows_of(m);
        for (auto& r : rows) {
            const double s = scale(rng);
            for (auto& x : r) x *= s;
        }
        return gen::from_doubles(rows);
    };
    const auto a = nn_score(train, test).scores;
    const auto b = nn_score(scaled(train), scaled(test)).scores;
    for (std::size_t j = 0; j < a.size(); ++j) CHECK(std::abs(a[j] - b[j]) < 1e-6);
}

TEST_CASE("knn_classify examples") {
    const auto train = FeatureMatrix::from_rows({{1, 0}, {1, 0}, {1, 0}, {0, 1}, {0, 1}, {0, 1}});
    const LabelVector y{{0, 0, 0, 1, 1, 1}, 2};
    CHECK(knn_classify(train, y, FeatureMatrix::from_rows({{0, 1}}), 1)[0] == 1);
    CHECK(knn_classify(train, y, FeatureMatrix::from_rows({{0.9, 0.1}}), 3)[0] == 0);

    const auto skewed = FeatureMatrix::from_rows({{1, 0}, {1, 0.1}, {1, 0.2}, {1, 0.3}, {0, 1}, {0.1, 1}});
    const LabelVector sy{{0, 0, 0, 0, 1, 1}, 2};
    CHECK(knn_classify(skewed, sy, FeatureMatrix::from_rows({{0, 1}}), 6)[0] == 0);

    // 2-2 vote: the class with the larger summed similarity wins.
    const auto tie = FeatureMatrix::from_rows({{1, 0}, {1, 0.5}, {0, 1}, {0.2, 1}});
    const LabelVector ty{{0, 0, 1, 1}, 2};
    CHECK(knn_classify(tie, ty, FeatureMatrix::from_rows({{0.1, 1}}), 4)[0] == 1);
    // Exact tie in votes and similarity: lower class index.
    const auto sym = FeatureMatrix::from_rows({{0, 1}, {1, 0}});
    CHECK(knn_classify(sym, LabelVector{{1, 0}, 2}, FeatureMatrix::from_rows({{1, 1}}), 2)[0] == 0);
}

TEST_CASE("fit_gaussian_stats on two single-point classes") {
    const auto x = FeatureMatrix::from_rows({{0, 0}, {2, 0}});
    const LabelVector y{{0, 1}, 2};
    const auto s = fit_gaussian_stats(x, y, 1e-3);
    CHECK(s.class_means(0, 0) == 0.0);
    CHECK(s.class_means(1, 0) == 2.0);
    CHECK(s.shared_covariance.cwiseAbs().maxCoeff() == 0.0);
    CHECK(s.background_mean(0) == 1.0);
    CHECK(s.background_mean(1) == 0.0);
    CHECK(s.background_covariance(0, 0) == 1.0);
    CHECK(s.background_covariance(0, 1) == 0.0);
    CHECK(s.background_covariance(1, 1) == 0.0);
    try {
        fit_gaussian_stats(x, y, 0.0);
        FAIL("singular covariance accepted");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::SingularCovariance);
        CHECK(std::string(e.what()) == "covariance singular; increase epsilon");
    }
}

TEST_CASE("identical samples give a singular covariance at epsilon 0") {
    const auto x = FeatureMatrix::from_rows({{1, 2}, {1, 2}, {1, 2}});
    CHECK_THROWS_AS(fit_gaussian_stats(x, single_class(3), 0.0), Error);
    CHECK_NOTHROW(fit_gaussian_stats(x, single_class(3), 1e-6));
}

TEST_CASE("default epsilon scales with the covariance trace") {
    std::mt19937_64 rng(4);
    const auto x = gen::gaussian_matrix(rng, 40, 3, 0.0, 10.0);
    const auto s = fit_gaussian_stats(x, single_class(40));
    CHECK(s.epsilon == doctest::Approx(kDefaultEpsilonScale * s.shared_covariance.trace() / 3).epsilon(1e-12));
}

TEST_CASE("property: covariance matches naive summation") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        const auto x = gen::gaussian_matrix(rng, 40, 2, 1.0, 2.0);
        const auto y = gen::balanced_labels(rng, 40, 2);
        const auto s = fit_gaussian_stats(x, y, 0.0);
        const auto g = oracle::naive_gaussians(x, y.labels, 2);
        CHECK((s.shared_covariance - g.cov).cwiseAbs().maxCoeff() < 1e-10);
        CHECK((s.background_covariance - g.cov0).cwiseAbs().maxCoeff() < 1e-10);
        for (std::size_t c = 0; c < 2; ++c)
            CHECK((s.class_means.row(Eigen::Index(c)).transpose() - g.means[c]).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("md_score examples") {
    // Identity covariance from symmetric points (±1, ±1) around the origin.
    const auto x = FeatureMatrix::from_rows({{1, 1}, {1, -1}, {-1, 1}, {-1, -1}});
    const auto s = fit_gaussian_stats(x, single_class(4), 0.0);
    CHECK((s.shared_covariance - Eigen::MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff() == 0.0);
    const auto md = md_score(s, FeatureMatrix::from_rows({{3, 4}, {0, 0}}));
    CHECK(md.kind == ScoreKind::Md);
    CHECK(md.scores[0] == doctest::Approx(-25.0).epsilon(1e-14));
    CHECK(md.scores[1] == 0.0);
    CHECK_THROWS_AS(md_score(s, FeatureMatrix::from_rows({{1, 2, 3}})), Error);
}

TEST_CASE("rmd_score examples") {
    std::mt19937_64 rng(6);
    const auto x = gen::gaussian_matrix(rng, 60, 3);
    const auto s = fit_gaussian_stats(x, single_class(60));
    const auto test = gen::gaussian_matrix(rng, 15, 3, 0.0, 3.0);
    for (double v : rmd_score(s, test).scores) CHECK(std::abs(v) < 1e-9);

    // Test at a class mean that sits far from the background mean.
    const auto two = FeatureMatrix::from_rows({{-5, 0}, {-5, 1}, {-5, -1}, {5, 0}, {5, 1}, {5, -1}});
    const auto s2 = fit_gaussian_stats(two, LabelVector{{0, 0, 0, 1, 1, 1}, 2});
    CHECK(rmd_score(s2, FeatureMatrix::from_rows({{5, 0}})).scores[0] > 0.0);
}

TEST_CASE("property: md and rmd match the explicit-inverse oracle") {
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<std::size_t> cdist(1, 5), ddist(1, 10);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t c = cdist(rng), d = ddist(rng);
        std::uniform_int_distribution<std::size_t> ndist(std::max<std::size_t>(c, d + c), 200);
        const std::size_t n = ndist(rng);
        const auto x = gen::gaussian_matrix(rng, n, d);
        const auto y = gen::balanced_labels(rng, n, std::uint32_t(c));
        const auto test = gen::gaussian_matrix(rng, 25, d, 0.0, 2.0);
        const double eps = trial % 2 ? 1e-3 : 0.0;
        const auto s = fit_gaussian_stats(x, y, eps);
        std::vector<double> md, rmd;
        oracle::md_rmd_scores(oracle::naive_gaussians(x, y.labels, c), eps, test, md, rmd);
        CHECK(oracle::relative_error(md_score(s, test).scores, md) < 1e-8);
        CHECK(oracle::relative_error(rmd_score(s, test).scores, rmd) < 1e-8);
    }
}

TEST_CASE("md and rmd are invariant to a joint rotation") {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 10; ++trial) {
        const auto x = gen::gaussian_matrix(rng, 120, 4);
        const auto y = gen::balanced_labels(rng, 120, 3);
        const auto test = gen::gaussian_matrix(rng, 20, 4);
        const auto q = random_orthogonal(rng, 4);
        const auto s = fit_gaussian_stats(x, y, 0.0);
        const auto sr = fit_gaussian_stats(transform(x, q), y, 0.0);
        const auto tr = transform(test, q);
        CHECK(oracle::relative_error(md_score(sr, tr).scores, md_score(s, test).scores) < 1e-6);
        CHECK(oracle::relative_error(rmd_score(sr, tr).scores, rmd_score(s, test).scores) < 1e-6);
    }
}

TEST_CASE("scores rank a training point above farther points") {
    std::mt19937_64 rng(9);
    const auto train = gen::gaussian_matrix(rng, 30, 3, 0.0, 1.0);
    const auto nn_self = nn_score(train, train.select_rows(std::vector<std::size_t>{0})).scores[0];
    const auto nn_other = nn_score(train, gen::gaussian_matrix(rng, 50, 3)).scores;
    for (double v : nn_other) CHECK(nn_self >= v);

    const auto s = fit_gaussian_stats(train, single_class(30));
    const auto mean = gen::from_doubles({{s.class_means(0, 0), s.class_means(0, 1), s.class_means(0, 2)}});
    const double at_mean = md_score(s, mean).scores[0];
    CHECK(at_mean == doctest::Approx(0.0).epsilon(1e-6));
    for (double v : md_score(s, gen::gaussian_matrix(rng, 50, 3)).scores) CHECK(at_mean >= v);
}

TEST_CASE("kmeans examples") {
    std::mt19937_64 rng(10);
    SUBCASE("k = n gives zero inertia") {
        const auto x = gen::gaussian_matrix(rng, 12, 3);
        const auto m = kmeans_fit(x, 12, kDefaultKmeansIters, 3);
        CHECK(m.inertia() == 0.0);
        std::vector<int> hit(12, 0);
        for (auto a : m.assignments) ++hit[a];
        for (int h : hit) CHECK(h == 1);
    }
    SUBCASE("two separated blobs") {
        const LabelVector y = gen::balanced_labels(rng, 200, 2);
        const auto x = gen::blobs(rng, {{-50, 0}, {50, 0}}, y, 1.0);
        const auto g = oracle::naive_gaussians(x, y.labels, 2);
        const auto m = kmeans_fit(x, 2, kDefaultKmeansIters, 0);
        for (Eigen::Index c = 0; c < 2; ++c) {
            const Eigen::VectorXd ctr = m.centers.row(c).transpose();
            const double d = std::min((ctr - g.means[0]).norm(), (ctr - g.means[1]).norm());
            CHECK(d < 1e-6);
        }
    }
    SUBCASE("deterministic and monotone") {
        const auto x = gen::gaussian_matrix(rng, 300, 4);
        const auto a = kmeans_fit(x, 7, kDefaultKmeansIters, 42);
        const auto b = kmeans_fit(x, 7, kDefaultKmeansIters, 42);
        CHECK(a.assignments == b.assignments);
        CHECK(a.inertia_trace == b.inertia_trace);
        for (std::size_t i = 1; i < a.inertia_trace.size(); ++i)
            CHECK(a.inertia_trace[i] <= a.inertia_trace[i - 1] * (1 + 1e-12));
        std::vector<int> hit(7, 0);
        for (auto c : a.assignments) ++hit[c];
        for (int h : hit) CHECK(h > 0);
    }
    SUBCASE("duplicated points still fill every cluster") {
        const auto x = FeatureMatrix::from_rows({{1, 1}, {1, 1}, {1, 1}, {1, 1}, {2, 2}});
        const auto m = kmeans_fit(x, 3, kDefaultKmeansIters, 0);
        std::vector<int> hit(3, 0);
        for (auto c : m.assignments) ++hit[c];
        for (int h : hit) CHECK(h > 0);
    }
    SUBCASE("errors") {
        const auto x = gen::gaussian_matrix(rng, 4, 2);
        CHECK_THROWS_AS(kmeans_fit(x, 5), Error);
        CHECK_THROWS_AS(kmeans_fit(x, 0), Error);
    }
}

TEST_CASE("kmeans_md_score") {
    std::mt19937_64 rng(11);
    SUBCASE("k=1 reduces to single-class md") {
        const auto x = gen::gaussian_matrix(rng, 80, 3);
        const auto test = gen::gaussian_matrix(rng, 10, 3);
        const auto a = kmeans_md_score(x, test, 1);
        const auto b = md_score(fit_gaussian_stats(x, single_class(80)), test);
        CHECK(a.kind == ScoreKind::KmeansMd);
        CHECK(oracle::relative_error(a.scores, b.scores) < 1e-12);
    }
    SUBCASE("test at a blob mean scores 0") {
        const LabelVector y = gen::balanced_labels(rng, 100, 2);
        const auto x = gen::blobs(rng, {{-20, 0, 0}, {20, 0, 0}}, y, 1.0);
        const auto g = oracle::naive_gaussians(x, y.labels, 2);
        const auto test = gen::from_doubles({{g.means[1](0), g.means[1](1), g.means[1](2)}});
        CHECK(kmeans_md_score(x, test, 2).scores[0] == doctest::Approx(0.0).epsilon(1e-5));
    }
    SUBCASE("k=5 deterministic and finite") {
        const auto x = gen::gaussian_matrix(rng, 200, 4);
        const auto test = gen::gaussian_matrix(rng, 30, 4);
        const auto a = kmeans_md_score(x, test, 5, std::nullopt, 9);
        const auto b = kmeans_md_score(x, test, 5, std::nullopt, 9);
        CHECK(a.scores == b.scores);
        for (double v : a.scores) CHECK(std::isfinite(v));
    }
}

TEST_CASE("msp_score examples") {
    const auto s = msp_score(FeatureMatrix::from_rows({{0, 0, 0, 0}}));
    CHECK(s.scores[0] == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(msp_score(FeatureMatrix::from_rows({{10, 0}})).scores[0] ==
          doctest::Approx(1.0 / (1.0 + std::exp(-10.0))).epsilon(1e-12));
    CHECK(std::abs(msp_score(FeatureMatrix::from_rows({{10, 0}})).scores[0] - 0.9999546) < 1e-7);
    const double big = msp_score(FeatureMatrix::from_rows({{1000, 0}})).scores[0];
    CHECK(std::isfinite(big));
    CHECK(big == 1.0);
}

TEST_CASE("msp_score is shift invariant") {
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> shift(-50, 50);
    for (int trial = 0; trial < 100; ++trial) {
        // Logits on a 2^-10 grid so the shifted values stay exact in f32.
        auto rows = oracle::rows_of(gen::gaussian_matrix(rng, 1, 5, 0.0, 3.0));
        for (auto& v : rows[0]) v = std::round(v * 1024.0) / 1024.0;
        auto shifted_rows = rows;
        const double c = std::round(shift(rng));
        for (auto& v : shifted_rows[0]) v += c;
        const double a = msp_score(gen::from_doubles(rows)).scores[0];
        const double b = msp_score(gen::from_doubles(shifted_rows)).scores[0];
        CHECK(std::abs(a - b) < 1e-12);
    }
}

TEST_CASE("score kind names") {
    for (auto k : {ScoreKind::Nn, ScoreKind::Md, ScoreKind::Rmd, ScoreKind::KmeansMd, ScoreKind::Msp,
                   ScoreKind::RmdLogits})
        CHECK(parse_score_kind(to_string(k)) == k);
    CHECK_THROWS_AS(parse_score_kind("odin"), Error);
    CHECK(requires_labels(ScoreKind::Rmd));
    CHECK_FALSE(requires_labels(ScoreKind::KmeansMd));
}
