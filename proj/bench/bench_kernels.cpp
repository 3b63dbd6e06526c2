#include <random>

#include <benchmark/benchmark.h>

#include "oodkit/kernels.hpp"

using namespace oodkit;
using kernels::RowMatrixXd;

namespace {

FeatureMatrix random_features(std::size_t n, std::size_t d, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> nd;
    std::vector<float> v(n * d);
    for (auto& x : v) x = nd(rng);
    return FeatureMatrix(n, d, std::move(v));
}

RowMatrixXd random_rows(Eigen::Index n, Eigen::Index d, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    RowMatrixXd m(n, d);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
    return m;
}

template <auto Kernel>
void BM_max_cosine(benchmark::State& state) {
    const auto train = random_features(std::size_t(state.range(0)), 256, 1);
    const auto test = random_features(512, 256, 2);
    for (auto _ : state) benchmark::DoNotOptimize(Kernel(train, test));
    state.SetItemsProcessed(state.iterations() * state.range(0) * 512);
}

template <auto Kernel>
void BM_nearest_center(benchmark::State& state) {
    const auto points = random_rows(state.range(0), 64, 3);
    const auto centers = random_rows(16, 64, 4);
    for (auto _ : state) benchmark::DoNotOptimize(Kernel(points, centers));
    state.SetItemsProcessed(state.iterations() * state.range(0));
}

template <auto Kernel>
void BM_lower_solve(benchmark::State& state) {
    const Eigen::Index d = 128;
    const RowMatrixXd a = random_rows(d, d, 5);
    const Eigen::MatrixXd lower = (a * a.transpose() + Eigen::MatrixXd::Identity(d, d)).llt().matrixL();
    const auto rows = random_rows(state.range(0), d, 6);
    for (auto _ : state) benchmark::DoNotOptimize(Kernel(lower, rows));
    state.SetItemsProcessed(state.iterations() * state.range(0));
}

}  // namespace

BENCHMARK(BM_max_cosine<kernels::serial::max_cosine>)->Name("max_cosine/serial")->Arg(2048)->Arg(8192);
BENCHMARK(BM_max_cosine<kernels::parallel::max_cosine>)->Name("max_cosine/parallel")->Arg(2048)->Arg(8192)->UseRealTime();
BENCHMARK(BM_nearest_center<kernels::serial::nearest_center>)->Name("nearest_center/serial")->Arg(65536);
BENCHMARK(BM_nearest_center<kernels::parallel::nearest_center>)->Name("nearest_center/parallel")->Arg(65536)->UseRealTime();
BENCHMARK(BM_lower_solve<kernels::serial::lower_solve_rows>)->Name("lower_solve/serial")->Arg(8192);
BENCHMARK(BM_lower_solve<kernels::parallel::lower_solve_rows>)->Name("lower_solve/parallel")->Arg(8192)->UseRealTime();

BENCHMARK_MAIN();
