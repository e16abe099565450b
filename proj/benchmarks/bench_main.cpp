#include <benchmark/benchmark.h>

#include "zscore/cluster.hpp"
#include "zscore/merkle.hpp"
#include "zscore/net.hpp"
#include "zscore/rng.hpp"
#include "zscore/store.hpp"

namespace {

Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
    zscore::Rng rng(seed);
    Eigen::MatrixXd x(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) x(i, j) = rng.normal();
    return x;
}

void BM_Silhouette(benchmark::State& state) {
    const auto n = state.range(0);
    const auto x = random_matrix(n, 13, 1);
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 20);
    for (auto _ : state) benchmark::DoNotOptimize(zscore::cluster::silhouette_score(x, labels));
    state.SetComplexityN(n);
}
BENCHMARK(BM_Silhouette)->RangeMultiplier(2)->Range(256, 4096)->Complexity();

void BM_KMeans(benchmark::State& state) {
    const auto x = random_matrix(state.range(0), 13, 2);
    for (auto _ : state) benchmark::DoNotOptimize(zscore::cluster::kmeans(x, 20, 7).inertia);
}
BENCHMARK(BM_KMeans)->Arg(2000)->Unit(benchmark::kMillisecond);

std::vector<zscore::attest::ZScoreRecord> records(std::size_t n) {
    std::vector<zscore::attest::ZScoreRecord> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back({"0x" + std::to_string(i * 7919), static_cast<int>(1 + i % 900), 0, 0});
    return out;
}

void BM_MerkleRoot(benchmark::State& state) {
    const auto rs = records(static_cast<std::size_t>(state.range(0)));
    for (auto _ : state) benchmark::DoNotOptimize(zscore::attest::compute_root(rs));
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_MerkleRoot)->Arg(1000)->Arg(100000)->Unit(benchmark::kMicrosecond);

void BM_ProofVerify(benchmark::State& state) {
    zscore::attest::ScoreStore store;
    const auto root = store.put_scores(records(static_cast<std::size_t>(state.range(0))), 1);
    const auto proof = store.get_proof("0x7919", 1);
    for (auto _ : state) benchmark::DoNotOptimize(zscore::attest::verify_proof(proof, root));
}
BENCHMARK(BM_ProofVerify)->Arg(100000);

void BM_Forward(benchmark::State& state) {
    const auto params = zscore::net::init_params(zscore::net::NetConfig{}, 40);
    const Eigen::VectorXd x = random_matrix(1, 13, 3).row(0).transpose();
    for (auto _ : state) benchmark::DoNotOptimize(zscore::net::forward(params, x, 5).raw_score);
}
BENCHMARK(BM_Forward);

}  // namespace
BENCHMARK_MAIN();
