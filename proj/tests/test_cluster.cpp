#include <doctest.h>

#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "support/oracles.hpp"
#include "zscore/cluster.hpp"
#include "zscore/common.hpp"
#include "zscore/rng.hpp"

using namespace zscore;
using namespace zscore::cluster;

namespace {

Eigen::MatrixXd blobs(const std::vector<Eigen::Vector2d>& centers, int per_blob, double sigma, std::uint64_t seed,
                      std::vector<int>* truth = nullptr) {
    Rng rng(seed);
    Eigen::MatrixXd x(static_cast<Eigen::Index>(centers.size()) * per_blob, 2);
    Eigen::Index r = 0;
    for (std::size_t c = 0; c < centers.size(); ++c) {
        for (int i = 0; i < per_blob; ++i, ++r) {
            x(r, 0) = centers[c].x() + rng.normal(0.0, sigma);
            x(r, 1) = centers[c].y() + rng.normal(0.0, sigma);
            if (truth) truth->push_back(static_cast<int>(c));
        }
    }
    return x;
}

Eigen::MatrixXd random_points(Eigen::Index n, Eigen::Index d, std::uint64_t seed) {
    Rng rng(seed);
    Eigen::MatrixXd x(n, d);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < d; ++j) x(i, j) = rng.uniform(-1.0, 1.0);
    return x;
}

// Greedy Ward clustering: repeatedly merge the pair with the smallest SSE increase.
std::vector<int> ward_oracle(const Eigen::MatrixXd& x, int k) {
    std::vector<std::vector<Eigen::Index>> groups;
    for (Eigen::Index i = 0; i < x.rows(); ++i) groups.push_back({i});
    auto centroid = [&](const std::vector<Eigen::Index>& g) {
        Eigen::RowVectorXd c = Eigen::RowVectorXd::Zero(x.cols());
        for (auto i : g) c += x.row(i);
        return Eigen::RowVectorXd(c / static_cast<double>(g.size()));
    };
    while (static_cast<int>(groups.size()) > k) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t ba = 0, bb = 0;
        for (std::size_t a = 0; a < groups.size(); ++a) {
            for (std::size_t b = a + 1; b < groups.size(); ++b) {
                const double na = static_cast<double>(groups[a].size()), nb = static_cast<double>(groups[b].size());
                const double cost = na * nb / (na + nb) * (centroid(groups[a]) - centroid(groups[b])).squaredNorm();
                if (cost < best) {
                    best = cost;
                    ba = a;
                    bb = b;
                }
            }
        }
        groups[ba].insert(groups[ba].end(), groups[bb].begin(), groups[bb].end());
        groups.erase(groups.begin() + static_cast<std::ptrdiff_t>(bb));
    }
    std::vector<int> labels(static_cast<std::size_t>(x.rows()));
    for (std::size_t g = 0; g < groups.size(); ++g)
        for (auto i : groups[g]) labels[static_cast<std::size_t>(i)] = static_cast<int>(g);
    return labels;
}

}  // namespace

TEST_SUITE("cluster") {

TEST_CASE("objective") {
    CHECK(objective(0.0, 1) == 1.0);
    CHECK(objective(0.59, 10) == doctest::Approx(15.9));
    CHECK(objective(0.60, 23) == doctest::Approx(29.0));
}

TEST_CASE("silhouette edge cases") {
    Eigen::MatrixXd x(4, 1);
    x << 0, 1, 10, 11;
    CHECK(silhouette_score(x, {0, 0, 1, 1}) == doctest::Approx(oracle::silhouette(x, {0, 0, 1, 1})));
    CHECK(silhouette_score(x, {0, 1, 2, 3}) == 0.0);
    CHECK_THROWS_AS(silhouette_score(x, {0, 0, 0, 0}), Error);
    CHECK_THROWS_AS(silhouette_score(x, {0, kNoise, kNoise, kNoise}), Error);
    // Noise rows are left out of both the average and the neighbour means.
    CHECK(silhouette_score(x, {0, kNoise, 1, 1}) == doctest::Approx(oracle::silhouette(x, {0, kNoise, 1, 1})));
}

TEST_CASE("silhouette agrees with the naive definition") {
    Rng rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        const auto n = static_cast<Eigen::Index>(rng.integer(5, 60));
        const auto x = random_points(n, 3, rng.next());
        const int k = static_cast<int>(rng.integer(2, 5));
        std::vector<int> labels;
        for (Eigen::Index i = 0; i < n; ++i) labels.push_back(static_cast<int>(rng.integer(-1, k - 1)));
        labels[0] = 0;
        labels[1] = 1;
        CHECK(silhouette_score(x, labels) == doctest::Approx(oracle::silhouette(x, labels)).epsilon(1e-12));
    }
}

TEST_CASE("silhouette does not depend on row order") {
    std::vector<int> truth;
    const auto x = blobs({{0, 0}, {3, 0}, {0, 3}}, 30, 0.6, 5, &truth);
    std::vector<Eigen::Index> perm(static_cast<std::size_t>(x.rows()));
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<Eigen::Index>(i);
    Rng rng(6);
    rng.shuffle(perm);
    Eigen::MatrixXd y(x.rows(), x.cols());
    std::vector<int> relabeled(truth.size());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        y.row(static_cast<Eigen::Index>(i)) = x.row(perm[i]);
        relabeled[i] = truth[static_cast<std::size_t>(perm[i])];
    }
    CHECK(silhouette_score(y, relabeled) == doctest::Approx(silhouette_score(x, truth)).epsilon(1e-12));
}

TEST_CASE("k-means on square corners") {
    Eigen::MatrixXd x(4, 2);
    x << 0, 0, 0, 1, 10, 0, 10, 1;
    const auto r = kmeans(x, 2, 1);
    CHECK(r.labels[0] == r.labels[1]);
    CHECK(r.labels[2] == r.labels[3]);
    CHECK(r.labels[0] != r.labels[2]);
    CHECK(r.inertia == doctest::Approx(1.0));
    CHECK(kmeans(x, 4, 1).inertia == 0.0);
    CHECK_THROWS_AS(kmeans(x, 5, 1), Error);
}

TEST_CASE("k-means recovers separated blobs") {
    std::vector<int> truth;
    const auto x = blobs({{0, 0}, {8, 0}, {0, 8}}, 100, 1.0, 3, &truth);
    const auto r = kmeans(x, 3, 42);
    CHECK(adjusted_rand_index(r.labels, truth) >= 0.99);
    CHECK(oracle::adjusted_rand(r.labels, truth) >= 0.99);
    CHECK(r.n_clusters == 3);
    CHECK(r.objective == doctest::Approx(objective(r.silhouette, 3)));
}

TEST_CASE("k-means is deterministic in its seed") {
    const auto x = random_points(200, 4, 8);
    const auto a = kmeans(x, 6, 123), b = kmeans(x, 6, 123);
    CHECK(a.labels == b.labels);
    CHECK(a.inertia == b.inertia);
}

TEST_CASE("adjusted Rand index") {
    CHECK(adjusted_rand_index({0, 0, 1, 1}, {1, 1, 0, 0}) == doctest::Approx(1.0));
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<int> a, b;
        for (int i = 0; i < 40; ++i) {
            a.push_back(static_cast<int>(rng.index(4)));
            b.push_back(static_cast<int>(rng.index(3)));
        }
        CHECK(adjusted_rand_index(a, b) == doctest::Approx(oracle::adjusted_rand(a, b)).epsilon(1e-12));
    }
}

TEST_CASE("Ward agglomeration matches a greedy reference") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto x = random_points(30, 3, 100 + seed);
        for (int k : {2, 4, 7}) {
            const auto r = agglomerative(x, k);
            CHECK(r.n_clusters == k);
            CHECK(adjusted_rand_index(r.labels, ward_oracle(x, k)) == doctest::Approx(1.0));
            CHECK(r.labels == canonical_labels(r.labels));
        }
    }
    const auto merges = ward_linkage(random_points(25, 2, 9));
    CHECK(merges.size() == 24);
    for (std::size_t i = 1; i < merges.size(); ++i) CHECK(merges[i].height >= merges[i - 1].height - 1e-12);
}

TEST_CASE("DBSCAN matches a brute-force reference") {
    Rng rng(31);
    for (int trial = 0; trial < 10; ++trial) {
        const auto x = random_points(60, 2, rng.next());
        const double eps = rng.uniform(0.15, 0.4);
        const int min_samples = static_cast<int>(rng.integer(2, 5));
        const auto r = dbscan(x, eps, min_samples);

        const auto n = static_cast<std::size_t>(x.rows());
        std::vector<std::vector<std::size_t>> nbrs(n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (oracle::distance(x, static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) <= eps) nbrs[i].push_back(j);
        std::vector<bool> core(n);
        for (std::size_t i = 0; i < n; ++i) core[i] = static_cast<int>(nbrs[i].size()) >= min_samples;
        // Components of the core graph.
        std::vector<int> comp(n, -1);
        int next = 0;
        for (std::size_t s = 0; s < n; ++s) {
            if (!core[s] || comp[s] >= 0) continue;
            std::vector<std::size_t> stack{s};
            comp[s] = next;
            while (!stack.empty()) {
                const auto u = stack.back();
                stack.pop_back();
                for (auto v : nbrs[u]) {
                    if (core[v] && comp[v] < 0) {
                        comp[v] = next;
                        stack.push_back(v);
                    }
                }
            }
            ++next;
        }
        CHECK(r.n_clusters == next);
        std::map<int, int> to_oracle;
        for (std::size_t i = 0; i < n; ++i) {
            if (!core[i]) continue;
            REQUIRE(r.labels[i] != kNoise);
            auto [it, fresh] = to_oracle.emplace(r.labels[i], comp[i]);
            CHECK(it->second == comp[i]);
        }
        for (std::size_t i = 0; i < n; ++i) {
            if (core[i]) continue;
            std::set<int> reachable;
            for (auto v : nbrs[i])
                if (core[v]) reachable.insert(comp[v]);
            if (reachable.empty()) {
                CHECK(r.labels[i] == kNoise);
            } else {
                REQUIRE(r.labels[i] != kNoise);
                CHECK(reachable.count(to_oracle.at(r.labels[i])) == 1);
            }
        }
    }
}

TEST_CASE("DBSCAN with nothing dense is all noise") {
    Eigen::MatrixXd x(3, 1);
    x << 0, 5, 10;
    const auto r = dbscan(x, 1.0, 2);
    CHECK(r.all_noise);
    CHECK(r.n_clusters == 0);
    CHECK(std::isinf(r.objective));
    CHECK(r.objective < 0);
}

TEST_CASE("canonical labels") {
    CHECK(canonical_labels({5, 5, kNoise, 2, 5, 9}) == std::vector<int>{0, 0, kNoise, 1, 0, 2});
}

TEST_CASE("label CSV round trip") {
    LabelTable table{{"0xa", "0xb", "0xc"}, {0, kNoise, 3}};
    std::ostringstream out;
    write_labels_csv(out, table);
    std::istringstream in(out.str());
    const auto back = read_labels_csv(in);
    CHECK(back.wallets == table.wallets);
    CHECK(back.labels == table.labels);
}

}  // TEST_SUITE
