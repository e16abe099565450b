#include <doctest.h>

#include <cmath>

#include "zscore/common.hpp"
#include "zscore/pso.hpp"
#include "zscore/rng.hpp"

using namespace zscore;
using namespace zscore::cluster;

namespace {

Eigen::MatrixXd blobs(int n_blobs, int per_blob, double spacing, std::uint64_t seed) {
    Rng rng(seed);
    Eigen::MatrixXd x(n_blobs * per_blob, 2);
    for (int c = 0; c < n_blobs; ++c) {
        for (int i = 0; i < per_blob; ++i) {
            x(c * per_blob + i, 0) = spacing * c + rng.normal(0.0, 0.3);
            x(c * per_blob + i, 1) = rng.normal(0.0, 0.3);
        }
    }
    return x;
}

}  // namespace

TEST_SUITE("pso") {

TEST_CASE("sphere minimum") {
    PsoConfig config;
    config.bounds = {{-5, 5}, {-5, 5}, {-5, 5}};
    config.seed = 1;
    const auto m = pso_minimize(
        [](std::span<const double> p) {
            double s = 0;
            for (double v : p) s += (v - 1.0) * (v - 1.0);
            return s;
        },
        config);
    REQUIRE(m.position.size() == 3);
    for (double v : m.position) CHECK(v == doctest::Approx(1.0).epsilon(1e-3));
    CHECK(m.value < 1e-6);
    CHECK(m.evaluations == static_cast<std::size_t>(config.particles * (config.iterations + 1)));
}

TEST_CASE("positions stay inside the bounds") {
    PsoConfig config;
    config.particles = 10;
    config.iterations = 20;
    config.bounds = {{10, 50}};
    // The minimum sits outside the box; particles pile up on the edge.
    const auto m = pso_minimize([](std::span<const double> p) { return p[0]; }, config);
    for (const auto& p : m.evaluated) {
        CHECK(p[0] >= 10.0);
        CHECK(p[0] <= 50.0);
    }
    CHECK(m.position[0] == doctest::Approx(10.0));
}

TEST_CASE("config validation") {
    PsoConfig config;
    config.bounds = {{1, 1}};
    CHECK_THROWS_AS(config.validate(), Error);
    config.bounds = {{0, 1}};
    config.particles = 1;
    CHECK_THROWS_AS(config.validate(), Error);
}

TEST_CASE("search decodes k within bounds and finds the blobs") {
    const auto x = blobs(4, 40, 6.0, 2);
    SearchConfig config;
    config.pso.particles = 8;
    config.pso.iterations = 6;
    config.pso.bounds = {{2, 4}};
    config.pso.seed = 5;
    const auto report = pso_search(x, config);
    for (const auto& p : report.evaluated) {
        CHECK(p.k >= 2);
        CHECK(p.k <= 4);
    }
    CHECK(report.best.params.k == 4);
    CHECK_FALSE(report.below_gate);
    CHECK(report.distinct_evaluations <= 3);
}

TEST_CASE("search is deterministic") {
    const auto x = blobs(3, 30, 5.0, 4);
    SearchConfig config;
    config.pso.particles = 5;
    config.pso.iterations = 4;
    config.pso.bounds = {{2, 6}};
    config.pso.seed = 9;
    const auto a = pso_search(x, config), b = pso_search(x, config);
    CHECK(a.best.labels == b.best.labels);
    CHECK(a.best.params == b.best.params);
}

TEST_CASE("decoding DBSCAN parameters") {
    const double position[] = {0.5, 3.6};
    const auto p = decode_position(Algorithm::Dbscan, position, {{0.1, 1.0}, {2, 10}}, 100);
    CHECK(p.eps == 0.5);
    CHECK(p.min_samples == 4);
}

TEST_CASE("dominant cluster split") {
    // Two real clusters, but the first label lumps three blobs together.
    const auto x = blobs(4, 30, 8.0, 7);
    ClusteringResult lumped;
    for (int i = 0; i < 120; ++i) lumped.labels.push_back(i < 90 ? 0 : 1);
    finalize(lumped, x);
    lumped.params.k = 2;

    SearchConfig config;
    config.pso.particles = 6;
    config.pso.iterations = 4;
    config.pso.bounds = {{2, 5}};
    config.pso.seed = 1;

    SUBCASE("below the threshold nothing changes") {
        const auto r = split_dominant(x, lumped, 0.8, config);
        CHECK_FALSE(r.split_cluster.has_value());
        CHECK(r.result.labels == lumped.labels);
    }
    SUBCASE("above the threshold the largest cluster is re-clustered") {
        const auto r = split_dominant(x, lumped, 0.5, config);
        REQUIRE(r.split_cluster.has_value());
        CHECK(*r.split_cluster == 0);
        REQUIRE(r.sub_search.has_value());
        CHECK(r.result.n_clusters == 4);
        CHECK(r.result.params.k == 4);
        // The untouched cluster follows the sub-clusters.
        for (int i = 90; i < 120; ++i) CHECK(r.result.labels[static_cast<std::size_t>(i)] == 3);
        CHECK(r.result.silhouette > lumped.silhouette);
    }
}

}  // TEST_SUITE
