#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "support/fixtures.hpp"
#include "zscore/features.hpp"
#include "zscore/rng.hpp"

using namespace zscore;
using namespace zscore::features;
using ledger::Call;

namespace {

const ledger::CoinVolatilityTable& table() {
    static const auto t = ledger::build_volatility_table({{"USDC", "ethereum", 0.7}, {"WETH", "ethereum", 0.9}});
    return t;
}

ledger::TransactionEvent event(Call call, const std::string& coin, std::int64_t ts) {
    return {"ethereum", 1, "w", call, 10.0, coin, ts};
}

constexpr std::int64_t kDay = 86400;

const std::vector<UserFeatureVector>& sample_vectors() {
    static const auto vectors = [] {
        synth::PopulationSpec spec;
        spec.n_users = 300;
        spec.seed = 11;
        return testing::population_features(synth::generate(spec));
    }();
    return vectors;
}

}  // namespace

TEST_SUITE("features") {

TEST_CASE("wallet with no events") {
    const auto v = extract_features({"w", {}, {}}, table());
    CHECK(v.zero_interaction());
    CHECK(v.account_age_days == 0.0);
    CHECK(v.active_days == 0.0);
    CHECK(v.min_health_factor_observed.is_healthy_sentinel());
    CHECK(v.numeric()[column_index("min_health_factor")] == kHealthFactorCap);
}

TEST_CASE("borrows only in volatile coins") {
    const auto v = extract_features({"w", {event(Call::Borrow, "WETH", kDay), event(Call::Borrow, "WETH", 2 * kDay)}, {}}, table());
    CHECK(v.volatile_borrow_fraction == 1.0);
    CHECK(v.volatile_deposit_fraction == 0.0);
}

TEST_CASE("evenly spaced events") {
    const auto v = extract_features(
        {"w", {event(Call::Deposit, "USDC", 0 + kDay), event(Call::Deposit, "USDC", 11 * kDay), event(Call::Deposit, "USDC", 21 * kDay)}, {}},
        table());
    CHECK(v.mean_inter_event_gap_days == doctest::Approx(10.0));
    CHECK(v.std_inter_event_gap_days == doctest::Approx(0.0));
    CHECK(v.account_age_days == doctest::Approx(20.0));
    CHECK(v.active_days == 3.0);
    CHECK(v.count(Call::Deposit) == 3);
}

TEST_CASE("input order does not matter") {
    std::vector<ledger::TransactionEvent> events{event(Call::Deposit, "USDC", 3 * kDay), event(Call::Borrow, "WETH", 5 * kDay),
                                                 event(Call::Repay, "WETH", 9 * kDay), event(Call::Deposit, "WETH", kDay)};
    const auto a = extract_features({"w", events, {}}, table());
    std::reverse(events.begin(), events.end());
    CHECK(extract_features({"w", events, {}}, table()) == a);
}

TEST_CASE("log1p columns") {
    std::vector<UserFeatureVector> vectors(3);
    vectors[0].interaction_counts[0] = 0;
    vectors[1].interaction_counts[0] = 9;
    vectors[2].interaction_counts[0] = 99;
    const auto params = fit_scaling(vectors);
    const auto scaled = apply_scaling(vectors, params);
    CHECK(scaled.rows(0, 0) == 0.0);
    CHECK(scaled.rows(1, 0) == doctest::Approx(std::log(10.0)));
    CHECK(scaled.rows(2, 0) == doctest::Approx(std::log(100.0)));
}

TEST_CASE("standardized columns") {
    std::vector<UserFeatureVector> vectors(4);
    const double ages[] = {1, 2, 3, 4};
    for (int i = 0; i < 4; ++i) vectors[static_cast<std::size_t>(i)].account_age_days = ages[i];
    const auto params = fit_scaling(vectors);
    const auto j = column_index("account_age_days");
    CHECK(params.columns[j].mean == doctest::Approx(2.5));
    CHECK(params.columns[j].std == doctest::Approx(std::sqrt(5.0 / 3.0)));
    const auto scaled = apply_scaling(vectors, params).rows;
    CHECK(scaled.col(static_cast<Eigen::Index>(j)).mean() == doctest::Approx(0.0));

    SUBCASE("zero variance column maps to zero") {
        CHECK(scaled.col(static_cast<Eigen::Index>(column_index("active_days"))).cwiseAbs().maxCoeff() == 0.0);
    }
    SUBCASE("a row at the training mean maps to zero") {
        UserFeatureVector mean_row;
        mean_row.account_age_days = 2.5;
        CHECK(apply_scaling({mean_row}, params).rows(0, static_cast<Eigen::Index>(j)) == doctest::Approx(0.0));
    }
}

TEST_CASE("fit needs two rows") {
    CHECK_THROWS_AS(fit_scaling({UserFeatureVector{}}), Error);
}

TEST_CASE("inverse scaling recovers the raw matrix") {
    const auto& vectors = sample_vectors();
    const auto params = fit_scaling(vectors);
    const Eigen::MatrixXd raw = raw_matrix(vectors);
    const Eigen::MatrixXd back = inverse_scaling(apply_scaling(raw, params), params);
    CHECK((back - raw).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("scaling is row-wise and permutation invariant") {
    auto vectors = sample_vectors();
    const auto params = fit_scaling(vectors);
    const auto scaled = apply_scaling(vectors, params);
    Rng rng(7);
    rng.shuffle(vectors);
    const auto permuted_params = fit_scaling(vectors);
    for (std::size_t j = 0; j < kFeatureCount; ++j) {
        CHECK(permuted_params.columns[j].mean == doctest::Approx(params.columns[j].mean).epsilon(1e-12));
        CHECK(permuted_params.columns[j].std == doctest::Approx(params.columns[j].std).epsilon(1e-12));
    }
    const auto permuted = apply_scaling(vectors, params);
    for (Eigen::Index i = 0; i < permuted.rows.rows(); ++i) {
        const auto k = std::find(scaled.wallets.begin(), scaled.wallets.end(), permuted.wallets[static_cast<std::size_t>(i)]) -
                       scaled.wallets.begin();
        CHECK(permuted.rows.row(i) == scaled.rows.row(k));
    }
}

TEST_CASE("fitting is deterministic and survives JSON") {
    const auto& vectors = sample_vectors();
    const auto params = fit_scaling(vectors);
    CHECK(fit_scaling(vectors) == params);
    const auto doc = to_json(params);
    CHECK(scaling_from_json(doc) == params);
}

TEST_CASE("schema mismatch") {
    auto params = fit_scaling(sample_vectors());
    params.schema_version = 2;
    CHECK_THROWS_AS(apply_scaling(raw_matrix(sample_vectors()), params), Error);
    CHECK_THROWS_AS(column_index("no_such_column"), Error);
}

TEST_CASE("feature CSV round trip") {
    const auto& vectors = sample_vectors();
    std::ostringstream out;
    write_features_csv(out, vectors);
    std::istringstream in(out.str());
    const auto back = read_features_csv(in);
    REQUIRE(back.size() == vectors.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].wallet == vectors[i].wallet);
        CHECK(back[i].numeric() == vectors[i].numeric());
    }
}

}  // TEST_SUITE
