#include <doctest.h>

#include <cmath>
#include <sstream>

#include "support/fixtures.hpp"
#include "support/oracles.hpp"
#include "zscore/common.hpp"
#include "zscore/quorum.hpp"

using namespace zscore;
using namespace zscore::quorum;
using attest::ScoreStore;
using attest::ZScoreRecord;

namespace {

std::vector<ZScoreRecord> make_records(std::size_t n) {
    std::vector<ZScoreRecord> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back({"w" + std::to_string(i), static_cast<int>(1 + i % 900), 0, 0});
    return out;
}

std::vector<ValidatorSpec> roster(std::size_t honest, std::size_t other = 0, Behavior behavior = Behavior::RejectAll,
                                  double sample = 0.1) {
    std::vector<ValidatorSpec> out;
    for (std::size_t i = 0; i < honest + other; ++i) {
        out.push_back({"v" + std::to_string(i), i < honest ? Behavior::Honest : behavior, sample, 100 + i});
    }
    return out;
}

}  // namespace

TEST_SUITE("quorum") {

TEST_CASE("threshold is the ceiling of two thirds") {
    for (std::size_t n = 1; n <= 30; ++n) {
        CHECK(quorum_threshold(n) == (2 * n + 2) / 3);
        CHECK(3 * quorum_threshold(n) >= 2 * n);
        CHECK(3 * (quorum_threshold(n) - 1) < 2 * n);
    }
}

TEST_CASE("publication follows the approval count") {
    ScoreStore store;
    store.put_scores(make_records(200), 1);
    SUBCASE("three honest") {
        ChainStub chain;
        const auto r = run_epoch(store, roster(3), chain, 1);
        CHECK(r.approvals == 3);
        CHECK(r.published);
        CHECK(chain.root_for(1) == store.root(1));
        for (const auto& v : r.votes) CHECK(v.sampled == 20);
    }
    SUBCASE("two of three") {
        ChainStub chain;
        const auto r = run_epoch(store, roster(2, 1), chain, 1);
        CHECK(r.approvals == 2);
        CHECK(r.published);
    }
    SUBCASE("one of three") {
        ChainStub chain;
        const auto r = run_epoch(store, roster(1, 2), chain, 1);
        CHECK(r.approvals == 1);
        CHECK_FALSE(r.published);
        CHECK(chain.size() == 0);
    }
    SUBCASE("three of four") {
        ChainStub chain;
        CHECK(run_epoch(store, roster(3, 1), chain, 1).published);
    }
    SUBCASE("silent validators count against the quorum") {
        ChainStub chain;
        const auto r = run_epoch(store, roster(1, 2, Behavior::Silent), chain, 1);
        CHECK(r.votes.size() == 1);
        CHECK(r.silent == std::vector<std::string>{"v1", "v2"});
        CHECK_FALSE(r.published);
    }
    SUBCASE("a corrupt root is slashable, not an approval") {
        ChainStub chain;
        const auto r = run_epoch(store, roster(2, 1, Behavior::CorruptRecompute), chain, 1);
        CHECK(r.approvals == 2);
        CHECK(r.slashable == std::vector<std::string>{"v2"});
        CHECK(r.published);
    }
    SUBCASE("parallel rounds give the same result") {
        ChainStub a, b;
        const auto serial = run_epoch(store, roster(5, 2), a, 1);
        const auto parallel = run_epoch(store, roster(5, 2), b, 1, {.parallel = true, .proposed_root = std::nullopt});
        CHECK(to_json(serial) == to_json(parallel));
    }
    SUBCASE("errors") {
        ChainStub chain;
        CHECK_THROWS_AS(run_epoch(store, {}, chain, 1), Error);
        auto dup = roster(2);
        dup[1].id = dup[0].id;
        CHECK_THROWS_AS(run_epoch(store, dup, chain, 1), Error);
        run_epoch(store, roster(3), chain, 1);
        CHECK_THROWS_AS(run_epoch(store, roster(3), chain, 1), Error);
    }
}

TEST_CASE("honest validators refuse a tampered epoch") {
    ScoreStore store;
    const auto records = make_records(100);
    store.put_scores(records, 1);
    for (std::size_t i = 0; i < records.size(); ++i) store.tamper(records[i].wallet, 1, records[i].zscore == 900 ? 899 : 900);
    ChainStub chain;
    const auto r = run_epoch(store, roster(4, 0, Behavior::RejectAll, 0.05), chain, 1);
    CHECK(r.approvals == 0);
    for (const auto& v : r.votes) CHECK(v.failed == v.sampled);
    CHECK_FALSE(r.published);
}

TEST_CASE("a wrong proposed root is never approved by honest validators") {
    ScoreStore store;
    store.put_scores(make_records(50), 1);
    ChainStub chain;
    auto bad = store.root(1);
    bad[3] ^= 0x80;
    const auto r = run_epoch(store, roster(3, 0, Behavior::RejectAll, 1.0), chain, 1, {.proposed_root = bad});
    CHECK(r.approvals == 0);
    CHECK_FALSE(r.published);
}

TEST_CASE("serving scores") {
    ScoreStore store;
    const auto records = make_records(30);
    store.put_scores(records, 1);
    ChainStub chain;
    CHECK_THROWS_AS(serve_score(store, chain, "w3", 1), Error);
    run_epoch(store, roster(3), chain, 1);
    const auto response = serve_score(store, chain, "w3", 1);
    CHECK(response.verified);
    CHECK(response.record.zscore == records[3].zscore);
    CHECK(response.root == store.root(1));
    CHECK_THROWS_AS(serve_score(store, chain, "nobody", 1), Error);

    store.tamper("w3", 1, records[3].zscore + 1);
    CHECK_FALSE(serve_score(store, chain, "w3", 1).verified);

    const auto line = handle_query(store, chain, R"({"wallet":"w4","epoch":1})");
    CHECK(nlohmann::json::parse(line).at("verified") == true);
    CHECK(nlohmann::json::parse(handle_query(store, chain, R"({"wallet":"w4","epoch":9})")).contains("error"));
    CHECK(nlohmann::json::parse(handle_query(store, chain, "{}")).contains("error"));
    CHECK(nlohmann::json::parse(handle_query(store, chain, "nonsense")).contains("error"));

    std::istringstream in(R"({"wallet":"w1","epoch":1})" "\n" R"({"wallet":"w2","epoch":1})" "\n");
    std::ostringstream out;
    serve_stdio(store, chain, in, out);
    std::istringstream lines(out.str());
    std::string l;
    int count = 0;
    while (std::getline(lines, l)) {
        ++count;
        CHECK(nlohmann::json::parse(l).at("verified") == true);
    }
    CHECK(count == 2);
}

TEST_CASE("chain stub") {
    ChainStub chain;
    const auto root = attest::sha256("root");
    const auto e = chain.publish(4, root);
    CHECK(e.epoch == 4);
    CHECK(chain.publish(5, root).timestamp == e.timestamp + 1);
    CHECK_THROWS_AS(chain.publish(4, root), Error);
    CHECK_FALSE(chain.root_for(6).has_value());

    testing::TempDir dir("chain");
    chain.save(dir / "chain.json");
    const auto loaded = ChainStub::load(dir / "chain.json");
    CHECK(loaded.size() == 2);
    CHECK(loaded.root_for(4) == root);
    CHECK(ChainStub::load(dir / "missing.json").size() == 0);
}

TEST_CASE("roster documents") {
    const auto specs = roster_from_json(nlohmann::json::parse(
        R"({"validators":[{"id":"a","behavior":"honest","sample_fraction":0.2,"seed":1},{"id":"b","behavior":"silent"}]})"));
    REQUIRE(specs.size() == 2);
    CHECK(specs[0].sample_fraction == 0.2);
    CHECK(specs[1].behavior == Behavior::Silent);
    CHECK_THROWS_AS(roster_from_json(nlohmann::json::parse(R"({"validators":[{"id":"a","behavior":"evil"}]})")), Error);
    CHECK_THROWS_AS((ValidatorSpec{"a", Behavior::Honest, 0.0, 0}.validate()), Error);
}

TEST_CASE("tamper detection edge cases") {
    SUBCASE("nothing tampered, nothing detected") {
        const auto r = detect_tamper(roster(7), 0.0, {.n_records = 500, .trials = 200, .seed = 1});
        CHECK(r.per_validator_detection == 0.0);
        CHECK(r.quorum_detection == 0.0);
        CHECK(r.blocked == 0.0);
    }
    SUBCASE("full samples catch any tampering") {
        const auto r = detect_tamper(roster(4, 0, Behavior::RejectAll, 1.0), 0.01, {.n_records = 500, .trials = 300, .seed = 2});
        CHECK(r.per_validator_detection_given_tamper == 1.0);
        CHECK(r.sample_size == 500);
    }
    SUBCASE("estimates track the analytic values") {
        const auto r = detect_tamper(roster(5, 0, Behavior::RejectAll, 0.05), 0.02, {.n_records = 400, .trials = 4000, .seed = 3});
        CHECK(r.sample_size == 20);
        CHECK(r.quorum == 4);
        CHECK(r.per_validator_analytic == doctest::Approx(1.0 - std::pow(0.98, 20)));
        CHECK(std::abs(r.per_validator_detection - r.per_validator_analytic) < 0.03);
        CHECK(std::abs(r.quorum_detection - r.quorum_detection_analytic) < 0.03);
        CHECK(r.any_detection >= r.quorum_detection);
    }
    SUBCASE("bad arguments") {
        CHECK_THROWS_AS(detect_tamper({}, 0.1), Error);
        CHECK_THROWS_AS(detect_tamper(roster(3), 1.0), Error);
    }
}

}  // TEST_SUITE
