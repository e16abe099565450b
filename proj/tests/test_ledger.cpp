#include <doctest.h>

#include <algorithm>
#include <sstream>

#include "zscore/ledger.hpp"
#include "zscore/rng.hpp"
#include "zscore/synth.hpp"

using namespace zscore;
using namespace zscore::ledger;

namespace {

TransactionEvent event(const std::string& wallet, Call call, double amount, const std::string& coin, std::int64_t ts,
                       std::uint64_t block = 1) {
    return TransactionEvent{"ethereum", block, wallet, call, amount, coin, ts};
}

ParseResult parse_text(const std::string& text, Format format = Format::Jsonl) {
    std::istringstream in(text);
    return parse_events(in, format);
}

}  // namespace

TEST_SUITE("ledger") {

TEST_CASE("well-formed JSONL row") {
    const auto r = parse_text(
        R"({"chain":"ethereum","block_id":10,"wallet":"0xa","call":"Borrow","amount":"100","coin":"DAI","timestamp":1700000000})"
        "\n");
    REQUIRE(r.events.size() == 1);
    CHECK(r.rejects.empty());
    CHECK(r.events[0].call == Call::Borrow);
    CHECK(r.events[0].amount == 100.0);
    CHECK(r.events[0].block_id == 10);
}

TEST_CASE("rejects carry row numbers and reasons") {
    const std::string text =
        R"({"chain":"ethereum","block_id":1,"wallet":"0xa","call":"FlashLoan","amount":"1","coin":"DAI","timestamp":5})" "\n"
        R"({"chain":"ethereum","block_id":2,"wallet":"0xa","call":"Repay","amount":"-3","coin":"DAI","timestamp":5})" "\n"
        R"({"chain":"ethereum","block_id":3,"wallet":"0xa","call":"Repay","coin":"DAI","timestamp":5})" "\n"
        "not json\n"
        R"({"chain":"ethereum","block_id":4,"wallet":"0xa","call":"Deposit","amount":"2","coin":"DAI","timestamp":6})" "\n";
    const auto r = parse_text(text);
    CHECK(r.events.size() == 1);
    REQUIRE(r.rejects.size() == 4);
    CHECK(r.rejects[0].row == 1);
    CHECK(r.rejects[0].reason == ErrorCode::UnknownCall);
    CHECK(r.rejects[1].reason == ErrorCode::NegativeAmount);
    CHECK(r.rejects[2].reason == ErrorCode::MissingField);
    CHECK(r.rejects[3].row == 4);
    CHECK(r.rejects[3].reason == ErrorCode::Malformed);
}

TEST_CASE("CSV needs a header with every column") {
    const auto r = parse_text("chain,block_id,wallet,call,amount,coin,timestamp\nethereum,1,0xa,Deposit,5,DAI,100\n",
                              Format::Csv);
    CHECK(r.events.size() == 1);
    std::istringstream bad("chain,wallet\nethereum,0xa\n");
    CHECK_THROWS_AS(parse_events(bad, Format::Csv), Error);
}

TEST_CASE("shuffled log comes back sorted by (timestamp, block_id)") {
    Rng rng(4);
    std::vector<TransactionEvent> events;
    for (int i = 0; i < 1000; ++i) {
        events.push_back(event("0x" + std::to_string(rng.index(40)), Call::Deposit, 1.0 + static_cast<double>(rng.index(100)),
                               "DAI", 1000 + static_cast<std::int64_t>(rng.index(50)), rng.index(30)));
    }
    rng.shuffle(events);
    std::ostringstream out;
    write_events(out, events, Format::Jsonl);
    const auto parsed = parse_text(out.str());
    REQUIRE(parsed.events.size() == 1000);
    auto expected = events;
    std::stable_sort(expected.begin(), expected.end(), [](const auto& a, const auto& b) {
        return std::pair(a.timestamp, a.block_id) < std::pair(b.timestamp, b.block_id);
    });
    CHECK(parsed.events == expected);
}

TEST_CASE("parse, serialize, parse round-trips byte for byte") {
    auto population = synth::generate([] {
        synth::PopulationSpec spec;
        spec.n_users = 50;
        return spec;
    }());
    for (auto format : {Format::Jsonl, Format::Csv}) {
        std::ostringstream first;
        write_events(first, population.events, format);
        std::istringstream in(first.str());
        const auto parsed = parse_events(in, format);
        CHECK(parsed.rejects.empty());
        std::ostringstream second;
        write_events(second, parsed.events, format);
        CHECK(first.str() == second.str());
    }
}

TEST_CASE("positions open and close with the debt") {
    SUBCASE("borrow then full repay") {
        const auto r = reconstruct_positions({event("w", Call::Borrow, 100, "DAI", 1), event("w", Call::Repay, 100, "DAI", 2)});
        REQUIRE(r.positions.size() == 1);
        CHECK(r.positions[0].status == PositionStatus::Closed);
        CHECK(r.positions[0].outstanding_debt == 0.0);
    }
    SUBCASE("partial repay") {
        const auto r = reconstruct_positions({event("w", Call::Borrow, 100, "DAI", 1), event("w", Call::Repay, 40, "DAI", 2)});
        REQUIRE(r.positions.size() == 1);
        CHECK(r.positions[0].status == PositionStatus::Open);
        CHECK(r.positions[0].outstanding_debt == doctest::Approx(60.0));
    }
    SUBCASE("repay with nothing owed") {
        const auto r = reconstruct_positions({event("w", Call::Repay, 50, "DAI", 1)});
        CHECK(r.positions.empty());
        REQUIRE(r.anomalies.size() == 1);
        CHECK(r.anomalies[0].excess == 50.0);
    }
    SUBCASE("borrow after close opens a new position") {
        const auto r = reconstruct_positions({event("w", Call::Borrow, 10, "DAI", 1), event("w", Call::Repay, 10, "DAI", 2),
                                              event("w", Call::Borrow, 5, "DAI", 3)});
        REQUIRE(r.positions.size() == 2);
        CHECK(r.positions[1].status == PositionStatus::Open);
        CHECK(r.positions[1].events.size() == 1);
    }
}

TEST_CASE("closed positions conserve borrowed and repaid amounts") {
    synth::PopulationSpec spec;
    spec.n_users = 200;
    const auto population = synth::generate(spec);
    const auto report = reconstruct_positions(population.events);
    std::size_t closed = 0, events_in_positions = 0;
    for (const auto& p : report.positions) {
        events_in_positions += p.events.size();
        CHECK(std::is_sorted(p.events.begin(), p.events.end(), event_order));
        CHECK((p.status == PositionStatus::Closed) == (p.outstanding_debt == 0.0));
        if (p.status != PositionStatus::Closed) continue;
        ++closed;
        double borrowed = 0, repaid = 0;
        for (const auto& e : p.events) (e.call == Call::Borrow ? borrowed : repaid) += e.amount;
        CHECK(borrowed == doctest::Approx(repaid).epsilon(1e-9));
    }
    const auto borrow_or_repay = std::count_if(population.events.begin(), population.events.end(), [](const auto& e) {
        return e.call == Call::Borrow || e.call == Call::Repay;
    });
    CHECK(closed > 0);
    CHECK(events_in_positions <= static_cast<std::size_t>(borrow_or_repay));
}

TEST_CASE("volatility table") {
    SUBCASE("average across chains") {
        const auto t = build_volatility_table({{"A", "ethereum", 0.4}, {"A", "polygon", 0.6}});
        CHECK(t.entries.at("A").avg_threshold == doctest::Approx(0.5));
    }
    SUBCASE("lower thresholds are non-volatile") {
        const auto t = build_volatility_table({{"A", "ethereum", 0.5}, {"B", "ethereum", 0.9}});
        CHECK(t.classify("A") == Volatility::NonVolatile);
        CHECK(t.classify("B") == Volatility::Volatile);
        const auto inverted = build_volatility_table({{"A", "ethereum", 0.5}, {"B", "ethereum", 0.9}}, true);
        CHECK(inverted.classify("A") == Volatility::Volatile);
    }
    SUBCASE("single coin sits at the median") {
        CHECK(build_volatility_table({{"A", "ethereum", 0.7}}).classify("A") == Volatility::NonVolatile);
    }
    SUBCASE("unknown coins are volatile") {
        CHECK(build_volatility_table({{"A", "ethereum", 0.7}}).classify("ZZZ") == Volatility::Volatile);
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(build_volatility_table({}), Error);
        try {
            build_volatility_table({{"A", "ethereum", 1.2}});
            FAIL("expected an error");
        } catch (const Error& e) {
            CHECK(e.code() == ErrorCode::ThresholdOutOfRange);
        }
    }
    SUBCASE("scaling every threshold keeps the classes") {
        const auto base = synth::default_thresholds();
        auto scaled = base;
        for (auto& e : scaled) e.threshold *= 0.5;
        const auto a = build_volatility_table(base), b = build_volatility_table(scaled);
        for (const auto& [coin, entry] : a.entries) CHECK(entry.klass == b.entries.at(coin).klass);
    }
}

TEST_CASE("threshold CSV") {
    std::istringstream in("coin,chain,threshold\nDAI,ethereum,0.75\nDAI,polygon,0.77\n");
    const auto entries = parse_thresholds_csv(in);
    REQUIRE(entries.size() == 2);
    CHECK(entries[1].chain == "polygon");
    CHECK(entries[1].threshold == 0.77);
}

TEST_CASE("health factor") {
    CHECK(health_factor(150, 0.8, 100).value() == doctest::Approx(1.2));
    const auto risky = health_factor(100, 0.5, 100);
    CHECK(risky.value() == doctest::Approx(0.5));
    CHECK(risky.at_risk());
    CHECK(health_factor(100, 0.8, 0).is_healthy_sentinel());
    CHECK(HealthFactor::healthy().capped(10.0) == 10.0);
    CHECK(HealthFactor::of(25.0).capped(10.0) == 10.0);
}

TEST_CASE("health snapshots follow the bookkeeping") {
    const auto table = build_volatility_table({{"DAI", "ethereum", 0.8}, {"WETH", "ethereum", 0.9}});
    const std::vector<TransactionEvent> events{
        event("w", Call::Deposit, 100, "DAI", 1),
        event("w", Call::UsageAsCollateral, 50, "WETH", 2),
        event("w", Call::Borrow, 100, "DAI", 3),
        event("w", Call::LiquidationCall, 60, "DAI", 4),
    };
    const auto snaps = health_snapshots(events, table);
    REQUIRE(snaps.size() == 4);
    CHECK(snaps[0].hf.is_healthy_sentinel());
    // 100 DAI at 0.8 plus 50 WETH at 0.9 against 100 borrowed.
    CHECK(snaps[2].weighted_avg_liquidation_threshold == doctest::Approx((80.0 + 45.0) / 150.0));
    CHECK(snaps[2].hf.value() == doctest::Approx(1.25));
    CHECK(snaps[3].total_collateral_value == doctest::Approx(90.0));
    CHECK(snaps[3].hf.value() == doctest::Approx((40 * 0.8 + 50 * 0.9) / 100.0));
    for (const auto& s : snaps) {
        if (!s.hf.is_healthy_sentinel() && s.hf.value() < 1.0) {
            CHECK(s.total_borrow_value > s.total_collateral_value * s.weighted_avg_liquidation_threshold);
        }
    }
}

TEST_CASE("cohort split") {
    std::vector<TransactionEvent> events{
        event("liq", Call::Borrow, 10, "DAI", 1), event("liq", Call::LiquidationCall, 5, "DAI", 2),
        event("ok", Call::Borrow, 10, "DAI", 1),
    };
    auto users = group_by_wallet(events, {}, {"dormant"});
    REQUIRE(users.size() == 3);
    WalletHistory backwards{"late", {event("late", Call::Deposit, 1, "DAI", 10), event("late", Call::Deposit, 1, "DAI", 5)}, {}};
    users.push_back(backwards);
    const auto split = split_cohorts(users);
    REQUIRE(split.liquidation.size() == 1);
    CHECK(split.liquidation[0].wallet == "liq");
    CHECK(split.non_liquidation.size() == 2);
    REQUIRE(split.dropped.size() == 1);
    CHECK(split.dropped[0].wallet == "late");
}

TEST_CASE("cohort sizes match the generator") {
    synth::PopulationSpec spec;
    spec.n_users = 3000;
    const auto population = synth::generate(spec);
    const auto positions = reconstruct_positions(population.events);
    const auto split = split_cohorts(group_by_wallet(population.events, positions.positions, population.roster));
    const auto liquidated = std::count_if(population.truth.begin(), population.truth.end(), [](const auto& t) { return t.liquidated; });
    CHECK(split.dropped.empty());
    CHECK(split.liquidation.size() == static_cast<std::size_t>(liquidated));
    CHECK(split.liquidation.size() == 99);  // round(0.033 * 3000)
    CHECK(split.non_liquidation.size() == 3000 - 99);
}

}  // TEST_SUITE
