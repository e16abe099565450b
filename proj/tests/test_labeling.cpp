#include <doctest.h>

#include <algorithm>
#include <map>
#include <sstream>

#include "zscore/labeling.hpp"
#include "zscore/rng.hpp"

using namespace zscore;
using namespace zscore::label;
using features::UserFeatureVector;
using ledger::Call;

namespace {

UserFeatureVector user(const std::string& wallet, std::uint32_t borrows, std::uint32_t liquidations, double gap = 1.0) {
    UserFeatureVector v;
    v.wallet = wallet;
    v.interaction_counts[static_cast<std::size_t>(Call::Borrow)] = borrows;
    v.interaction_counts[static_cast<std::size_t>(Call::LiquidationCall)] = liquidations;
    v.liquidation_count = liquidations;
    v.mean_inter_event_gap_days = gap;
    return v;
}

ClusterProfile profile(int id, bool is_new, bool liquidated, double rate = 0.0, double gap = 1.0) {
    ClusterProfile p;
    p.cluster_id = id;
    p.size = 10;
    p.is_new_users = is_new;
    p.has_liquidations = liquidated;
    p.liquidation_rate = liquidated ? (rate > 0 ? rate : 0.5) : 0.0;
    p.mean[features::column_index("mean_gap_days")] = gap;
    return p;
}

std::vector<ClusterProfile> random_profiles(Rng& rng, int n) {
    std::vector<ClusterProfile> out;
    for (int id = 0; id < n; ++id) {
        const auto kind = rng.index(4);
        out.push_back(profile(id, kind == 0 || kind == 1, kind == 0 || kind == 2, rng.uniform(0.01, 1.0), rng.uniform(0, 30)));
    }
    return out;
}

void check_assignment(const std::vector<ClusterProfile>& profiles, const std::vector<ScoreInterval>& intervals,
                      const RulePolicy& policy) {
    REQUIRE(intervals.size() == profiles.size());
    std::map<int, ClusterProfile> by_id;
    for (const auto& p : profiles) by_id[p.cluster_id] = p;
    for (const auto& iv : intervals) {
        REQUIRE(by_id.count(iv.cluster_id) == 1);
        CHECK(interval_violation(iv, by_id[iv.cluster_id], policy) == "");
    }
    auto sorted = intervals;
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.lower < b.lower; });
    for (std::size_t i = 1; i < sorted.size(); ++i) CHECK(sorted[i].lower > sorted[i - 1].upper);
}

}  // namespace

TEST_SUITE("labeling") {

TEST_CASE("profiles match a direct computation") {
    Rng rng(3);
    std::vector<UserFeatureVector> users;
    std::vector<int> labels;
    for (int i = 0; i < 200; ++i) {
        users.push_back(user("w" + std::to_string(i), static_cast<std::uint32_t>(rng.index(30)),
                             rng.uniform() < 0.1 ? 1u : 0u, rng.uniform(0, 20)));
        labels.push_back(static_cast<int>(rng.integer(-1, 4)));
    }
    const auto profiles = profile_clusters(users, labels);
    CHECK(profiles.size() == 5);
    for (const auto& p : profiles) {
        std::vector<double> borrows, gaps;
        int liquidated = 0;
        for (std::size_t i = 0; i < users.size(); ++i) {
            if (labels[i] != p.cluster_id) continue;
            borrows.push_back(users[i].count(Call::Borrow));
            gaps.push_back(users[i].mean_inter_event_gap_days);
            liquidated += users[i].liquidation_count > 0;
        }
        std::sort(borrows.begin(), borrows.end());
        const auto n = borrows.size();
        const double median = n % 2 ? borrows[n / 2] : (borrows[n / 2 - 1] + borrows[n / 2]) / 2;
        double mean_gap = 0;
        for (double g : gaps) mean_gap += g;
        mean_gap /= static_cast<double>(n);
        const auto g = features::column_index("mean_gap_days");
        CHECK(p.size == n);
        CHECK(p.median_borrow_count == median);
        CHECK(p.is_new_users == (median < 10));
        CHECK(p.liquidation_rate == doctest::Approx(static_cast<double>(liquidated) / static_cast<double>(n)));
        CHECK(p.has_liquidations == (liquidated > 0));
        CHECK(p.mean[g] == doctest::Approx(mean_gap));
        CHECK(p.min[g] == *std::min_element(gaps.begin(), gaps.end()));
        CHECK(p.max[g] == *std::max_element(gaps.begin(), gaps.end()));
    }
}

TEST_CASE("interval rules") {
    const RulePolicy policy;
    CHECK(interval_violation({0, 300, 400}, profile(0, false, true), policy) == "");
    CHECK(interval_violation({0, 350, 450}, profile(0, false, true), policy) != "");
    CHECK(interval_violation({0, 100, 250}, profile(0, true, false), policy) != "");  // too wide
    CHECK(interval_violation({0, 120, 180}, profile(0, true, false), policy) == "");
    CHECK(interval_violation({0, 90, 150}, profile(0, true, false), policy) != "");
    CHECK(interval_violation({0, 100, 149}, profile(0, true, true), policy) == "");
    CHECK(interval_violation({0, 100, 150}, profile(0, true, true), policy) != "");
    CHECK(interval_violation({0, 500, 500}, profile(0, false, false), policy) != "");
    CHECK(interval_violation({0, 850, 901}, profile(0, false, false), policy) != "");
}

TEST_CASE("assignment satisfies every rule") {
    const RulePolicy policy;
    Rng rng(12);
    for (int trial = 0; trial < 200; ++trial) {
        const auto profiles = random_profiles(rng, static_cast<int>(rng.integer(1, 40)));
        check_assignment(profiles, assign_intervals(profiles, policy), policy);
    }
}

TEST_CASE("assignment is deterministic and ordered by risk within a category") {
    const RulePolicy policy;
    std::vector<ClusterProfile> profiles;
    for (int id = 0; id < 6; ++id) profiles.push_back(profile(id, false, true, 0.1 * (id + 1)));
    const auto a = assign_intervals(profiles, policy);
    CHECK(assign_intervals(profiles, policy) == a);
    // Higher liquidation rate means riskier, so a lower interval.
    for (std::size_t i = 1; i < a.size(); ++i) CHECK(a[i].upper < a[i - 1].lower);
    CHECK(risk_order(profiles) == std::vector<int>{5, 4, 3, 2, 1, 0});
}

TEST_CASE("too many clusters for a band") {
    std::vector<ClusterProfile> profiles;
    for (int id = 0; id < 30; ++id) profiles.push_back(profile(id, true, true));
    CHECK_THROWS_AS(assign_intervals(profiles, RulePolicy{}), Error);
}

TEST_CASE("policy validation") {
    RulePolicy policy;
    policy.new_lower = 300;
    CHECK_THROWS_AS(policy.validate(), Error);
    CHECK_THROWS_AS(policy_from_json({{"width_decay", 0.0}}), Error);
    CHECK(policy_from_json(to_json(RulePolicy{})).max_width == 100);
}

TEST_CASE("labeling pins zero-interaction wallets") {
    const std::vector<UserFeatureVector> users{user("a", 0, 0), user("b", 3, 0)};
    const auto dataset = label_users(users, {0, 0}, {{0, 120, 180}});
    REQUIRE(dataset.rows.size() == 2);
    CHECK(dataset.rows[0].pinned);
    CHECK(dataset.rows[0].target(RulePolicy{}) == ScoreInterval{0, 100, 100});
    CHECK_FALSE(dataset.rows[1].pinned);
    CHECK(dataset.rows[1].target(RulePolicy{}) == ScoreInterval{0, 120, 180});
    for (const auto& row : dataset.rows) CHECK(row.features == users[&row - dataset.rows.data()]);
    CHECK_THROWS_AS(label_users(users, {0, 7}, {{0, 120, 180}}), Error);
}

TEST_CASE("overrides") {
    const RulePolicy policy;
    const std::vector<ClusterProfile> profiles{profile(0, false, true), profile(1, false, false)};
    const auto base = assign_intervals(profiles, policy);
    SUBCASE("a valid override replaces the interval") {
        const auto out = apply_overrides(base, {{1, 800, 850}}, profiles, policy);
        CHECK(out[1] == ScoreInterval{1, 800, 850});
        CHECK(out[0] == base[0]);
    }
    SUBCASE("a liquidated cluster cannot go above the cap") {
        CHECK_THROWS_AS(apply_overrides(base, {{0, 380, 420}}, profiles, policy), Error);
    }
    SUBCASE("unknown cluster") {
        CHECK_THROWS_AS(apply_overrides(base, {{9, 800, 850}}, profiles, policy), Error);
    }
    SUBCASE("overlap with a neighbour") {
        CHECK_THROWS_AS(apply_overrides(base, {{0, 300, 400}, {1, 350, 420}}, profiles, policy), Error);
    }
    SUBCASE("CSV form") {
        std::istringstream in("cluster_id,lower,upper\n1,700,780\n");
        CHECK(read_overrides_csv(in) == std::vector<ScoreInterval>{{1, 700, 780}});
    }
}

TEST_CASE("interval CSV round trip") {
    const std::vector<ScoreInterval> intervals{{0, 1, 50}, {3, 120, 180}};
    std::ostringstream out;
    write_intervals_csv(out, intervals);
    std::istringstream in(out.str());
    CHECK(read_intervals_csv(in) == intervals);
}

}  // TEST_SUITE
