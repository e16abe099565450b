#pragma once

#include <array>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "zscore/features.hpp"

namespace zscore::label {

struct ClusterProfile {
    int cluster_id = 0;
    std::size_t size = 0;
    std::array<double, features::kFeatureCount> mean{};
    std::array<double, features::kFeatureCount> std{};
    std::array<double, features::kFeatureCount> min{};
    std::array<double, features::kFeatureCount> max{};
    double liquidation_rate = 0.0;  // share of members with at least one liquidation
    double median_borrow_count = 0.0;
    bool is_new_users = false;
    bool has_liquidations = false;
};

struct ScoreInterval {
    int cluster_id = 0;
    int lower = 0;
    int upper = 0;

    friend bool operator==(const ScoreInterval&, const ScoreInterval&) = default;
};

/// Caps and ranges applied when turning cluster profiles into intervals.
struct RulePolicy {
    int min_score = kMinScore;
    int max_score = kMaxScore;
    int max_width = 100;
    int liquidated_cap = 400;           // has_liquidations => upper <= cap
    int new_lower = 100;                // is_new_users => interval within [new_lower, new_upper]
    int new_upper = 250;
    int new_liquidated_limit = 150;     // new and liquidated => upper < limit
    int zero_interaction_score = 100;
    double new_user_borrow_threshold = 10.0;  // median Borrow count below this marks a new-user cluster
    double width_decay = 0.9;           // slot share ratio between successive ranks, riskiest first

    void validate() const;
};

RulePolicy policy_from_json(const nlohmann::json& doc);
RulePolicy load_policy(const std::string& path);  // .json or .toml
nlohmann::json to_json(const RulePolicy& policy);

/// Per-cluster statistics over unscaled features. Noise labels are ignored.
std::vector<ClusterProfile> profile_clusters(const std::vector<features::UserFeatureVector>& features,
                                             const std::vector<int>& labels, const RulePolicy& policy = {});

/// Checks the ScoreInterval invariants for one cluster; returns a violation
/// description or an empty string.
std::string interval_violation(const ScoreInterval& interval, const ClusterProfile& profile, const RulePolicy& policy);

/// Deterministic rank-then-slot assignment. Clusters are ranked riskiest first
/// by (liquidation rate desc, volatile exposure desc, mean gap desc, interaction
/// volume asc) and each rule category is slotted into its own disjoint band;
/// safer clusters receive narrower slots higher up.
std::vector<ScoreInterval> assign_intervals(const std::vector<ClusterProfile>& profiles, const RulePolicy& policy);

/// Risk ordering used by assign_intervals, riskiest first.
std::vector<int> risk_order(const std::vector<ClusterProfile>& profiles);

/// Manual override table (cluster_id, lower, upper); each row is validated
/// against the invariants of the cluster it replaces.
std::vector<ScoreInterval> read_overrides_csv(std::istream& in);
std::vector<ScoreInterval> apply_overrides(const std::vector<ScoreInterval>& intervals,
                                           const std::vector<ScoreInterval>& overrides,
                                           const std::vector<ClusterProfile>& profiles, const RulePolicy& policy);

struct LabeledRow {
    features::UserFeatureVector features;
    int cluster_id = 0;
    ScoreInterval interval;
    bool pinned = false;  // zero-interaction wallet, scored exactly at the policy's pin

    /// Interval the emitted score must fall in: the pin for pinned rows.
    ScoreInterval target(const RulePolicy& policy) const;
};

struct LabeledDataset {
    std::vector<LabeledRow> rows;
};

LabeledDataset label_users(const std::vector<features::UserFeatureVector>& features, const std::vector<int>& labels,
                           const std::vector<ScoreInterval>& intervals);

void write_intervals_csv(std::ostream& out, const std::vector<ScoreInterval>& intervals);
std::vector<ScoreInterval> read_intervals_csv(std::istream& in);

}  // namespace zscore::label
