#include "zscore/labeling.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <tuple>

#include "zscore/config_io.hpp"

namespace zscore::label {
namespace {

using features::kFeatureCount;

enum class Category { NewLiquidated, New, Liquidated, Clean };

Category category_of(const ClusterProfile& p) {
    if (p.is_new_users && p.has_liquidations) return Category::NewLiquidated;
    if (p.is_new_users) return Category::New;
    if (p.has_liquidations) return Category::Liquidated;
    return Category::Clean;
}

struct Segment {
    int lo = 0;
    int hi = 0;
    int size() const { return hi - lo + 1; }
};

double median(std::vector<double> values) {
    if (values.empty()) return 0.0;
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

// Removes [cut_lo, cut_hi] from every segment.
std::vector<Segment> subtract(const std::vector<Segment>& segments, int cut_lo, int cut_hi) {
    std::vector<Segment> out;
    for (const auto& s : segments) {
        if (cut_hi < s.lo || cut_lo > s.hi) {
            out.push_back(s);
            continue;
        }
        if (s.lo < cut_lo) out.push_back({s.lo, cut_lo - 1});
        if (s.hi > cut_hi) out.push_back({cut_hi + 1, s.hi});
    }
    return out;
}

// Slots `ids` (riskiest first) bottom-up into one segment. Every slot holds at
// least two points; the surplus is shared with geometrically decaying weights
// so safer clusters get narrower ranges. Intervals are top-aligned in the slot.
void slot_segment(const Segment& segment, const std::vector<int>& ids, const RulePolicy& policy,
                  std::vector<ScoreInterval>& out) {
    if (ids.empty()) return;
    const int m = static_cast<int>(ids.size());
    const int surplus = segment.size() - 2 * m;
    if (surplus < 0) {
        throw Error(ErrorCode::InfeasibleSlotting, std::to_string(m) + " clusters do not fit in [" +
                                                       std::to_string(segment.lo) + ", " + std::to_string(segment.hi) + "]");
    }
    std::vector<double> weights(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) weights[static_cast<std::size_t>(i)] = std::pow(policy.width_decay, i);
    const double total = std::accumulate(weights.begin(), weights.end(), 0.0);

    double cumulative = 0.0;
    int cursor = segment.lo;
    for (int i = 0; i < m; ++i) {
        cumulative += weights[static_cast<std::size_t>(i)];
        const int end_extra = static_cast<int>(std::lround(surplus * cumulative / total));
        const int slot_hi = segment.lo + 2 * (i + 1) + end_extra - 1;
        ScoreInterval interval;
        interval.cluster_id = ids[static_cast<std::size_t>(i)];
        interval.upper = slot_hi;
        interval.lower = std::max(cursor, slot_hi - policy.max_width);
        out.push_back(interval);
        cursor = slot_hi + 1;
    }
}

// Distributes ids over segments (lowest segment gets the riskiest) in
// proportion to segment size, respecting each segment's capacity.
void slot_band(const std::vector<Segment>& segments, const std::vector<int>& ids, const RulePolicy& policy,
               std::vector<ScoreInterval>& out) {
    if (ids.empty()) return;
    int total_size = 0;
    for (const auto& s : segments) total_size += s.size();
    std::vector<int> counts(segments.size(), 0);
    int assigned = 0;
    for (std::size_t s = 0; s < segments.size(); ++s) {
        const int capacity = segments[s].size() / 2;
        int want = s + 1 == segments.size()
                       ? static_cast<int>(ids.size()) - assigned
                       : static_cast<int>(std::lround(static_cast<double>(ids.size()) * segments[s].size() / total_size));
        want = std::clamp(want, 0, std::min(capacity, static_cast<int>(ids.size()) - assigned));
        counts[s] = want;
        assigned += want;
    }
    // Push any remainder into segments with spare capacity, highest first.
    for (std::size_t s = segments.size(); s-- > 0 && assigned < static_cast<int>(ids.size());) {
        const int spare = segments[s].size() / 2 - counts[s];
        const int take = std::min(spare, static_cast<int>(ids.size()) - assigned);
        counts[s] += take;
        assigned += take;
    }
    if (assigned < static_cast<int>(ids.size()) || segments.empty()) {
        throw Error(ErrorCode::InfeasibleSlotting, std::to_string(ids.size()) + " clusters exceed band capacity");
    }
    std::size_t cursor = 0;
    for (std::size_t s = 0; s < segments.size(); ++s) {
        std::vector<int> chunk(ids.begin() + static_cast<std::ptrdiff_t>(cursor),
                               ids.begin() + static_cast<std::ptrdiff_t>(cursor + static_cast<std::size_t>(counts[s])));
        slot_segment(segments[s], chunk, policy, out);
        cursor += static_cast<std::size_t>(counts[s]);
    }
}

int get_int(const nlohmann::json& doc, const char* key, int fallback) {
    return doc.contains(key) ? doc.at(key).get<int>() : fallback;
}

double get_double(const nlohmann::json& doc, const char* key, double fallback) {
    return doc.contains(key) ? doc.at(key).get<double>() : fallback;
}

}  // namespace

void RulePolicy::validate() const {
    auto fail = [](const std::string& what) { throw Error(ErrorCode::InvalidArgument, "rule policy: " + what); };
    if (!(min_score >= kMinScore && min_score < max_score && max_score <= kMaxScore)) fail("score range");
    if (max_width < 1) fail("max_width must be >= 1");
    if (!(new_lower >= min_score && new_lower < new_upper && new_upper <= max_score)) fail("new-user range");
    if (!(new_liquidated_limit > new_lower + 1)) fail("new_liquidated_limit must exceed new_lower + 1");
    if (liquidated_cap <= min_score) fail("liquidated_cap");
    if (!(width_decay > 0.0 && width_decay <= 1.0)) fail("width_decay must be in (0, 1]");
}

RulePolicy policy_from_json(const nlohmann::json& doc) {
    RulePolicy p;
    p.min_score = get_int(doc, "min_score", p.min_score);
    p.max_score = get_int(doc, "max_score", p.max_score);
    p.max_width = get_int(doc, "max_width", p.max_width);
    p.liquidated_cap = get_int(doc, "liquidated_cap", p.liquidated_cap);
    p.new_lower = get_int(doc, "new_lower", p.new_lower);
    p.new_upper = get_int(doc, "new_upper", p.new_upper);
    p.new_liquidated_limit = get_int(doc, "new_liquidated_limit", p.new_liquidated_limit);
    p.zero_interaction_score = get_int(doc, "zero_interaction_score", p.zero_interaction_score);
    p.new_user_borrow_threshold = get_double(doc, "new_user_borrow_threshold", p.new_user_borrow_threshold);
    p.width_decay = get_double(doc, "width_decay", p.width_decay);
    p.validate();
    return p;
}

RulePolicy load_policy(const std::string& path) { return policy_from_json(load_config_document(path)); }

nlohmann::json to_json(const RulePolicy& p) {
    return {
        {"min_score", p.min_score},
        {"max_score", p.max_score},
        {"max_width", p.max_width},
        {"liquidated_cap", p.liquidated_cap},
        {"new_lower", p.new_lower},
        {"new_upper", p.new_upper},
        {"new_liquidated_limit", p.new_liquidated_limit},
        {"zero_interaction_score", p.zero_interaction_score},
        {"new_user_borrow_threshold", p.new_user_borrow_threshold},
        {"width_decay", p.width_decay},
    };
}

std::vector<ClusterProfile> profile_clusters(const std::vector<features::UserFeatureVector>& features,
                                             const std::vector<int>& labels, const RulePolicy& policy) {
    if (features.size() != labels.size()) throw Error(ErrorCode::InvalidArgument, "features/labels size mismatch");
    std::map<int, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= 0) members[labels[i]].push_back(i);
    }

    std::vector<ClusterProfile> profiles;
    for (const auto& [id, rows] : members) {
        ClusterProfile p;
        p.cluster_id = id;
        p.size = rows.size();
        p.min.fill(std::numeric_limits<double>::infinity());
        p.max.fill(-std::numeric_limits<double>::infinity());
        std::vector<double> borrows;
        std::size_t liquidated = 0;
        for (auto i : rows) {
            const auto values = features[i].numeric();
            for (std::size_t j = 0; j < kFeatureCount; ++j) {
                p.mean[j] += values[j];
                p.min[j] = std::min(p.min[j], values[j]);
                p.max[j] = std::max(p.max[j], values[j]);
            }
            borrows.push_back(static_cast<double>(features[i].count(ledger::Call::Borrow)));
            if (features[i].liquidation_count > 0) ++liquidated;
        }
        const auto n = static_cast<double>(rows.size());
        for (std::size_t j = 0; j < kFeatureCount; ++j) {
            p.mean[j] /= n;
            // Rounding can push the mean a hair outside [min, max] for constant columns.
            p.mean[j] = std::clamp(p.mean[j], p.min[j], p.max[j]);
            double var = 0.0;
            for (auto i : rows) {
                const double d = features[i].numeric()[j] - p.mean[j];
                var += d * d;
            }
            p.std[j] = std::sqrt(var / n);
        }
        p.liquidation_rate = static_cast<double>(liquidated) / n;
        p.has_liquidations = liquidated > 0;
        p.median_borrow_count = median(borrows);
        p.is_new_users = p.median_borrow_count < policy.new_user_borrow_threshold;
        profiles.push_back(p);
    }
    return profiles;
}

std::string interval_violation(const ScoreInterval& interval, const ClusterProfile& profile, const RulePolicy& policy) {
    std::ostringstream why;
    const auto [id, lo, hi] = std::tuple(interval.cluster_id, interval.lower, interval.upper);
    if (!(policy.min_score <= lo && lo < hi && hi <= policy.max_score)) {
        why << "cluster " << id << ": [" << lo << ", " << hi << "] not a proper range in [" << policy.min_score << ", "
            << policy.max_score << "]";
    } else if (hi - lo > policy.max_width) {
        why << "cluster " << id << ": width " << hi - lo << " exceeds " << policy.max_width;
    } else if (profile.has_liquidations && hi > policy.liquidated_cap) {
        why << "cluster " << id << ": liquidated cluster above cap " << policy.liquidated_cap;
    } else if (profile.is_new_users && (lo < policy.new_lower || hi > policy.new_upper)) {
        why << "cluster " << id << ": new-user cluster outside [" << policy.new_lower << ", " << policy.new_upper << "]";
    } else if (profile.is_new_users && profile.has_liquidations && hi >= policy.new_liquidated_limit) {
        why << "cluster " << id << ": new liquidated cluster must stay below " << policy.new_liquidated_limit;
    }
    return why.str();
}

std::vector<int> risk_order(const std::vector<ClusterProfile>& profiles) {
    using features::column_index;
    static const std::size_t vol_b = column_index("volatile_borrow_fraction");
    static const std::size_t vol_d = column_index("volatile_deposit_fraction");
    static const std::size_t gap = column_index("mean_gap_days");

    std::vector<std::size_t> order(profiles.size());
    std::iota(order.begin(), order.end(), 0);
    auto key = [&](std::size_t i) {
        const auto& p = profiles[i];
        double volume = 0.0;
        for (std::size_t c = 0; c < ledger::kCallCount; ++c) volume += p.mean[c];
        // Negated so ascending tuple order puts the riskiest first.
        return std::tuple(-p.liquidation_rate, -(p.mean[vol_b] + p.mean[vol_d]), -p.mean[gap], volume, p.cluster_id);
    };
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key(a) < key(b); });
    std::vector<int> ids;
    for (auto i : order) ids.push_back(profiles[i].cluster_id);
    return ids;
}

std::vector<ScoreInterval> assign_intervals(const std::vector<ClusterProfile>& profiles, const RulePolicy& policy) {
    policy.validate();
    if (profiles.empty()) throw Error(ErrorCode::InvalidArgument, "no cluster profiles");

    std::map<int, Category> categories;
    for (const auto& p : profiles) categories[p.cluster_id] = category_of(p);
    std::map<Category, std::vector<int>> ranked;
    for (int id : risk_order(profiles)) ranked[categories[id]].push_back(id);
    auto present = [&](Category c) { return ranked.contains(c); };

    const bool any_new = present(Category::New) || present(Category::NewLiquidated);
    std::vector<Segment> full{{policy.min_score, policy.max_score}};
    std::vector<ScoreInterval> out;

    slot_band({{policy.new_lower, policy.new_liquidated_limit - 1}}, ranked[Category::NewLiquidated], policy, out);
    const int new_lo = present(Category::NewLiquidated) ? policy.new_liquidated_limit : policy.new_lower;
    slot_band({{new_lo, policy.new_upper}}, ranked[Category::New], policy, out);

    auto liq_band = subtract({{policy.min_score, policy.liquidated_cap}}, any_new ? policy.new_lower : 1,
                             any_new ? policy.new_upper : 0);
    slot_band(liq_band, ranked[Category::Liquidated], policy, out);

    int clean_lo = any_new ? policy.new_upper + 1 : policy.min_score;
    if (present(Category::Liquidated)) clean_lo = std::max(clean_lo, policy.liquidated_cap + 1);
    slot_band({{clean_lo, policy.max_score}}, ranked[Category::Clean], policy, out);

    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.cluster_id < b.cluster_id; });
    return out;
}

std::vector<ScoreInterval> read_overrides_csv(std::istream& in) { return read_intervals_csv(in); }

std::vector<ScoreInterval> apply_overrides(const std::vector<ScoreInterval>& intervals,
                                           const std::vector<ScoreInterval>& overrides,
                                           const std::vector<ClusterProfile>& profiles, const RulePolicy& policy) {
    std::map<int, ClusterProfile> by_id;
    for (const auto& p : profiles) by_id[p.cluster_id] = p;
    std::map<int, ScoreInterval> merged;
    for (const auto& i : intervals) merged[i.cluster_id] = i;
    for (const auto& o : overrides) {
        auto it = by_id.find(o.cluster_id);
        if (it == by_id.end()) {
            throw Error(ErrorCode::UnknownCluster, "override for unknown cluster " + std::to_string(o.cluster_id));
        }
        if (auto why = interval_violation(o, it->second, policy); !why.empty()) {
            throw Error(ErrorCode::InvalidInterval, "override rejected: " + why);
        }
        merged[o.cluster_id] = o;
    }
    std::vector<ScoreInterval> out;
    for (const auto& [id, i] : merged) out.push_back(i);
    auto by_lower = out;
    std::sort(by_lower.begin(), by_lower.end(), [](const auto& a, const auto& b) { return a.lower < b.lower; });
    for (std::size_t i = 1; i < by_lower.size(); ++i) {
        if (by_lower[i].lower <= by_lower[i - 1].upper) {
            throw Error(ErrorCode::InvalidInterval, "intervals of clusters " + std::to_string(by_lower[i - 1].cluster_id) +
                                                        " and " + std::to_string(by_lower[i].cluster_id) + " overlap");
        }
    }
    return out;
}

ScoreInterval LabeledRow::target(const RulePolicy& policy) const {
    if (!pinned) return interval;
    return ScoreInterval{cluster_id, policy.zero_interaction_score, policy.zero_interaction_score};
}

LabeledDataset label_users(const std::vector<features::UserFeatureVector>& features, const std::vector<int>& labels,
                           const std::vector<ScoreInterval>& intervals) {
    if (features.size() != labels.size()) throw Error(ErrorCode::InvalidArgument, "features/labels size mismatch");
    std::map<int, ScoreInterval> by_id;
    for (const auto& i : intervals) by_id[i.cluster_id] = i;

    LabeledDataset dataset;
    dataset.rows.reserve(features.size());
    for (std::size_t i = 0; i < features.size(); ++i) {
        auto it = by_id.find(labels[i]);
        if (it == by_id.end()) {
            throw Error(ErrorCode::MissingInterval,
                        "no interval for cluster " + std::to_string(labels[i]) + " (wallet " + features[i].wallet + ")");
        }
        dataset.rows.push_back(LabeledRow{features[i], labels[i], it->second, features[i].zero_interaction()});
    }
    return dataset;
}

void write_intervals_csv(std::ostream& out, const std::vector<ScoreInterval>& intervals) {
    out << "cluster_id,lower,upper\n";
    for (const auto& i : intervals) out << i.cluster_id << ',' << i.lower << ',' << i.upper << '\n';
}

std::vector<ScoreInterval> read_intervals_csv(std::istream& in) {
    std::vector<ScoreInterval> out;
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (header) {
            header = false;
            if (line.rfind("cluster_id", 0) == 0) continue;
        }
        std::stringstream ss(line);
        std::string a, b, c;
        if (!std::getline(ss, a, ',') || !std::getline(ss, b, ',') || !std::getline(ss, c)) {
            throw Error(ErrorCode::Malformed, "interval row '" + line + "'");
        }
        out.push_back(ScoreInterval{static_cast<int>(parse_i64(a)), static_cast<int>(parse_i64(b)),
                                    static_cast<int>(parse_i64(c))});
    }
    return out;
}

}  // namespace zscore::label
