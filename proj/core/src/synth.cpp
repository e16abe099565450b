#include "zscore/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "zscore/common.hpp"
#include "zscore/config_io.hpp"
#include "zscore/rng.hpp"

namespace zscore::synth {
namespace {

using ledger::Call;
using ledger::TransactionEvent;

const std::vector<std::string> kStableCoins{"USDC", "DAI", "USDT"};
const std::vector<std::string> kVolatileCoins{"WBTC", "WETH", "LINK"};
constexpr const char* kLiquidationProne = "liquidation-prone";
constexpr const char* kNewLiquidated = "new-liquidated";

double cents(double x) { return std::round(x * 100.0) / 100.0; }

// Triangular on [lo, hi] so per-wallet spread is unimodal.
double triangular(Rng& rng, double lo, double hi) { return lo + (hi - lo) * 0.5 * (rng.uniform() + rng.uniform()); }

int draw(Rng& rng, const std::array<int, 2>& range) {
    return static_cast<int>(std::lround(triangular(rng, range[0], range[1])));
}

// Splits `total` by weights with largest-remainder rounding; ties go to the earlier key.
std::map<std::string, std::size_t> apportion(std::size_t total, const std::vector<std::pair<std::string, double>>& weights) {
    std::map<std::string, std::size_t> out;
    double sum = 0.0;
    for (const auto& [_, w] : weights) sum += w;
    if (weights.empty() || sum <= 0.0) {
        if (total > 0) throw Error(ErrorCode::InvalidArgument, "population mix has no weight for a non-empty group");
        return out;
    }
    std::size_t assigned = 0;
    std::vector<std::pair<double, std::size_t>> remainders;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const double exact = static_cast<double>(total) * weights[i].second / sum;
        const auto base = static_cast<std::size_t>(std::floor(exact));
        out[weights[i].first] = base;
        assigned += base;
        remainders.emplace_back(exact - static_cast<double>(base), i);
    }
    std::stable_sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t r = 0; assigned < total; ++r, ++assigned) ++out[weights[remainders[r].second].first];
    return out;
}

std::string wallet_id(std::uint64_t seed, std::size_t index) {
    Rng rng(derive_seed(seed, 0x3A11E7ULL + index));
    char buffer[48];
    std::snprintf(buffer, sizeof buffer, "0x%016llx%016llx%08llx", static_cast<unsigned long long>(rng.next()),
                  static_cast<unsigned long long>(rng.next()), static_cast<unsigned long long>(rng.next() >> 32));
    return buffer;
}

// round(fraction * n) flags, evenly spread so the layout does not vary per wallet.
std::vector<char> spread_flags(int n, double fraction) {
    std::vector<char> flags(static_cast<std::size_t>(n), 0);
    for (int i = 0; i < n; ++i) {
        flags[static_cast<std::size_t>(i)] = std::floor((i + 1) * fraction + 0.5) > std::floor(i * fraction + 0.5);
    }
    return flags;
}

// Round-robin over a coin list from a random starting point.
class CoinCycle {
public:
    CoinCycle(const std::vector<std::string>& coins, Rng& rng) : coins_(coins), next_(rng.index(coins.size())) {}
    const std::string& next() { return coins_[next_++ % coins_.size()]; }

private:
    const std::vector<std::string>& coins_;
    std::size_t next_;
};

// Flags with exactly round(fraction * n) set, in random order.
std::vector<char> exact_flags(int n, double fraction, Rng& rng) {
    const auto set = static_cast<int>(std::lround(fraction * n));
    std::vector<char> flags(static_cast<std::size_t>(n), 0);
    for (int i = 0; i < set && i < n; ++i) flags[static_cast<std::size_t>(i)] = 1;
    rng.shuffle(flags);
    return flags;
}

std::vector<TransactionEvent> wallet_events(const Archetype& a, const std::string& wallet, Rng& rng,
                                            std::int64_t genesis, const ledger::CoinVolatilityTable& table) {
    const int n_borrow = draw(rng, a.borrows);
    const int n_repay = std::min(n_borrow, static_cast<int>(std::lround(n_borrow * a.repay_ratio)));
    const int n_deposit = draw(rng, a.deposits);
    const int n_toggle = draw(rng, a.toggles);
    const int n_liq = draw(rng, a.liquidations);

    struct Step {
        Call call;
        std::string coin;
        double amount;
    };
    std::vector<Step> steps;

    double collateral = 0.0;
    double weighted = 0.0;
    CoinCycle stable(kStableCoins, rng), volatile_(kVolatileCoins, rng);
    const auto dep_flags = spread_flags(n_deposit, a.volatile_deposit_fraction);
    for (int i = 0; i < n_deposit; ++i) {
        const auto& coin = dep_flags[static_cast<std::size_t>(i)] ? volatile_.next() : stable.next();
        const double amount = cents(1000.0 * rng.uniform(0.8, 1.2));
        steps.push_back({Call::Deposit, coin, amount});
        collateral += amount;
        weighted += amount * table.threshold(coin).value_or(0.0);
    }
    for (int i = 0; i < n_toggle; ++i) {
        const std::string coin = steps.empty() ? kStableCoins.front() : steps.front().coin;
        const double amount = cents(100.0 * rng.uniform(0.8, 1.2));
        steps.push_back({Call::UsageAsCollateral, coin, amount});
        collateral += amount;
        weighted += amount * table.threshold(coin).value_or(0.0);
    }

    // Repaid borrow/repay cycles first, then the borrows left open. Peak debt is
    // max(1, open borrows) units, sized to hit the archetype's health factor.
    const double lt = collateral > 0.0 ? weighted / collateral : 0.0;
    const int open = std::max(1, n_borrow - n_repay);
    const double target = a.target_min_hf * triangular(rng, 1.0 - a.hf_jitter, 1.0 + a.hf_jitter);
    const double unit = std::max(0.01, cents(collateral * lt / (target * open)));
    const auto borrow_flags = spread_flags(n_borrow, a.volatile_borrow_fraction);
    for (int i = 0; i < n_borrow; ++i) {
        const auto& coin = borrow_flags[static_cast<std::size_t>(i)] ? volatile_.next() : stable.next();
        steps.push_back({Call::Borrow, coin, unit});
        if (i < n_repay) steps.push_back({Call::Repay, coin, unit});
    }
    double held = collateral;
    for (int i = 0; i < n_liq; ++i) {
        const double seized = cents(held * a.liquidation_seize);
        steps.push_back({Call::LiquidationCall, steps.front().coin, seized});
        held -= seized;
    }

    std::vector<TransactionEvent> events;
    double t = static_cast<double>(genesis) + (a.start_offset_days + rng.uniform(0.0, 30.0)) * kSecondsPerDay;
    const double tempo = triangular(rng, 1.0 - a.tempo_jitter, 1.0 + a.tempo_jitter);
    const auto stretched_gaps = exact_flags(static_cast<int>(steps.size()) - 1, a.long_gap_share, rng);
    for (std::size_t i = 0; i < steps.size(); ++i) {
        if (i > 0) {
            const bool stretched = stretched_gaps[i - 1] != 0;
            const double days = tempo * (stretched ? a.long_gap_days : a.gap_days) * rng.uniform(1.0 - a.gap_jitter, 1.0 + a.gap_jitter);
            t += std::max(1.0, std::round(days * kSecondsPerDay));
        }
        TransactionEvent e;
        e.chain = "ethereum";
        e.timestamp = static_cast<std::int64_t>(t);
        e.block_id = 15'000'000ULL + static_cast<std::uint64_t>((e.timestamp - genesis) / 12);
        e.wallet = wallet;
        e.call = steps[i].call;
        e.amount = steps[i].amount;
        e.coin = steps[i].coin;
        events.push_back(std::move(e));
    }
    return events;
}

template <typename T>
void set_if(const nlohmann::json& doc, const char* key, T& field) {
    if (doc.contains(key)) field = doc.at(key).get<T>();
}

void apply_overrides(Archetype& a, const nlohmann::json& doc) {
    set_if(doc, "borrows", a.borrows);
    set_if(doc, "repay_ratio", a.repay_ratio);
    set_if(doc, "deposits", a.deposits);
    set_if(doc, "toggles", a.toggles);
    set_if(doc, "liquidations", a.liquidations);
    set_if(doc, "gap_days", a.gap_days);
    set_if(doc, "gap_jitter", a.gap_jitter);
    set_if(doc, "tempo_jitter", a.tempo_jitter);
    set_if(doc, "long_gap_share", a.long_gap_share);
    set_if(doc, "long_gap_days", a.long_gap_days);
    set_if(doc, "volatile_borrow_fraction", a.volatile_borrow_fraction);
    set_if(doc, "volatile_deposit_fraction", a.volatile_deposit_fraction);
    set_if(doc, "target_min_hf", a.target_min_hf);
    set_if(doc, "hf_jitter", a.hf_jitter);
    set_if(doc, "liquidation_seize", a.liquidation_seize);
    set_if(doc, "is_new", a.is_new);
    set_if(doc, "start_offset_days", a.start_offset_days);
}

void check_archetype(const Archetype& a) {
    auto fail = [&](const std::string& what) { throw Error(ErrorCode::InvalidArgument, "archetype " + a.name + ": " + what); };
    for (const auto* r : {&a.borrows, &a.deposits, &a.toggles, &a.liquidations}) {
        if ((*r)[0] < 0 || (*r)[0] > (*r)[1]) fail("count ranges must satisfy 0 <= lo <= hi");
    }
    if (a.borrows[0] < 1 || a.deposits[0] < 1) fail("needs at least one borrow and one deposit");
    if (a.repay_ratio < 0.0 || a.repay_ratio > 1.0) fail("repay_ratio must be in [0, 1]");
    if (!(a.gap_days > 0.0) || a.gap_jitter < 0.0 || a.gap_jitter >= 1.0 || a.tempo_jitter < 0.0 || a.tempo_jitter >= 1.0) {
        fail("gap parameters out of range");
    }
    if (a.hf_jitter < 0.0 || a.hf_jitter >= 1.0) fail("hf_jitter must be in [0, 1)");
    if (a.long_gap_share < 0.0 || a.long_gap_share > 1.0) fail("long_gap_share must be in [0, 1]");
    if (a.volatile_borrow_fraction < 0.0 || a.volatile_borrow_fraction > 1.0 || a.volatile_deposit_fraction < 0.0 ||
        a.volatile_deposit_fraction > 1.0) {
        fail("volatile fractions must be in [0, 1]");
    }
    if (!(a.target_min_hf > 0.0)) fail("target_min_hf must be > 0");
    if (!(a.liquidation_seize > 0.0 && a.liquidation_seize < 1.0)) fail("liquidation_seize must be in (0, 1)");
}

}  // namespace

std::map<std::string, Archetype> default_archetypes() {
    std::map<std::string, Archetype> out;
    auto add = [&](Archetype a) { out[a.name] = std::move(a); };

    Archetype whale;
    whale.name = "disciplined-whale";
    whale.borrows = {28, 36};
    whale.repay_ratio = 1.0;
    whale.deposits = {11, 15};
    whale.toggles = {1, 4};
    whale.gap_days = 4.0;
    whale.volatile_borrow_fraction = 0.1;
    whale.volatile_deposit_fraction = 0.2;
    whale.target_min_hf = 3.0;
    whale.tempo_jitter = 0.25;
    whale.hf_jitter = 0.15;
    add(whale);

    Archetype degen;
    degen.name = "sporadic-degen";
    degen.borrows = {10, 22};
    degen.repay_ratio = 0.5;
    degen.deposits = {3, 6};
    degen.gap_days = 1.0;
    degen.long_gap_share = 0.5;
    degen.long_gap_days = 12.0;
    degen.volatile_borrow_fraction = 0.9;
    degen.volatile_deposit_fraction = 0.8;
    degen.target_min_hf = 1.3;
    degen.tempo_jitter = 0.25;
    degen.hf_jitter = 0.35;
    add(degen);

    Archetype cautious;
    cautious.name = "new-cautious";
    cautious.borrows = {1, 4};
    cautious.repay_ratio = 0.8;
    cautious.deposits = {1, 4};
    cautious.toggles = {0, 2};
    cautious.gap_days = 1.0;
    cautious.target_min_hf = 5.0;
    cautious.tempo_jitter = 0.4;
    cautious.hf_jitter = 0.3;
    cautious.is_new = true;
    cautious.start_offset_days = 330.0;
    add(cautious);

    Archetype reckless;
    reckless.name = "new-reckless";
    reckless.borrows = {2, 7};
    reckless.repay_ratio = 0.3;
    reckless.deposits = {1, 2};
    reckless.gap_days = 0.5;
    reckless.volatile_borrow_fraction = 0.85;
    reckless.volatile_deposit_fraction = 0.8;
    reckless.target_min_hf = 1.1;
    reckless.tempo_jitter = 0.4;
    reckless.hf_jitter = 0.15;
    reckless.is_new = true;
    reckless.start_offset_days = 340.0;
    add(reckless);

    Archetype liquidated;
    liquidated.name = kLiquidationProne;
    liquidated.borrows = {17, 23};
    liquidated.repay_ratio = 0.3;
    liquidated.deposits = {3, 7};
    liquidated.toggles = {1, 1};
    liquidated.liquidations = {1, 1};
    liquidated.gap_days = 6.0;
    liquidated.volatile_borrow_fraction = 0.7;
    liquidated.volatile_deposit_fraction = 0.7;
    liquidated.target_min_hf = 0.9;
    liquidated.tempo_jitter = 0.3;
    liquidated.hf_jitter = 0.15;
    add(liquidated);

    Archetype fresh = liquidated;
    fresh.name = kNewLiquidated;
    fresh.borrows = {3, 8};
    fresh.deposits = {1, 2};
    fresh.toggles = {0, 0};
    fresh.liquidations = {1, 1};
    fresh.gap_days = 0.7;
    fresh.tempo_jitter = 0.4;
    fresh.is_new = true;
    fresh.start_offset_days = 335.0;
    add(fresh);
    return out;
}

std::vector<ledger::ThresholdEntry> default_thresholds() {
    return {
        {"USDC", "ethereum", 0.70}, {"USDC", "polygon", 0.72}, {"DAI", "ethereum", 0.74},
        {"USDT", "ethereum", 0.75}, {"WBTC", "ethereum", 0.80}, {"WETH", "ethereum", 0.82},
        {"WETH", "polygon", 0.84},  {"LINK", "ethereum", 0.86},
    };
}

void PopulationSpec::validate() const {
    auto fail = [](const std::string& what) { throw Error(ErrorCode::InvalidArgument, "population spec: " + what); };
    if (n_users < 1) fail("n_users must be >= 1");
    for (double f : {liquidated_fraction, new_user_fraction, dormant_fraction, new_liquidated_share}) {
        if (!(f >= 0.0 && f <= 1.0)) fail("fractions must be in [0, 1]");
    }
    if (liquidated_fraction + dormant_fraction > 1.0) fail("liquidated and dormant fractions exceed 1");
    for (const auto& [name, weight] : mix) {
        if (!archetypes.contains(name)) fail("mix names unknown archetype " + name);
        if (name == kLiquidationProne || name == kNewLiquidated) fail("liquidated archetypes are sized by liquidated_fraction");
        if (!(weight >= 0.0)) fail("mix weights must be >= 0");
    }
    for (const char* required : {kLiquidationProne, kNewLiquidated}) {
        if (!archetypes.contains(required)) fail(std::string("missing archetype ") + required);
    }
    for (const auto& [_, a] : archetypes) check_archetype(a);
}

PopulationSpec spec_from_json(const nlohmann::json& doc) {
    PopulationSpec spec;
    try {
        set_if(doc, "n_users", spec.n_users);
        set_if(doc, "liquidated_fraction", spec.liquidated_fraction);
        set_if(doc, "new_user_fraction", spec.new_user_fraction);
        set_if(doc, "dormant_fraction", spec.dormant_fraction);
        set_if(doc, "new_liquidated_share", spec.new_liquidated_share);
        set_if(doc, "genesis", spec.genesis);
        set_if(doc, "seed", spec.seed);
        if (doc.contains("mix")) {
            spec.mix.clear();
            for (const auto& [name, weight] : doc.at("mix").items()) spec.mix[name] = weight.get<double>();
        }
        if (doc.contains("archetypes")) {
            for (const auto& [name, fields] : doc.at("archetypes").items()) {
                auto it = spec.archetypes.find(name);
                if (it == spec.archetypes.end()) {
                    throw Error(ErrorCode::InvalidArgument, "population spec: unknown archetype " + name);
                }
                apply_overrides(it->second, fields);
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Malformed, std::string("population spec: ") + e.what());
    }
    spec.validate();
    return spec;
}

PopulationSpec load_spec(const std::filesystem::path& path) { return spec_from_json(load_config_document(path)); }

Population generate(const PopulationSpec& spec) {
    spec.validate();
    const std::size_t n = spec.n_users;
    const auto count = [n](double f) { return static_cast<std::size_t>(std::lround(f * static_cast<double>(n))); };
    const std::size_t n_dormant = count(spec.dormant_fraction);
    const std::size_t n_liq = std::min(count(spec.liquidated_fraction), n - n_dormant);
    const auto n_new_liq = static_cast<std::size_t>(std::lround(spec.new_liquidated_share * static_cast<double>(n_liq)));
    const std::size_t rest = n - n_dormant - n_liq;
    const std::size_t n_new = std::min(rest, count(spec.new_user_fraction) - std::min(count(spec.new_user_fraction), n_new_liq));

    std::vector<std::pair<std::string, double>> fresh, settled;
    for (const auto& [name, weight] : spec.mix) {
        (spec.archetypes.at(name).is_new ? fresh : settled).emplace_back(name, weight);
    }

    // (ground-truth archetype, template) per wallet slot, then shuffled.
    std::vector<std::pair<std::string, std::string>> slots;
    auto push = [&slots](std::size_t k, const std::string& truth, const std::string& templ) {
        for (std::size_t i = 0; i < k; ++i) slots.emplace_back(truth, templ);
    };
    push(n_dormant, "dormant", "");
    push(n_liq - n_new_liq, kLiquidationProne, kLiquidationProne);
    push(n_new_liq, kLiquidationProne, kNewLiquidated);
    for (const auto& [name, k] : apportion(n_new, fresh)) push(k, name, name);
    for (const auto& [name, k] : apportion(rest - n_new, settled)) push(k, name, name);
    Rng order_rng(derive_seed(spec.seed, 0));
    order_rng.shuffle(slots);

    Population pop;
    pop.thresholds = default_thresholds();
    const auto table = ledger::build_volatility_table(pop.thresholds);
    for (std::size_t i = 0; i < slots.size(); ++i) {
        const auto wallet = wallet_id(spec.seed, i);
        const auto& [truth, templ] = slots[i];
        GroundTruth gt{wallet, truth, false, false};
        if (!templ.empty()) {
            const auto& archetype = spec.archetypes.at(templ);
            Rng rng(derive_seed(derive_seed(spec.seed, 1), i));
            auto events = wallet_events(archetype, wallet, rng, spec.genesis, table);
            gt.liquidated = std::any_of(events.begin(), events.end(), [](const auto& e) { return e.call == Call::LiquidationCall; });
            gt.is_new = archetype.is_new;
            pop.events.insert(pop.events.end(), std::make_move_iterator(events.begin()), std::make_move_iterator(events.end()));
        }
        pop.roster.push_back(wallet);
        pop.truth.push_back(std::move(gt));
    }
    std::stable_sort(pop.events.begin(), pop.events.end(), ledger::event_order);
    return pop;
}

void write_truth_csv(std::ostream& out, const std::vector<GroundTruth>& truth) {
    out << "wallet,archetype,liquidated,is_new\n";
    for (const auto& t : truth) out << t.wallet << ',' << t.archetype << ',' << (t.liquidated ? 1 : 0) << ',' << (t.is_new ? 1 : 0) << '\n';
}

std::vector<GroundTruth> read_truth_csv(std::istream& in) {
    std::vector<GroundTruth> out;
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        GroundTruth t;
        std::string liquidated, is_new;
        if (!std::getline(ss, t.wallet, ',') || !std::getline(ss, t.archetype, ',') || !std::getline(ss, liquidated, ',') ||
            !std::getline(ss, is_new)) {
            throw Error(ErrorCode::Malformed, "truth row '" + line + "'");
        }
        t.liquidated = liquidated == "1";
        t.is_new = is_new == "1";
        out.push_back(std::move(t));
    }
    return out;
}

void write_thresholds_csv(std::ostream& out, const std::vector<ledger::ThresholdEntry>& thresholds) {
    out << "coin,chain,threshold\n";
    for (const auto& t : thresholds) out << t.coin << ',' << t.chain << ',' << format_double(t.threshold) << '\n';
}

void write_roster(std::ostream& out, const std::vector<std::string>& roster) {
    for (const auto& w : roster) out << w << '\n';
}

std::vector<std::string> read_roster(std::istream& in) {
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) out.push_back(line);
    }
    return out;
}

void write_population(const std::filesystem::path& directory, const Population& population) {
    std::filesystem::create_directories(directory);
    std::ostringstream events, truth, thresholds, roster;
    ledger::write_events(events, population.events, ledger::Format::Jsonl);
    write_truth_csv(truth, population.truth);
    write_thresholds_csv(thresholds, population.thresholds);
    write_roster(roster, population.roster);
    write_file_atomic(directory / "events.jsonl", events.str());
    write_file_atomic(directory / "truth.csv", truth.str());
    write_file_atomic(directory / "thresholds.csv", thresholds.str());
    write_file_atomic(directory / "wallets.txt", roster.str());
}

}  // namespace zscore::synth
