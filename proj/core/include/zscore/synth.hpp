#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "zscore/ledger.hpp"

namespace zscore::synth {

/// Behavioural template for one kind of wallet. Counts are drawn from their
/// inclusive ranges with a triangular density peaking mid-range.
struct Archetype {
    std::string name;
    std::array<int, 2> borrows{1, 1};
    double repay_ratio = 1.0;  // repays = round(borrows * ratio), each paying one borrow off
    std::array<int, 2> deposits{1, 1};
    std::array<int, 2> toggles{0, 0};
    std::array<int, 2> liquidations{0, 0};
    double gap_days = 1.0;      // mean spacing between consecutive events
    double gap_jitter = 0.1;    // relative half-width of the per-gap jitter
    double tempo_jitter = 0.3;  // relative half-width of a per-wallet factor on every gap
    double long_gap_share = 0.0;  // share of gaps stretched to `long_gap_days` (sporadic use)
    double long_gap_days = 0.0;
    double volatile_borrow_fraction = 0.0;
    double volatile_deposit_fraction = 0.0;
    double target_min_hf = 2.0;  // health factor at peak debt, before any liquidation
    double hf_jitter = 0.15;     // relative half-width of the per-wallet jitter on target_min_hf
    double liquidation_seize = 0.2;  // share of collateral taken per liquidation
    bool is_new = false;
    double start_offset_days = 0.0;  // first event lands this many days after genesis, plus up to 30
};

/// Names of the built-in archetypes.
inline constexpr std::array<const char*, 5> kArchetypeNames{"disciplined-whale", "sporadic-degen", "new-cautious",
                                                            "new-reckless", "liquidation-prone"};

/// Built-in parameters by name, plus the "new-liquidated" variant used for
/// liquidated wallets that are also new.
std::map<std::string, Archetype> default_archetypes();

struct PopulationSpec {
    std::size_t n_users = 2000;
    double liquidated_fraction = 0.033;
    double new_user_fraction = 0.46;
    double dormant_fraction = 0.01;      // wallets in the roster with no events
    double new_liquidated_share = 0.3;   // share of liquidated wallets drawn as new users
    std::map<std::string, double> mix{{"disciplined-whale", 0.5},
                                      {"sporadic-degen", 0.5},
                                      {"new-cautious", 0.5},
                                      {"new-reckless", 0.5}};
    std::map<std::string, Archetype> archetypes = default_archetypes();
    std::int64_t genesis = 1'650'000'000;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Reads a spec from a parsed TOML/JSON document. Archetype tables override
/// individual fields of the built-in archetypes.
PopulationSpec spec_from_json(const nlohmann::json& doc);
PopulationSpec load_spec(const std::filesystem::path& path);

struct GroundTruth {
    std::string wallet;
    std::string archetype;
    bool liquidated = false;
    bool is_new = false;
};

struct Population {
    std::vector<ledger::TransactionEvent> events;  // sorted by (timestamp, block_id)
    std::vector<GroundTruth> truth;                // wallet order
    std::vector<ledger::ThresholdEntry> thresholds;
    std::vector<std::string> roster;               // every wallet, including dormant ones
};

/// Deterministic in the spec. Exactly round(liquidated_fraction * n) wallets
/// receive a LiquidationCall.
Population generate(const PopulationSpec& spec);

/// Thresholds used by the generator: USDC, DAI, USDT low (non-volatile), WBTC,
/// WETH, LINK high (volatile), some listed on two chains.
std::vector<ledger::ThresholdEntry> default_thresholds();

void write_truth_csv(std::ostream& out, const std::vector<GroundTruth>& truth);
std::vector<GroundTruth> read_truth_csv(std::istream& in);
void write_thresholds_csv(std::ostream& out, const std::vector<ledger::ThresholdEntry>& thresholds);
void write_roster(std::ostream& out, const std::vector<std::string>& roster);
std::vector<std::string> read_roster(std::istream& in);

/// Writes events.jsonl, truth.csv, thresholds.csv and wallets.txt into `directory`.
void write_population(const std::filesystem::path& directory, const Population& population);

}  // namespace zscore::synth
