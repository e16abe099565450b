#pragma once

#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "zscore/common.hpp"

namespace zscore::ledger {

enum class Call { Borrow, Repay, Deposit, UsageAsCollateral, LiquidationCall };

inline constexpr std::size_t kCallCount = 5;

std::string_view to_string(Call call);
std::optional<Call> parse_call(std::string_view text);

/// One wallet-level protocol call. Amounts are pre-normalized to a common
/// value unit by the producer of the log.
struct TransactionEvent {
    std::string chain;
    std::uint64_t block_id = 0;
    std::string wallet;
    Call call = Call::Borrow;
    double amount = 0.0;
    std::string coin;
    std::int64_t timestamp = 0;

    friend bool operator==(const TransactionEvent&, const TransactionEvent&) = default;
};

/// Strict weak order by (timestamp, block_id).
bool event_order(const TransactionEvent& a, const TransactionEvent& b);

enum class Format { Jsonl, Csv };

Format parse_format(std::string_view text);

struct Reject {
    std::size_t row = 0;  // 1-based line number in the input stream
    ErrorCode reason = ErrorCode::Malformed;
    std::string detail;
};

struct ParseResult {
    std::vector<TransactionEvent> events;
    std::vector<Reject> rejects;
};

/// Decodes a JSONL or CSV event log. Malformed rows land in `rejects`; the
/// returned events are stably sorted by (timestamp, block_id).
ParseResult parse_events(std::istream& in, Format format);

void write_events(std::ostream& out, const std::vector<TransactionEvent>& events, Format format);
std::string serialize_event_jsonl(const TransactionEvent& event);
void write_rejects(std::ostream& out, const std::vector<Reject>& rejects);

enum class PositionStatus { Open, Closed };

struct Position {
    std::string wallet;
    std::string coin;
    double outstanding_debt = 0.0;
    PositionStatus status = PositionStatus::Open;
    std::vector<TransactionEvent> events;
};

struct RepayAnomaly {
    std::string wallet;
    std::string coin;
    std::int64_t timestamp = 0;
    double excess = 0.0;  // repaid amount beyond outstanding debt
};

struct PositionReport {
    std::vector<Position> positions;
    std::vector<RepayAnomaly> anomalies;
};

/// Replays Borrow/Repay events into per-(wallet, coin) borrow lifetimes.
/// Over-repayment clamps debt at zero and is recorded as an anomaly.
PositionReport reconstruct_positions(const std::vector<TransactionEvent>& events);

enum class Volatility { Volatile, NonVolatile };

struct ThresholdEntry {
    std::string coin;
    std::string chain;
    double threshold = 0.0;
};

struct CoinClass {
    double avg_threshold = 0.0;
    Volatility klass = Volatility::Volatile;
};

struct CoinVolatilityTable {
    std::map<std::string, CoinClass> entries;
    double median = 0.0;

    /// Unknown coins are treated as volatile.
    Volatility classify(const std::string& coin) const;
    std::optional<double> threshold(const std::string& coin) const;
};

/// Averages thresholds across chains and splits at the median. By default a
/// coin at or below the median is non-volatile; `invert` flips the reading.
CoinVolatilityTable build_volatility_table(const std::vector<ThresholdEntry>& thresholds,
                                           bool invert = false);

std::vector<ThresholdEntry> parse_thresholds_csv(std::istream& in);

/// Health factor; `std::nullopt` value means healthy (no outstanding borrow).
class HealthFactor {
public:
    static HealthFactor healthy() { return HealthFactor(); }
    static HealthFactor of(double value) { return HealthFactor(value); }

    bool is_healthy_sentinel() const { return !value_.has_value(); }
    double value() const { return *value_; }
    bool at_risk() const { return value_.has_value() && *value_ < 1.0; }

    /// Numeric view with the sentinel mapped to `cap`; finite values are capped too.
    double capped(double cap) const;

    friend bool operator==(const HealthFactor&, const HealthFactor&) = default;

private:
    HealthFactor() = default;
    explicit HealthFactor(double value) : value_(value) {}
    std::optional<double> value_;
};

HealthFactor health_factor(double collateral, double weighted_lt, double borrow);

struct HealthSnapshot {
    std::string wallet;
    std::int64_t timestamp = 0;
    double total_collateral_value = 0.0;
    double weighted_avg_liquidation_threshold = 0.0;
    double total_borrow_value = 0.0;
    HealthFactor hf = HealthFactor::healthy();
};

/// One snapshot after every event of a single wallet's sorted history.
/// Collateral is cumulative Deposit + UsageAsCollateral minus liquidated
/// amounts per coin; borrow is the outstanding debt across coins.
std::vector<HealthSnapshot> health_snapshots(const std::vector<TransactionEvent>& wallet_events,
                                             const CoinVolatilityTable& table);

struct WalletHistory {
    std::string wallet;
    std::vector<TransactionEvent> events;
    std::vector<Position> positions;
};

/// Groups events and positions by wallet (wallets ascending). Events keep
/// their input order within a wallet. `roster` adds wallets with no events.
std::vector<WalletHistory> group_by_wallet(const std::vector<TransactionEvent>& events,
                                           const std::vector<Position>& positions,
                                           const std::vector<std::string>& roster = {});

bool has_negative_time_feature(const WalletHistory& history);

struct DroppedUser {
    std::string wallet;
    std::string reason;
};

struct CohortSplit {
    std::vector<WalletHistory> liquidation;
    std::vector<WalletHistory> non_liquidation;
    std::vector<DroppedUser> dropped;
};

CohortSplit split_cohorts(const std::vector<WalletHistory>& users);

}  // namespace zscore::ledger
