#include "zscore/ledger.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

namespace zscore::ledger {
namespace {

using ordered_json = nlohmann::ordered_json;

constexpr std::string_view kColumns[] = {"chain", "block_id", "wallet", "call", "amount", "coin", "timestamp"};

struct RowError {
    ErrorCode code;
    std::string detail;
};

std::string trim(std::string_view text) {
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) return {};
    const auto last = text.find_last_not_of(" \t\r\n");
    return std::string(text.substr(first, last - first + 1));
}

std::vector<std::string> split_csv_line(std::string_view line) {
    std::vector<std::string> cells;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        if (comma == std::string_view::npos) {
            cells.push_back(trim(line.substr(start)));
            break;
        }
        cells.push_back(trim(line.substr(start, comma - start)));
        start = comma + 1;
    }
    return cells;
}

// Builds an event from named string fields; throws RowError.
TransactionEvent make_event(const std::map<std::string, std::string, std::less<>>& fields) {
    for (auto column : kColumns) {
        auto it = fields.find(column);
        if (it == fields.end() || it->second.empty()) {
            throw RowError{ErrorCode::MissingField, "missing field '" + std::string(column) + "'"};
        }
    }
    TransactionEvent event;
    event.chain = fields.find("chain")->second;
    event.wallet = fields.find("wallet")->second;
    event.coin = fields.find("coin")->second;

    const auto& call_text = fields.find("call")->second;
    auto call = parse_call(call_text);
    if (!call) throw RowError{ErrorCode::UnknownCall, "unknown call '" + call_text + "'"};
    event.call = *call;

    try {
        event.block_id = parse_u64(fields.find("block_id")->second);
        event.amount = parse_double(fields.find("amount")->second);
        event.timestamp = parse_i64(fields.find("timestamp")->second);
    } catch (const Error& e) {
        throw RowError{ErrorCode::Malformed, e.what()};
    }
    if (event.amount < 0.0) {
        throw RowError{ErrorCode::NegativeAmount, "negative amount " + fields.find("amount")->second};
    }
    if (event.timestamp <= 0) {
        throw RowError{ErrorCode::Malformed, "timestamp must be positive"};
    }
    return event;
}

std::string json_scalar_text(const nlohmann::json& value) {
    if (value.is_string()) return value.get<std::string>();
    if (value.is_number_unsigned()) return std::to_string(value.get<std::uint64_t>());
    if (value.is_number_integer()) return std::to_string(value.get<std::int64_t>());
    if (value.is_number_float()) return format_double(value.get<double>());
    if (value.is_null()) return {};
    throw RowError{ErrorCode::Malformed, "unsupported JSON value"};
}

TransactionEvent parse_jsonl_row(std::string_view line) {
    nlohmann::json object;
    try {
        object = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
        throw RowError{ErrorCode::Malformed, e.what()};
    }
    if (!object.is_object()) throw RowError{ErrorCode::Malformed, "row is not a JSON object"};
    std::map<std::string, std::string, std::less<>> fields;
    for (auto column : kColumns) {
        auto it = object.find(std::string(column));
        if (it != object.end()) fields.emplace(std::string(column), json_scalar_text(*it));
    }
    return make_event(fields);
}

void sort_events(std::vector<TransactionEvent>& events) {
    std::stable_sort(events.begin(), events.end(), event_order);
}

}  // namespace

std::string_view to_string(Call call) {
    switch (call) {
        case Call::Borrow: return "Borrow";
        case Call::Repay: return "Repay";
        case Call::Deposit: return "Deposit";
        case Call::UsageAsCollateral: return "UsageAsCollateral";
        case Call::LiquidationCall: return "LiquidationCall";
    }
    return "Borrow";
}

std::optional<Call> parse_call(std::string_view text) {
    for (auto call : {Call::Borrow, Call::Repay, Call::Deposit, Call::UsageAsCollateral, Call::LiquidationCall}) {
        if (to_string(call) == text) return call;
    }
    return std::nullopt;
}

bool event_order(const TransactionEvent& a, const TransactionEvent& b) {
    if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
    return a.block_id < b.block_id;
}

Format parse_format(std::string_view text) {
    if (text == "jsonl") return Format::Jsonl;
    if (text == "csv") return Format::Csv;
    throw Error(ErrorCode::InvalidArgument, "unknown format '" + std::string(text) + "'");
}

ParseResult parse_events(std::istream& in, Format format) {
    ParseResult result;
    std::string line;
    std::size_t row = 0;
    std::vector<std::string> header;

    while (std::getline(in, line)) {
        ++row;
        if (trim(line).empty()) continue;
        if (format == Format::Csv && header.empty()) {
            header = split_csv_line(line);
            for (auto column : kColumns) {
                if (std::find(header.begin(), header.end(), column) == header.end()) {
                    throw Error(ErrorCode::MissingField, "CSV header lacks column '" + std::string(column) + "'");
                }
            }
            continue;
        }
        try {
            if (format == Format::Jsonl) {
                result.events.push_back(parse_jsonl_row(line));
            } else {
                auto cells = split_csv_line(line);
                if (cells.size() != header.size()) {
                    throw RowError{ErrorCode::Malformed, "expected " + std::to_string(header.size()) +
                                                             " cells, got " + std::to_string(cells.size())};
                }
                std::map<std::string, std::string, std::less<>> fields;
                for (std::size_t i = 0; i < header.size(); ++i) fields.emplace(header[i], cells[i]);
                result.events.push_back(make_event(fields));
            }
        } catch (const RowError& e) {
            result.rejects.push_back(Reject{row, e.code, e.detail});
        }
    }
    if (format == Format::Csv && header.empty()) {
        throw Error(ErrorCode::MissingField, "CSV input has no header row");
    }
    sort_events(result.events);
    return result;
}

std::string serialize_event_jsonl(const TransactionEvent& event) {
    ordered_json row;
    row["chain"] = event.chain;
    row["block_id"] = event.block_id;
    row["wallet"] = event.wallet;
    row["call"] = std::string(to_string(event.call));
    row["amount"] = format_double(event.amount);
    row["coin"] = event.coin;
    row["timestamp"] = event.timestamp;
    return row.dump();
}

void write_events(std::ostream& out, const std::vector<TransactionEvent>& events, Format format) {
    if (format == Format::Csv) {
        out << "chain,block_id,wallet,call,amount,coin,timestamp\n";
        for (const auto& e : events) {
            out << e.chain << ',' << e.block_id << ',' << e.wallet << ',' << to_string(e.call) << ','
                << format_double(e.amount) << ',' << e.coin << ',' << e.timestamp << '\n';
        }
        return;
    }
    for (const auto& e : events) out << serialize_event_jsonl(e) << '\n';
}

void write_rejects(std::ostream& out, const std::vector<Reject>& rejects) {
    for (const auto& r : rejects) {
        ordered_json row;
        row["row"] = r.row;
        row["reason"] = std::string(zscore::to_string(r.reason));
        row["detail"] = r.detail;
        out << row.dump() << '\n';
    }
}

PositionReport reconstruct_positions(const std::vector<TransactionEvent>& events) {
    PositionReport report;
    std::map<std::pair<std::string, std::string>, std::size_t> open;
    std::map<std::size_t, double> borrowed;

    for (const auto& event : events) {
        if (event.call != Call::Borrow && event.call != Call::Repay) continue;
        const auto key = std::make_pair(event.wallet, event.coin);
        auto it = open.find(key);

        if (event.call == Call::Borrow) {
            if (it == open.end()) {
                Position position;
                position.wallet = event.wallet;
                position.coin = event.coin;
                report.positions.push_back(std::move(position));
                it = open.emplace(key, report.positions.size() - 1).first;
            }
            auto& position = report.positions[it->second];
            position.outstanding_debt += event.amount;
            borrowed[it->second] += event.amount;
            position.events.push_back(event);
            continue;
        }

        if (it == open.end()) {
            report.anomalies.push_back(RepayAnomaly{event.wallet, event.coin, event.timestamp, event.amount});
            continue;
        }
        auto& position = report.positions[it->second];
        position.events.push_back(event);
        position.outstanding_debt -= event.amount;
        const double tolerance = 1e-9 * std::max(1.0, borrowed[it->second]);
        if (position.outstanding_debt < -tolerance) {
            report.anomalies.push_back(
                RepayAnomaly{event.wallet, event.coin, event.timestamp, -position.outstanding_debt});
        }
        if (position.outstanding_debt <= tolerance) {
            position.outstanding_debt = 0.0;
            position.status = PositionStatus::Closed;
            open.erase(it);
        }
    }
    return report;
}

Volatility CoinVolatilityTable::classify(const std::string& coin) const {
    auto it = entries.find(coin);
    return it == entries.end() ? Volatility::Volatile : it->second.klass;
}

std::optional<double> CoinVolatilityTable::threshold(const std::string& coin) const {
    auto it = entries.find(coin);
    if (it == entries.end()) return std::nullopt;
    return it->second.avg_threshold;
}

CoinVolatilityTable build_volatility_table(const std::vector<ThresholdEntry>& thresholds, bool invert) {
    if (thresholds.empty()) throw Error(ErrorCode::EmptyTable, "no liquidation thresholds supplied");

    std::map<std::string, std::pair<double, int>> sums;
    for (const auto& entry : thresholds) {
        if (!(entry.threshold >= 0.0 && entry.threshold <= 1.0)) {
            throw Error(ErrorCode::ThresholdOutOfRange,
                        entry.coin + " on " + entry.chain + ": " + format_double(entry.threshold));
        }
        auto& [sum, count] = sums[entry.coin];
        sum += entry.threshold;
        ++count;
    }

    CoinVolatilityTable table;
    std::vector<double> averages;
    for (const auto& [coin, acc] : sums) {
        const double avg = acc.first / acc.second;
        table.entries[coin].avg_threshold = avg;
        averages.push_back(avg);
    }
    std::sort(averages.begin(), averages.end());
    const std::size_t n = averages.size();
    table.median = n % 2 == 1 ? averages[n / 2] : 0.5 * (averages[n / 2 - 1] + averages[n / 2]);

    for (auto& [coin, entry] : table.entries) {
        const bool non_volatile = invert ? entry.avg_threshold >= table.median : entry.avg_threshold <= table.median;
        entry.klass = non_volatile ? Volatility::NonVolatile : Volatility::Volatile;
    }
    return table;
}

std::vector<ThresholdEntry> parse_thresholds_csv(std::istream& in) {
    std::vector<ThresholdEntry> entries;
    std::string line;
    std::vector<std::string> header;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        ++row;
        if (trim(line).empty()) continue;
        auto cells = split_csv_line(line);
        if (header.empty()) {
            header = cells;
            continue;
        }
        if (cells.size() != header.size()) {
            throw Error(ErrorCode::Malformed, "threshold CSV row " + std::to_string(row) + " has wrong arity");
        }
        ThresholdEntry entry;
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (header[i] == "coin") entry.coin = cells[i];
            else if (header[i] == "chain") entry.chain = cells[i];
            else if (header[i] == "threshold") entry.threshold = parse_double(cells[i]);
        }
        if (entry.coin.empty()) throw Error(ErrorCode::MissingField, "threshold row " + std::to_string(row) + " lacks coin");
        entries.push_back(std::move(entry));
    }
    return entries;
}

double HealthFactor::capped(double cap) const {
    if (!value_) return cap;
    return std::min(*value_, cap);
}

HealthFactor health_factor(double collateral, double weighted_lt, double borrow) {
    if (borrow <= 0.0) return HealthFactor::healthy();
    return HealthFactor::of(collateral * weighted_lt / borrow);
}

std::vector<HealthSnapshot> health_snapshots(const std::vector<TransactionEvent>& wallet_events,
                                             const CoinVolatilityTable& table) {
    std::vector<HealthSnapshot> snapshots;
    snapshots.reserve(wallet_events.size());
    std::map<std::string, double> collateral;
    std::map<std::string, double> debt;

    for (const auto& event : wallet_events) {
        switch (event.call) {
            case Call::Deposit:
            case Call::UsageAsCollateral:
                collateral[event.coin] += event.amount;
                break;
            case Call::Borrow:
                debt[event.coin] += event.amount;
                break;
            case Call::Repay: {
                auto& d = debt[event.coin];
                d = std::max(0.0, d - event.amount);
                break;
            }
            case Call::LiquidationCall: {
                // Seize from the named coin first, then from the rest in coin order.
                double remaining = event.amount;
                auto seize = [&remaining](double& held) {
                    const double taken = std::min(held, remaining);
                    held -= taken;
                    remaining -= taken;
                };
                seize(collateral[event.coin]);
                for (auto& [coin, held] : collateral) {
                    if (remaining <= 0.0) break;
                    seize(held);
                }
                break;
            }
        }

        HealthSnapshot snap;
        snap.wallet = event.wallet;
        snap.timestamp = event.timestamp;
        double weighted = 0.0;
        for (const auto& [coin, held] : collateral) {
            snap.total_collateral_value += held;
            weighted += held * table.threshold(coin).value_or(0.0);
        }
        for (const auto& [coin, owed] : debt) snap.total_borrow_value += owed;
        snap.weighted_avg_liquidation_threshold =
            snap.total_collateral_value > 0.0 ? weighted / snap.total_collateral_value : 0.0;
        snap.hf = health_factor(snap.total_collateral_value, snap.weighted_avg_liquidation_threshold,
                                snap.total_borrow_value);
        snapshots.push_back(std::move(snap));
    }
    return snapshots;
}

std::vector<WalletHistory> group_by_wallet(const std::vector<TransactionEvent>& events,
                                           const std::vector<Position>& positions,
                                           const std::vector<std::string>& roster) {
    std::map<std::string, WalletHistory> by_wallet;
    for (const auto& wallet : roster) by_wallet[wallet].wallet = wallet;
    for (const auto& event : events) {
        auto& history = by_wallet[event.wallet];
        history.wallet = event.wallet;
        history.events.push_back(event);
    }
    for (const auto& position : positions) {
        auto& history = by_wallet[position.wallet];
        history.wallet = position.wallet;
        history.positions.push_back(position);
    }
    std::vector<WalletHistory> out;
    out.reserve(by_wallet.size());
    for (auto& [wallet, history] : by_wallet) out.push_back(std::move(history));
    return out;
}

bool has_negative_time_feature(const WalletHistory& history) {
    for (std::size_t i = 0; i < history.events.size(); ++i) {
        if (history.events[i].timestamp <= 0) return true;
        if (i > 0 && history.events[i].timestamp < history.events[i - 1].timestamp) return true;
    }
    return false;
}

CohortSplit split_cohorts(const std::vector<WalletHistory>& users) {
    CohortSplit split;
    for (const auto& user : users) {
        if (has_negative_time_feature(user)) {
            split.dropped.push_back(DroppedUser{user.wallet, "negative time-derived feature"});
            continue;
        }
        const bool liquidated = std::any_of(user.events.begin(), user.events.end(),
                                            [](const auto& e) { return e.call == Call::LiquidationCall; });
        (liquidated ? split.liquidation : split.non_liquidation).push_back(user);
    }
    return split;
}

}  // namespace zscore::ledger
