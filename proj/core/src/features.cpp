#include "zscore/features.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace zscore::features {
namespace {

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, sep)) out.push_back(cell);
    if (!line.empty() && line.back() == sep) out.emplace_back();
    return out;
}

void check_schema(const ScalingParams& params) {
    if (params.schema_version != kSchemaVersion || params.columns.size() != kFeatureCount) {
        throw Error(ErrorCode::SchemaMismatch, "scaling params do not match feature schema v" +
                                                   std::to_string(kSchemaVersion));
    }
    for (std::size_t j = 0; j < kFeatureCount; ++j) {
        if (params.columns[j].name != kSchema[j].name || params.columns[j].method != kSchema[j].method) {
            throw Error(ErrorCode::SchemaMismatch, "column " + std::to_string(j) + " is '" +
                                                       params.columns[j].name + "', expected '" +
                                                       std::string(kSchema[j].name) + "'");
        }
    }
}

}  // namespace

std::string_view to_string(ScaleMethod method) {
    return method == ScaleMethod::Log1p ? "log1p" : "standardize";
}

std::size_t column_index(std::string_view name) {
    for (std::size_t j = 0; j < kFeatureCount; ++j) {
        if (kSchema[j].name == name) return j;
    }
    throw Error(ErrorCode::SchemaMismatch, "unknown feature '" + std::string(name) + "'");
}

bool UserFeatureVector::zero_interaction() const {
    return std::all_of(interaction_counts.begin(), interaction_counts.end(), [](auto c) { return c == 0; });
}

std::array<double, kFeatureCount> UserFeatureVector::numeric() const {
    using ledger::Call;
    return {
        static_cast<double>(count(Call::Borrow)),
        static_cast<double>(count(Call::Repay)),
        static_cast<double>(count(Call::Deposit)),
        static_cast<double>(count(Call::UsageAsCollateral)),
        static_cast<double>(count(Call::LiquidationCall)),
        static_cast<double>(position_count),
        account_age_days,
        mean_inter_event_gap_days,
        std_inter_event_gap_days,
        active_days,
        volatile_borrow_fraction,
        volatile_deposit_fraction,
        min_health_factor_observed.capped(kHealthFactorCap),
    };
}

UserFeatureVector extract_features(const ledger::WalletHistory& history, const ledger::CoinVolatilityTable& table) {
    using ledger::Call;
    UserFeatureVector v;
    v.wallet = history.wallet;
    v.position_count = static_cast<std::uint32_t>(history.positions.size());

    auto events = history.events;
    std::stable_sort(events.begin(), events.end(), ledger::event_order);
    if (events.empty()) return v;

    std::uint32_t volatile_borrows = 0;
    std::uint32_t volatile_deposits = 0;
    std::set<std::int64_t> days;
    for (const auto& e : events) {
        ++v.interaction_counts[static_cast<std::size_t>(e.call)];
        const bool is_volatile = table.classify(e.coin) == ledger::Volatility::Volatile;
        if (e.call == Call::Borrow && is_volatile) ++volatile_borrows;
        if (e.call == Call::Deposit && is_volatile) ++volatile_deposits;
        days.insert(e.timestamp / static_cast<std::int64_t>(kSecondsPerDay));
    }
    v.liquidation_count = v.count(Call::LiquidationCall);
    v.active_days = static_cast<double>(days.size());
    if (v.count(Call::Borrow) > 0) {
        v.volatile_borrow_fraction = static_cast<double>(volatile_borrows) / v.count(Call::Borrow);
    }
    if (v.count(Call::Deposit) > 0) {
        v.volatile_deposit_fraction = static_cast<double>(volatile_deposits) / v.count(Call::Deposit);
    }

    v.account_age_days = static_cast<double>(events.back().timestamp - events.front().timestamp) / kSecondsPerDay;
    if (events.size() > 1) {
        std::vector<double> gaps;
        gaps.reserve(events.size() - 1);
        for (std::size_t i = 1; i < events.size(); ++i) {
            gaps.push_back(static_cast<double>(events[i].timestamp - events[i - 1].timestamp) / kSecondsPerDay);
        }
        double mean = 0.0;
        for (double g : gaps) mean += g;
        mean /= static_cast<double>(gaps.size());
        double var = 0.0;
        for (double g : gaps) var += (g - mean) * (g - mean);
        var /= static_cast<double>(gaps.size());
        v.mean_inter_event_gap_days = mean;
        v.std_inter_event_gap_days = std::sqrt(var);
    }

    for (const auto& snap : ledger::health_snapshots(events, table)) {
        if (snap.hf.is_healthy_sentinel()) continue;
        if (v.min_health_factor_observed.is_healthy_sentinel() ||
            snap.hf.value() < v.min_health_factor_observed.value()) {
            v.min_health_factor_observed = snap.hf;
        }
    }
    return v;
}

ScalingParams fit_scaling(const std::vector<UserFeatureVector>& vectors) {
    if (vectors.size() < 2) {
        throw Error(ErrorCode::InsufficientData, "scaling needs at least 2 users, got " + std::to_string(vectors.size()));
    }
    const Eigen::MatrixXd raw = raw_matrix(vectors);
    const auto n = static_cast<double>(raw.rows());
    ScalingParams params;
    for (std::size_t j = 0; j < kFeatureCount; ++j) {
        ColumnScaling column{std::string(kSchema[j].name), kSchema[j].method, 0.0, 1.0};
        if (column.method == ScaleMethod::ZScoreStandardize) {
            const auto col = raw.col(static_cast<Eigen::Index>(j));
            column.mean = col.mean();
            column.std = std::sqrt((col.array() - column.mean).square().sum() / (n - 1.0));
        }
        params.columns.push_back(std::move(column));
    }
    return params;
}

Eigen::MatrixXd raw_matrix(const std::vector<UserFeatureVector>& vectors) {
    Eigen::MatrixXd raw(static_cast<Eigen::Index>(vectors.size()), static_cast<Eigen::Index>(kFeatureCount));
    for (std::size_t i = 0; i < vectors.size(); ++i) {
        const auto values = vectors[i].numeric();
        for (std::size_t j = 0; j < kFeatureCount; ++j) {
            raw(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = values[j];
        }
    }
    return raw;
}

Eigen::MatrixXd apply_scaling(const Eigen::MatrixXd& raw, const ScalingParams& params) {
    check_schema(params);
    if (raw.cols() != static_cast<Eigen::Index>(kFeatureCount)) {
        throw Error(ErrorCode::SchemaMismatch, "matrix has " + std::to_string(raw.cols()) + " columns");
    }
    Eigen::MatrixXd out(raw.rows(), raw.cols());
    for (Eigen::Index j = 0; j < raw.cols(); ++j) {
        const auto& c = params.columns[static_cast<std::size_t>(j)];
        if (c.method == ScaleMethod::Log1p) {
            out.col(j) = raw.col(j).array().log1p();
        } else if (c.std > 0.0) {
            out.col(j) = (raw.col(j).array() - c.mean) / c.std;
        } else {
            out.col(j) = raw.col(j).array() - c.mean;
        }
    }
    return out;
}

ScaledMatrix apply_scaling(const std::vector<UserFeatureVector>& vectors, const ScalingParams& params) {
    ScaledMatrix m;
    m.rows = apply_scaling(raw_matrix(vectors), params);
    m.params = params;
    m.wallets.reserve(vectors.size());
    for (const auto& v : vectors) m.wallets.push_back(v.wallet);
    return m;
}

Eigen::MatrixXd inverse_scaling(const Eigen::MatrixXd& scaled, const ScalingParams& params) {
    check_schema(params);
    Eigen::MatrixXd out(scaled.rows(), scaled.cols());
    for (Eigen::Index j = 0; j < scaled.cols(); ++j) {
        const auto& c = params.columns[static_cast<std::size_t>(j)];
        if (c.method == ScaleMethod::Log1p) {
            out.col(j) = scaled.col(j).array().expm1();
        } else if (c.std > 0.0) {
            out.col(j) = scaled.col(j).array() * c.std + c.mean;
        } else {
            out.col(j) = scaled.col(j).array() + c.mean;
        }
    }
    return out;
}

nlohmann::json to_json(const ScalingParams& params) {
    nlohmann::ordered_json doc;
    doc["schema_version"] = params.schema_version;
    doc["columns"] = nlohmann::ordered_json::array();
    for (const auto& c : params.columns) {
        nlohmann::ordered_json col;
        col["name"] = c.name;
        col["method"] = std::string(to_string(c.method));
        col["mean"] = c.mean;
        col["std"] = c.std;
        doc["columns"].push_back(std::move(col));
    }
    return nlohmann::json::parse(doc.dump());
}

ScalingParams scaling_from_json(const nlohmann::json& doc) {
    ScalingParams params;
    params.schema_version = doc.at("schema_version").get<int>();
    for (const auto& col : doc.at("columns")) {
        ColumnScaling c;
        c.name = col.at("name").get<std::string>();
        const auto method = col.at("method").get<std::string>();
        if (method == "log1p") c.method = ScaleMethod::Log1p;
        else if (method == "standardize") c.method = ScaleMethod::ZScoreStandardize;
        else throw Error(ErrorCode::SchemaMismatch, "unknown scaling method '" + method + "'");
        c.mean = col.at("mean").get<double>();
        c.std = col.at("std").get<double>();
        params.columns.push_back(std::move(c));
    }
    check_schema(params);
    return params;
}

void write_features_csv(std::ostream& out, const std::vector<UserFeatureVector>& vectors) {
    out << "schema_version," << kSchemaVersion << '\n';
    out << "wallet";
    for (const auto& column : kSchema) out << ',' << column.name;
    out << '\n';
    for (const auto& v : vectors) {
        out << v.wallet;
        const auto values = v.numeric();
        for (std::size_t j = 0; j + 1 < kFeatureCount; ++j) out << ',' << format_double(values[j]);
        out << ',';
        if (v.min_health_factor_observed.is_healthy_sentinel()) out << "healthy";
        else out << format_double(v.min_health_factor_observed.value());
        out << '\n';
    }
}

std::vector<UserFeatureVector> read_features_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw Error(ErrorCode::Malformed, "empty feature file");
    const auto version = split(line, ',');
    if (version.size() != 2 || version[0] != "schema_version" ||
        parse_i64(version[1]) != kSchemaVersion) {
        throw Error(ErrorCode::SchemaMismatch, "feature file schema header is '" + line + "'");
    }
    if (!std::getline(in, line)) throw Error(ErrorCode::Malformed, "feature file lacks column header");
    const auto header = split(line, ',');
    if (header.size() != kFeatureCount + 1 || header[0] != "wallet") {
        throw Error(ErrorCode::SchemaMismatch, "unexpected feature columns");
    }
    for (std::size_t j = 0; j < kFeatureCount; ++j) {
        if (header[j + 1] != kSchema[j].name) throw Error(ErrorCode::SchemaMismatch, "column " + header[j + 1]);
    }

    std::vector<UserFeatureVector> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split(line, ',');
        if (cells.size() != kFeatureCount + 1) throw Error(ErrorCode::Malformed, "feature row arity: " + line);
        UserFeatureVector v;
        v.wallet = cells[0];
        for (std::size_t c = 0; c < ledger::kCallCount; ++c) {
            v.interaction_counts[c] = static_cast<std::uint32_t>(parse_double(cells[1 + c]));
        }
        v.position_count = static_cast<std::uint32_t>(parse_double(cells[6]));
        v.account_age_days = parse_double(cells[7]);
        v.mean_inter_event_gap_days = parse_double(cells[8]);
        v.std_inter_event_gap_days = parse_double(cells[9]);
        v.active_days = parse_double(cells[10]);
        v.volatile_borrow_fraction = parse_double(cells[11]);
        v.volatile_deposit_fraction = parse_double(cells[12]);
        v.liquidation_count = v.count(ledger::Call::LiquidationCall);
        v.min_health_factor_observed =
            cells[13] == "healthy" ? ledger::HealthFactor::healthy() : ledger::HealthFactor::of(parse_double(cells[13]));
        out.push_back(std::move(v));
    }
    return out;
}

}  // namespace zscore::features
