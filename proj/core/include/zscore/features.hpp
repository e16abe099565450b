#pragma once

#include <array>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "zscore/ledger.hpp"

namespace zscore::features {

inline constexpr int kSchemaVersion = 1;

enum class ScaleMethod { Log1p, ZScoreStandardize };

std::string_view to_string(ScaleMethod method);

struct FeatureColumn {
    std::string_view name;
    ScaleMethod method;
};

/// Numeric columns fed to clustering and the scoring network, in order.
/// Counts are log1p-compressed; everything else is standardized.
inline constexpr std::array<FeatureColumn, 13> kSchema{{
    {"borrow_count", ScaleMethod::Log1p},
    {"repay_count", ScaleMethod::Log1p},
    {"deposit_count", ScaleMethod::Log1p},
    {"collateral_toggle_count", ScaleMethod::Log1p},
    {"liquidation_call_count", ScaleMethod::Log1p},
    {"position_count", ScaleMethod::Log1p},
    {"account_age_days", ScaleMethod::ZScoreStandardize},
    {"mean_gap_days", ScaleMethod::ZScoreStandardize},
    {"std_gap_days", ScaleMethod::ZScoreStandardize},
    {"active_days", ScaleMethod::ZScoreStandardize},
    {"volatile_borrow_fraction", ScaleMethod::ZScoreStandardize},
    {"volatile_deposit_fraction", ScaleMethod::ZScoreStandardize},
    {"min_health_factor", ScaleMethod::ZScoreStandardize},
}};

inline constexpr std::size_t kFeatureCount = kSchema.size();

/// Index of a column in kSchema; throws SchemaMismatch for unknown names.
std::size_t column_index(std::string_view name);

/// Health factors above this (and the healthy sentinel) are flattened here
/// when a numeric value is needed.
inline constexpr double kHealthFactorCap = 10.0;

struct UserFeatureVector {
    std::string wallet;
    std::array<std::uint32_t, ledger::kCallCount> interaction_counts{};  // indexed by ledger::Call
    std::uint32_t position_count = 0;
    double account_age_days = 0.0;
    double mean_inter_event_gap_days = 0.0;
    double std_inter_event_gap_days = 0.0;
    double active_days = 0.0;
    double volatile_borrow_fraction = 0.0;
    double volatile_deposit_fraction = 0.0;
    std::uint32_t liquidation_count = 0;
    ledger::HealthFactor min_health_factor_observed = ledger::HealthFactor::healthy();

    std::uint32_t count(ledger::Call call) const { return interaction_counts[static_cast<std::size_t>(call)]; }
    bool zero_interaction() const;

    /// Values laid out in kSchema order.
    std::array<double, kFeatureCount> numeric() const;

    friend bool operator==(const UserFeatureVector&, const UserFeatureVector&) = default;
};

/// Per-wallet features. Events are sorted internally, so input order does not matter.
UserFeatureVector extract_features(const ledger::WalletHistory& history, const ledger::CoinVolatilityTable& table);

struct ColumnScaling {
    std::string name;
    ScaleMethod method = ScaleMethod::Log1p;
    double mean = 0.0;
    double std = 1.0;

    friend bool operator==(const ColumnScaling&, const ColumnScaling&) = default;
};

struct ScalingParams {
    int schema_version = kSchemaVersion;
    std::vector<ColumnScaling> columns;

    friend bool operator==(const ScalingParams&, const ScalingParams&) = default;
};

ScalingParams fit_scaling(const std::vector<UserFeatureVector>& vectors);

struct ScaledMatrix {
    std::vector<std::string> wallets;
    Eigen::MatrixXd rows;  // one row per user, kSchema column order
    ScalingParams params;
};

Eigen::MatrixXd raw_matrix(const std::vector<UserFeatureVector>& vectors);

ScaledMatrix apply_scaling(const std::vector<UserFeatureVector>& vectors, const ScalingParams& params);
Eigen::MatrixXd apply_scaling(const Eigen::MatrixXd& raw, const ScalingParams& params);
Eigen::MatrixXd inverse_scaling(const Eigen::MatrixXd& scaled, const ScalingParams& params);

nlohmann::json to_json(const ScalingParams& params);
ScalingParams scaling_from_json(const nlohmann::json& doc);

void write_features_csv(std::ostream& out, const std::vector<UserFeatureVector>& vectors);
std::vector<UserFeatureVector> read_features_csv(std::istream& in);

}  // namespace zscore::features
