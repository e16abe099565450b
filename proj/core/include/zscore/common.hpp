#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace zscore {

enum class ErrorCode {
    UnknownCall,
    NegativeAmount,
    MissingField,
    Malformed,
    EmptyTable,
    ThresholdOutOfRange,
    InsufficientData,
    SchemaMismatch,
    KTooLarge,
    InvalidArgument,
    SingleCluster,
    InfeasibleSlotting,
    MissingInterval,
    InvalidInterval,
    UnknownCluster,
    Diverged,
    DuplicateWallet,
    ScoreOutOfRange,
    NotFound,
    NoValidators,
    EpochNotPublished,
    WalletNotFound,
    AlreadyPublished,
    Io,
};

std::string_view to_string(ErrorCode code);

/// Base exception for every recoverable failure raised by the library.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

inline constexpr int kMinScore = 1;
inline constexpr int kMaxScore = 900;
inline constexpr double kSecondsPerDay = 86400.0;

// Shortest round-trip decimal rendering of a double.
std::string format_double(double value);

// Strict decimal parse; throws Error(Malformed) on trailing garbage.
double parse_double(std::string_view text);

std::uint64_t parse_u64(std::string_view text);
std::int64_t parse_i64(std::string_view text);

std::string to_hex(const std::uint8_t* data, std::size_t size);

}  // namespace zscore
