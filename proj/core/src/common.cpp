#include "zscore/common.hpp"

#include <array>
#include <charconv>
#include <cmath>

namespace zscore {

std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::UnknownCall: return "UnknownCall";
        case ErrorCode::NegativeAmount: return "NegativeAmount";
        case ErrorCode::MissingField: return "MissingField";
        case ErrorCode::Malformed: return "Malformed";
        case ErrorCode::EmptyTable: return "EmptyTable";
        case ErrorCode::ThresholdOutOfRange: return "ThresholdOutOfRange";
        case ErrorCode::InsufficientData: return "InsufficientData";
        case ErrorCode::SchemaMismatch: return "SchemaMismatch";
        case ErrorCode::KTooLarge: return "KTooLarge";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
        case ErrorCode::SingleCluster: return "SingleCluster";
        case ErrorCode::InfeasibleSlotting: return "InfeasibleSlotting";
        case ErrorCode::MissingInterval: return "MissingInterval";
        case ErrorCode::InvalidInterval: return "InvalidInterval";
        case ErrorCode::UnknownCluster: return "UnknownCluster";
        case ErrorCode::Diverged: return "Diverged";
        case ErrorCode::DuplicateWallet: return "DuplicateWallet";
        case ErrorCode::ScoreOutOfRange: return "ScoreOutOfRange";
        case ErrorCode::NotFound: return "NotFound";
        case ErrorCode::NoValidators: return "NoValidators";
        case ErrorCode::EpochNotPublished: return "EpochNotPublished";
        case ErrorCode::WalletNotFound: return "WalletNotFound";
        case ErrorCode::AlreadyPublished: return "AlreadyPublished";
        case ErrorCode::Io: return "Io";
    }
    return "Unknown";
}

std::string format_double(double value) {
    std::array<char, 64> buf{};
    auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), value);
    if (ec != std::errc{}) throw Error(ErrorCode::Malformed, "cannot format double");
    return std::string(buf.data(), end);
}

double parse_double(std::string_view text) {
    double value = 0.0;
    auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc{} || end != text.data() + text.size() || text.empty() || !std::isfinite(value)) {
        throw Error(ErrorCode::Malformed, "not a decimal: '" + std::string(text) + "'");
    }
    return value;
}

std::uint64_t parse_u64(std::string_view text) {
    std::uint64_t value = 0;
    auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc{} || end != text.data() + text.size() || text.empty()) {
        throw Error(ErrorCode::Malformed, "not an unsigned integer: '" + std::string(text) + "'");
    }
    return value;
}

std::int64_t parse_i64(std::string_view text) {
    std::int64_t value = 0;
    auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc{} || end != text.data() + text.size() || text.empty()) {
        throw Error(ErrorCode::Malformed, "not an integer: '" + std::string(text) + "'");
    }
    return value;
}

std::string to_hex(const std::uint8_t* data, std::size_t size) {
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string out;
    out.reserve(size * 2);
    for (std::size_t i = 0; i < size; ++i) {
        out.push_back(kDigits[data[i] >> 4]);
        out.push_back(kDigits[data[i] & 0x0f]);
    }
    return out;
}

}  // namespace zscore
