#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "zscore/store.hpp"

namespace zscore::quorum {

enum class Behavior { Honest, RejectAll, CorruptRecompute, Silent };

std::string_view to_string(Behavior behavior);
Behavior parse_behavior(std::string_view text);

struct ValidatorSpec {
    std::string id;
    Behavior behavior = Behavior::Honest;
    double sample_fraction = 0.1;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Roster document: {"validators": [{"id", "behavior", "sample_fraction", "seed"}, ...]}.
std::vector<ValidatorSpec> roster_from_json(const nlohmann::json& doc);
std::vector<ValidatorSpec> load_roster(const std::filesystem::path& path);  // .toml or .json

struct ValidatorVote {
    std::string validator_id;
    std::uint64_t epoch = 0;
    attest::Digest claimed_root{};
    bool approve = false;
    std::size_t sampled = 0;
    std::size_t failed = 0;  // sampled records whose proof did not fold to the proposed root
};

struct QuorumResult {
    std::uint64_t epoch = 0;
    attest::Digest proposed_root{};
    std::size_t approvals = 0;
    std::size_t total_validators = 0;
    bool published = false;
    std::vector<ValidatorVote> votes;     // delivered votes, ordered by validator id
    std::vector<std::string> silent;      // validators that sent nothing
    std::vector<std::string> slashable;   // approved a root other than the proposal
};

/// Smallest approval count reaching two thirds of n, i.e. ceil(2n/3).
std::size_t quorum_threshold(std::size_t n);

nlohmann::ordered_json to_json(const QuorumResult& result);

struct ChainEntry {
    std::uint64_t epoch = 0;
    attest::Digest root{};
    std::uint64_t timestamp = 0;  // logical clock, one tick per publication
};

/// Append-only stand-in for the on-chain registry of published roots.
class ChainStub {
public:
    ChainStub() = default;
    ChainStub(const ChainStub& other) : entries_(other.log()) {}
    ChainStub& operator=(const ChainStub& other) {
        auto entries = other.log();
        std::lock_guard lock(mutex_);
        entries_ = std::move(entries);
        return *this;
    }

    /// Throws AlreadyPublished when the epoch already has a root.
    ChainEntry publish(std::uint64_t epoch, const attest::Digest& root);
    std::optional<attest::Digest> root_for(std::uint64_t epoch) const;
    std::vector<ChainEntry> log() const;
    std::size_t size() const;

    void save(const std::filesystem::path& path) const;
    static ChainStub load(const std::filesystem::path& path);  // missing file gives an empty chain

private:
    std::vector<ChainEntry> entries_;
    mutable std::mutex mutex_;
};

struct EpochOptions {
    bool parallel = false;                         // one thread per validator
    std::optional<attest::Digest> proposed_root;   // defaults to the store's committed root
};

/// One validation round. Honest validators sample ceil(f * n) records without
/// replacement and approve iff every sampled proof folds to the proposed root.
/// The root is published iff approvals reach quorum_threshold(validators).
/// A failed quorum leaves the chain untouched; retrying is up to the caller.
QuorumResult run_epoch(const attest::ScoreStore& store, const std::vector<ValidatorSpec>& validators, ChainStub& chain,
                       std::uint64_t epoch, const EpochOptions& options = {});

struct ScoreResponse {
    attest::ZScoreRecord record;
    attest::MerkleProof proof;
    attest::Digest root{};  // as published on chain
    bool verified = false;
};

ScoreResponse serve_score(const attest::ScoreStore& store, const ChainStub& chain, const std::string& wallet,
                          std::uint64_t epoch);

nlohmann::ordered_json to_json(const ScoreResponse& response);

/// Answers one request line {"wallet": .., "epoch": ..} with one JSON line.
/// Failures are answered with {"error": code, "message": ..}.
std::string handle_query(const attest::ScoreStore& store, const ChainStub& chain, std::string_view request);

/// Line-framed query loop until end of input.
void serve_stdio(const attest::ScoreStore& store, const ChainStub& chain, std::istream& in, std::ostream& out);

struct TamperOptions {
    std::size_t n_records = 1000;
    std::size_t trials = 10000;
    std::uint64_t seed = 0;
};

/// Monte-Carlo estimate of how a sampling quorum reacts to a tampered store.
/// Each record is tampered independently with probability `tampered_fraction`.
struct TamperReport {
    std::size_t n_records = 0;
    double tampered_fraction = 0.0;
    std::size_t trials = 0;
    std::size_t sample_size = 0;  // per honest validator
    std::size_t honest = 0;
    std::size_t quorum = 0;
    double per_validator_detection = 0.0;            // share of honest samples that hit a tampered record
    double per_validator_detection_given_tamper = 0.0;  // same, over trials with at least one tampered record
    double per_validator_analytic = 0.0;              // 1 - (1 - f)^sample_size
    double quorum_detection = 0.0;  // at least `quorum` honest validators detect
    double any_detection = 0.0;     // at least one honest validator detects
    double blocked = 0.0;           // approvals fall short of quorum
    double quorum_detection_analytic = 0.0;
};

TamperReport detect_tamper(const std::vector<ValidatorSpec>& validators, double tampered_fraction,
                           const TamperOptions& options = {});

nlohmann::ordered_json to_json(const TamperReport& report);

}  // namespace zscore::quorum
