#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "zscore/merkle.hpp"

namespace zscore::attest {

struct ZScoreRecord {
    std::string wallet;
    int zscore = 0;
    std::uint64_t epoch = 0;
    int cluster_id = 0;

    friend bool operator==(const ZScoreRecord&, const ZScoreRecord&) = default;
};

/// Ordered key-value store of score records with a Merkle tree per epoch.
///
/// Keys are epoch-prefixed so every epoch stays readable:
///   e/<epoch, 20 digits>/root            committed root (hex)
///   e/<epoch, 20 digits>/tree/<level>    concatenated node hashes of one tree level
///   e/<epoch, 20 digits>/w/<wallet>      {"zscore": .., "cluster_id": ..}
/// A directory-backed store keeps the table in `scores.kv`, one
/// tab-separated key/value pair per line in key order.
///
/// Commits are single-writer; reads of sealed epochs may run concurrently.
class ScoreStore {
public:
    ScoreStore() = default;
    explicit ScoreStore(std::filesystem::path directory);

    ScoreStore(const ScoreStore&) = delete;
    ScoreStore& operator=(const ScoreStore&) = delete;

    /// Commits one epoch and returns its root. Each record's epoch is set to
    /// `epoch`; committing an epoch again replaces it.
    Digest put_scores(std::vector<ZScoreRecord> records, std::uint64_t epoch);

    /// Proof for the record as currently stored, folded along the tree built
    /// at commit time. A record changed after commit no longer verifies.
    MerkleProof get_proof(const std::string& wallet, std::uint64_t epoch) const;

    std::optional<ZScoreRecord> get(const std::string& wallet, std::uint64_t epoch) const;

    /// Records of one epoch in canonical (wallet byte) order.
    std::vector<ZScoreRecord> records(std::uint64_t epoch) const;

    bool has_epoch(std::uint64_t epoch) const;
    std::vector<std::uint64_t> epochs() const;

    /// Root recorded at commit time.
    Digest root(std::uint64_t epoch) const;

    /// Root rebuilt from the records as they are stored now.
    Digest recompute_root(std::uint64_t epoch) const;

    /// Overwrites a stored score without recommitting, as an attacker with
    /// database access would. Used by the tamper simulations.
    void tamper(const std::string& wallet, std::uint64_t epoch, int zscore);

    /// Raw key-value view, in key order.
    std::map<std::string, std::string> snapshot() const;

private:
    struct EpochIndex {
        std::vector<std::string> wallets;  // canonical order, position = leaf index
        MerkleTree tree;
    };

    void load();
    void save() const;
    std::optional<ZScoreRecord> get_locked(const std::string& wallet, std::uint64_t epoch) const;
    const EpochIndex& index_locked(std::uint64_t epoch) const;

    std::optional<std::filesystem::path> directory_;
    std::map<std::string, std::string> kv_;
    std::map<std::uint64_t, EpochIndex> index_;
    mutable std::shared_mutex mutex_;
};

Digest record_leaf(const ZScoreRecord& record);

/// Recomputes the record's leaf and checks it against the proof path and root.
bool verify_record(const ZScoreRecord& record, const MerkleProof& proof, const Digest& trusted_root);

/// Root over a record set, independent of any store.
Digest compute_root(std::vector<ZScoreRecord> records);

}  // namespace zscore::attest
