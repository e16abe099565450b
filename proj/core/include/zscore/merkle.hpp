#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace zscore::attest {

using Digest = std::array<std::uint8_t, 32>;

Digest sha256(std::span<const std::uint8_t> bytes);
Digest sha256(std::string_view text);

std::string to_hex(const Digest& digest);
/// Parses 64 hex characters (either case); throws Malformed otherwise.
Digest digest_from_hex(std::string_view hex);

/// H(0x00 || wallet || zscore u64 LE || epoch u64 LE)
Digest leaf_hash(std::string_view wallet, std::uint64_t zscore, std::uint64_t epoch);
/// H(0x01 || left || right)
Digest parent_hash(const Digest& left, const Digest& right);
/// H(0x02)
Digest empty_root();

enum class Side { Left, Right };  // where the sibling sits relative to the running hash

std::string_view to_string(Side side);

struct ProofStep {
    Digest hash{};
    Side side = Side::Left;

    friend bool operator==(const ProofStep&, const ProofStep&) = default;
};

struct MerkleProof {
    std::string wallet;
    Digest leaf{};
    std::vector<ProofStep> path;
    Digest root{};
    std::uint64_t epoch = 0;

    friend bool operator==(const MerkleProof&, const MerkleProof&) = default;
};

/// Folds `leaf` along `path`.
Digest fold(const Digest& leaf, const std::vector<ProofStep>& path);

/// True iff folding the proof's leaf reproduces `trusted_root`.
bool verify_proof(const MerkleProof& proof, const Digest& trusted_root);

nlohmann::ordered_json to_json(const MerkleProof& proof);
MerkleProof proof_from_json(const nlohmann::json& doc);

/// Binary Merkle tree over leaves in the order given. An odd node at the end
/// of a level is promoted unchanged to the next level.
class MerkleTree {
public:
    MerkleTree() : MerkleTree(std::vector<Digest>{}) {}
    explicit MerkleTree(std::vector<Digest> leaves);

    const Digest& root() const { return root_; }
    std::size_t size() const { return levels_.front().size(); }
    const std::vector<Digest>& leaves() const { return levels_.front(); }
    const std::vector<std::vector<Digest>>& levels() const { return levels_; }

    std::vector<ProofStep> path(std::size_t index) const;

    /// Rebuilds a tree from previously stored levels without rehashing.
    static MerkleTree from_levels(std::vector<std::vector<Digest>> levels);

private:
    MerkleTree(std::vector<std::vector<Digest>> levels, Digest root) : levels_(std::move(levels)), root_(root) {}

    std::vector<std::vector<Digest>> levels_;
    Digest root_{};
};

}  // namespace zscore::attest
