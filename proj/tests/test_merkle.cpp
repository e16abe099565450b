#include <doctest.h>

#include <cmath>

#include "zscore/common.hpp"
#include "zscore/merkle.hpp"

using namespace zscore::attest;

namespace {

Digest hash_bytes(const std::vector<std::uint8_t>& bytes) { return sha256(std::span<const std::uint8_t>(bytes)); }

void append_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

Digest naive_leaf(const std::string& wallet, std::uint64_t zscore, std::uint64_t epoch) {
    std::vector<std::uint8_t> bytes{0x00};
    bytes.insert(bytes.end(), wallet.begin(), wallet.end());
    append_u64(bytes, zscore);
    append_u64(bytes, epoch);
    return hash_bytes(bytes);
}

Digest naive_parent(const Digest& l, const Digest& r) {
    std::vector<std::uint8_t> bytes{0x01};
    bytes.insert(bytes.end(), l.begin(), l.end());
    bytes.insert(bytes.end(), r.begin(), r.end());
    return hash_bytes(bytes);
}

// Pairs neighbours level by level; a trailing odd node moves up as is.
Digest naive_root(std::vector<Digest> level) {
    if (level.empty()) return hash_bytes({0x02});
    while (level.size() > 1) {
        std::vector<Digest> next;
        for (std::size_t i = 0; i + 1 < level.size(); i += 2) next.push_back(naive_parent(level[i], level[i + 1]));
        if (level.size() % 2) next.push_back(level.back());
        level = std::move(next);
    }
    return level[0];
}

std::vector<Digest> leaves(std::size_t n) {
    std::vector<Digest> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(naive_leaf("0x" + std::to_string(i), 100 + i, 1));
    return out;
}

}  // namespace

TEST_SUITE("merkle") {

TEST_CASE("SHA-256 known answers") {
    CHECK(to_hex(sha256("")) == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(to_hex(sha256("abc")) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("hex round trip") {
    const auto d = sha256("x");
    CHECK(digest_from_hex(to_hex(d)) == d);
    std::string upper = to_hex(d);
    for (auto& c : upper) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    CHECK(digest_from_hex(upper) == d);
    CHECK_THROWS_AS(digest_from_hex("abc"), zscore::Error);
    CHECK_THROWS_AS(digest_from_hex(std::string(64, 'g')), zscore::Error);
}

TEST_CASE("domain-separated hashes") {
    CHECK(leaf_hash("0xabc", 321, 7) == naive_leaf("0xabc", 321, 7));
    const auto a = sha256("a"), b = sha256("b");
    CHECK(parent_hash(a, b) == naive_parent(a, b));
    CHECK(parent_hash(a, b) != parent_hash(b, a));
    CHECK(empty_root() == hash_bytes({0x02}));
}

TEST_CASE("empty and single-leaf trees") {
    CHECK(MerkleTree().root() == empty_root());
    CHECK(MerkleTree().size() == 0);
    const auto leaf = leaf_hash("w", 1, 0);
    const MerkleTree one({leaf});
    CHECK(one.root() == leaf);
    CHECK(one.path(0).empty());
}

TEST_CASE("every proof of every tree up to 257 leaves") {
    for (std::size_t n = 1; n <= 257; n += (n < 20 ? 1 : 17)) {
        const auto ls = leaves(n);
        const MerkleTree tree(ls);
        REQUIRE(tree.root() == naive_root(ls));
        const auto depth = static_cast<std::size_t>(std::ceil(std::log2(static_cast<double>(n))));
        for (std::size_t i = 0; i < n; ++i) {
            const auto path = tree.path(i);
            CHECK(path.size() <= depth);
            CHECK(fold(ls[i], path) == tree.root());
            if (n > 1) CHECK(fold(ls[(i + 1) % n], path) != tree.root());
        }
    }
    const MerkleTree full(leaves(257));
    std::size_t longest = 0;
    for (std::size_t i = 0; i < 257; ++i) longest = std::max(longest, full.path(i).size());
    CHECK(longest == 9);
    CHECK(full.path(256).size() == 1);  // the promoted tail joins only at the top
}

TEST_CASE("any flipped bit breaks the proof") {
    const auto ls = leaves(40);
    const MerkleTree tree(ls);
    MerkleProof proof{"0x5", ls[5], tree.path(5), tree.root(), 1};
    REQUIRE(verify_proof(proof, tree.root()));
    for (std::size_t s = 0; s < proof.path.size(); ++s) {
        for (int bit = 0; bit < 8; bit += 3) {
            auto bad = proof;
            bad.path[s].hash[s % 32] ^= static_cast<std::uint8_t>(1u << bit);
            CHECK_FALSE(verify_proof(bad, tree.root()));
        }
        auto swapped = proof;
        swapped.path[s].side = swapped.path[s].side == Side::Left ? Side::Right : Side::Left;
        CHECK_FALSE(verify_proof(swapped, tree.root()));
    }
    auto bad_leaf = proof;
    bad_leaf.leaf[0] ^= 1;
    CHECK_FALSE(verify_proof(bad_leaf, tree.root()));
    CHECK_FALSE(verify_proof(proof, empty_root()));
}

TEST_CASE("proof JSON round trip") {
    const auto ls = leaves(9);
    const MerkleTree tree(ls);
    const MerkleProof proof{"0x3", ls[3], tree.path(3), tree.root(), 4};
    CHECK(proof_from_json(nlohmann::json::parse(to_json(proof).dump())) == proof);
}

TEST_CASE("tree restored from stored levels") {
    const MerkleTree tree(leaves(13));
    const auto restored = MerkleTree::from_levels(tree.levels());
    CHECK(restored.root() == tree.root());
    for (std::size_t i = 0; i < 13; ++i) CHECK(restored.path(i) == tree.path(i));
}

}  // TEST_SUITE
