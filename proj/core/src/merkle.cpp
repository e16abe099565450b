#include "zscore/merkle.hpp"

#include <openssl/evp.h>

#include <memory>

#include "zscore/common.hpp"

namespace zscore::attest {
namespace {

constexpr std::uint8_t kLeafTag = 0x00;
constexpr std::uint8_t kNodeTag = 0x01;
constexpr std::uint8_t kEmptyTag = 0x02;

struct MdCtxDeleter {
    void operator()(EVP_MD_CTX* ctx) const { EVP_MD_CTX_free(ctx); }
};

class Hasher {
public:
    Hasher() : ctx_(EVP_MD_CTX_new()) {
        if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) {
            throw Error(ErrorCode::Io, "SHA-256 initialisation failed");
        }
    }

    Hasher& update(const void* data, std::size_t size) {
        if (size > 0 && EVP_DigestUpdate(ctx_.get(), data, size) != 1) throw Error(ErrorCode::Io, "SHA-256 update failed");
        return *this;
    }

    Digest finish() {
        Digest out{};
        unsigned int size = 0;
        if (EVP_DigestFinal_ex(ctx_.get(), out.data(), &size) != 1 || size != out.size()) {
            throw Error(ErrorCode::Io, "SHA-256 finalisation failed");
        }
        return out;
    }

private:
    std::unique_ptr<EVP_MD_CTX, MdCtxDeleter> ctx_;
};

std::array<std::uint8_t, 8> le64(std::uint64_t v) {
    std::array<std::uint8_t, 8> out{};
    for (std::size_t i = 0; i < 8; ++i) out[i] = static_cast<std::uint8_t>(v >> (8 * i));
    return out;
}

int hex_value(char c) {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
}

}  // namespace

Digest sha256(std::span<const std::uint8_t> bytes) { return Hasher().update(bytes.data(), bytes.size()).finish(); }

Digest sha256(std::string_view text) { return Hasher().update(text.data(), text.size()).finish(); }

std::string to_hex(const Digest& digest) { return zscore::to_hex(digest.data(), digest.size()); }

Digest digest_from_hex(std::string_view hex) {
    if (hex.size() != 64) throw Error(ErrorCode::Malformed, "digest must be 64 hex characters");
    Digest out{};
    for (std::size_t i = 0; i < out.size(); ++i) {
        const int hi = hex_value(hex[2 * i]);
        const int lo = hex_value(hex[2 * i + 1]);
        if (hi < 0 || lo < 0) throw Error(ErrorCode::Malformed, "invalid hex digit in digest");
        out[i] = static_cast<std::uint8_t>(hi * 16 + lo);
    }
    return out;
}

Digest leaf_hash(std::string_view wallet, std::uint64_t zscore, std::uint64_t epoch) {
    const auto score = le64(zscore);
    const auto round = le64(epoch);
    return Hasher()
        .update(&kLeafTag, 1)
        .update(wallet.data(), wallet.size())
        .update(score.data(), score.size())
        .update(round.data(), round.size())
        .finish();
}

Digest parent_hash(const Digest& left, const Digest& right) {
    return Hasher().update(&kNodeTag, 1).update(left.data(), left.size()).update(right.data(), right.size()).finish();
}

Digest empty_root() { return Hasher().update(&kEmptyTag, 1).finish(); }

std::string_view to_string(Side side) { return side == Side::Left ? "left" : "right"; }

Digest fold(const Digest& leaf, const std::vector<ProofStep>& path) {
    Digest running = leaf;
    for (const auto& step : path) {
        running = step.side == Side::Left ? parent_hash(step.hash, running) : parent_hash(running, step.hash);
    }
    return running;
}

bool verify_proof(const MerkleProof& proof, const Digest& trusted_root) { return fold(proof.leaf, proof.path) == trusted_root; }

nlohmann::ordered_json to_json(const MerkleProof& proof) {
    nlohmann::ordered_json path = nlohmann::ordered_json::array();
    for (const auto& step : proof.path) path.push_back({{"hash", to_hex(step.hash)}, {"side", to_string(step.side)}});
    nlohmann::ordered_json doc;
    doc["wallet"] = proof.wallet;
    doc["leaf"] = to_hex(proof.leaf);
    doc["path"] = std::move(path);
    doc["root"] = to_hex(proof.root);
    doc["epoch"] = proof.epoch;
    return doc;
}

MerkleProof proof_from_json(const nlohmann::json& doc) {
    try {
        MerkleProof proof;
        proof.wallet = doc.at("wallet").get<std::string>();
        proof.leaf = digest_from_hex(doc.at("leaf").get<std::string>());
        proof.root = digest_from_hex(doc.at("root").get<std::string>());
        proof.epoch = doc.at("epoch").get<std::uint64_t>();
        for (const auto& step : doc.at("path")) {
            const auto side = step.at("side").get<std::string>();
            if (side != "left" && side != "right") throw Error(ErrorCode::Malformed, "proof side '" + side + "'");
            proof.path.push_back({digest_from_hex(step.at("hash").get<std::string>()), side == "left" ? Side::Left : Side::Right});
        }
        return proof;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Malformed, std::string("proof JSON: ") + e.what());
    }
}

MerkleTree::MerkleTree(std::vector<Digest> leaves) {
    levels_.push_back(std::move(leaves));
    while (levels_.back().size() > 1) {
        const auto& level = levels_.back();
        std::vector<Digest> next;
        next.reserve((level.size() + 1) / 2);
        for (std::size_t i = 0; i + 1 < level.size(); i += 2) next.push_back(parent_hash(level[i], level[i + 1]));
        if (level.size() % 2 == 1) next.push_back(level.back());
        levels_.push_back(std::move(next));
    }
    root_ = levels_.back().empty() ? empty_root() : levels_.back().front();
}

MerkleTree MerkleTree::from_levels(std::vector<std::vector<Digest>> levels) {
    if (levels.empty()) levels.emplace_back();
    const Digest root = levels.back().empty() ? empty_root() : levels.back().front();
    return MerkleTree(std::move(levels), root);
}

std::vector<ProofStep> MerkleTree::path(std::size_t index) const {
    if (index >= size()) throw Error(ErrorCode::NotFound, "leaf index " + std::to_string(index) + " out of range");
    std::vector<ProofStep> out;
    for (std::size_t level = 0; level + 1 < levels_.size(); ++level) {
        const auto& nodes = levels_[level];
        const std::size_t sibling = index ^ 1U;
        if (sibling < nodes.size()) out.push_back({nodes[sibling], sibling < index ? Side::Left : Side::Right});
        index /= 2;
    }
    return out;
}

}  // namespace zscore::attest
