#include "zscore/store.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "zscore/common.hpp"
#include "zscore/config_io.hpp"

namespace zscore::attest {
namespace {

constexpr const char* kStoreFile = "scores.kv";

std::string epoch_prefix(std::uint64_t epoch) {
    char buffer[32];
    std::snprintf(buffer, sizeof buffer, "e/%020llu/", static_cast<unsigned long long>(epoch));
    return buffer;
}

std::string wallet_key(std::uint64_t epoch, const std::string& wallet) { return epoch_prefix(epoch) + "w/" + wallet; }

std::string level_key(std::uint64_t epoch, std::size_t level) {
    char buffer[16];
    std::snprintf(buffer, sizeof buffer, "%04zu", level);
    return epoch_prefix(epoch) + "tree/" + buffer;
}

void check_wallet(const std::string& wallet) {
    if (wallet.empty() || wallet.find_first_of("\t\r\n") != std::string::npos) {
        throw Error(ErrorCode::InvalidArgument, "wallet ids must be non-empty and free of tabs and newlines");
    }
}

std::string encode_value(const ZScoreRecord& r) {
    nlohmann::ordered_json doc;
    doc["zscore"] = r.zscore;
    doc["cluster_id"] = r.cluster_id;
    return doc.dump();
}

std::string encode_level(const std::vector<Digest>& nodes) {
    std::string out;
    out.reserve(nodes.size() * 64);
    for (const auto& d : nodes) out += to_hex(d);
    return out;
}

std::vector<Digest> decode_level(const std::string& text) {
    if (text.size() % 64 != 0) throw Error(ErrorCode::Malformed, "tree level length");
    std::vector<Digest> out;
    for (std::size_t i = 0; i < text.size(); i += 64) out.push_back(digest_from_hex(std::string_view(text).substr(i, 64)));
    return out;
}

// Keys in [begin, end) of one prefix.
template <typename Map>
auto prefix_range(Map& kv, const std::string& prefix) {
    auto begin = kv.lower_bound(prefix);
    auto end = begin;
    while (end != kv.end() && end->first.compare(0, prefix.size(), prefix) == 0) ++end;
    return std::pair(begin, end);
}

}  // namespace

Digest record_leaf(const ZScoreRecord& record) {
    return leaf_hash(record.wallet, static_cast<std::uint64_t>(record.zscore), record.epoch);
}

bool verify_record(const ZScoreRecord& record, const MerkleProof& proof, const Digest& trusted_root) {
    return fold(record_leaf(record), proof.path) == trusted_root;
}

Digest compute_root(std::vector<ZScoreRecord> records) {
    std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) { return a.wallet < b.wallet; });
    std::vector<Digest> leaves;
    leaves.reserve(records.size());
    for (const auto& r : records) leaves.push_back(record_leaf(r));
    return MerkleTree(std::move(leaves)).root();
}

ScoreStore::ScoreStore(std::filesystem::path directory) : directory_(std::move(directory)) {
    std::filesystem::create_directories(*directory_);
    load();
}

Digest ScoreStore::put_scores(std::vector<ZScoreRecord> records, std::uint64_t epoch) {
    std::set<std::string> seen;
    for (auto& r : records) {
        check_wallet(r.wallet);
        if (r.zscore < kMinScore || r.zscore > kMaxScore) {
            throw Error(ErrorCode::ScoreOutOfRange, r.wallet + " has zscore " + std::to_string(r.zscore));
        }
        if (!seen.insert(r.wallet).second) throw Error(ErrorCode::DuplicateWallet, r.wallet + " appears twice");
        r.epoch = epoch;
    }
    std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) { return a.wallet < b.wallet; });

    EpochIndex index;
    std::vector<Digest> leaves;
    for (const auto& r : records) {
        index.wallets.push_back(r.wallet);
        leaves.push_back(record_leaf(r));
    }
    index.tree = MerkleTree(std::move(leaves));
    const Digest root = index.tree.root();

    std::unique_lock lock(mutex_);
    auto [begin, end] = prefix_range(kv_, epoch_prefix(epoch));
    kv_.erase(begin, end);
    for (const auto& r : records) kv_[wallet_key(epoch, r.wallet)] = encode_value(r);
    const auto& levels = index.tree.levels();
    for (std::size_t l = 0; l < levels.size(); ++l) kv_[level_key(epoch, l)] = encode_level(levels[l]);
    kv_[epoch_prefix(epoch) + "root"] = to_hex(root);
    index_[epoch] = std::move(index);
    save();
    return root;
}

const ScoreStore::EpochIndex& ScoreStore::index_locked(std::uint64_t epoch) const {
    auto it = index_.find(epoch);
    if (it == index_.end()) throw Error(ErrorCode::NotFound, "epoch " + std::to_string(epoch) + " not committed");
    return it->second;
}

std::optional<ZScoreRecord> ScoreStore::get_locked(const std::string& wallet, std::uint64_t epoch) const {
    auto it = kv_.find(wallet_key(epoch, wallet));
    if (it == kv_.end()) return std::nullopt;
    const auto doc = nlohmann::json::parse(it->second);
    return ZScoreRecord{wallet, doc.at("zscore").get<int>(), epoch, doc.at("cluster_id").get<int>()};
}

std::optional<ZScoreRecord> ScoreStore::get(const std::string& wallet, std::uint64_t epoch) const {
    std::shared_lock lock(mutex_);
    return get_locked(wallet, epoch);
}

MerkleProof ScoreStore::get_proof(const std::string& wallet, std::uint64_t epoch) const {
    std::shared_lock lock(mutex_);
    const auto& index = index_locked(epoch);
    auto it = std::lower_bound(index.wallets.begin(), index.wallets.end(), wallet);
    const auto record = get_locked(wallet, epoch);
    if (it == index.wallets.end() || *it != wallet || !record) {
        throw Error(ErrorCode::NotFound, wallet + " not stored at epoch " + std::to_string(epoch));
    }
    MerkleProof proof;
    proof.wallet = wallet;
    proof.leaf = record_leaf(*record);
    proof.path = index.tree.path(static_cast<std::size_t>(it - index.wallets.begin()));
    proof.root = index.tree.root();
    proof.epoch = epoch;
    return proof;
}

std::vector<ZScoreRecord> ScoreStore::records(std::uint64_t epoch) const {
    std::shared_lock lock(mutex_);
    std::vector<ZScoreRecord> out;
    const auto prefix = epoch_prefix(epoch) + "w/";
    auto [begin, end] = prefix_range(kv_, prefix);
    for (auto it = begin; it != end; ++it) out.push_back(*get_locked(it->first.substr(prefix.size()), epoch));
    return out;
}

bool ScoreStore::has_epoch(std::uint64_t epoch) const {
    std::shared_lock lock(mutex_);
    return index_.contains(epoch);
}

std::vector<std::uint64_t> ScoreStore::epochs() const {
    std::shared_lock lock(mutex_);
    std::vector<std::uint64_t> out;
    for (const auto& [epoch, _] : index_) out.push_back(epoch);
    return out;
}

Digest ScoreStore::root(std::uint64_t epoch) const {
    std::shared_lock lock(mutex_);
    return index_locked(epoch).tree.root();
}

Digest ScoreStore::recompute_root(std::uint64_t epoch) const {
    if (!has_epoch(epoch)) throw Error(ErrorCode::NotFound, "epoch " + std::to_string(epoch) + " not committed");
    return compute_root(records(epoch));
}

void ScoreStore::tamper(const std::string& wallet, std::uint64_t epoch, int zscore) {
    std::unique_lock lock(mutex_);
    auto record = get_locked(wallet, epoch);
    if (!record) throw Error(ErrorCode::NotFound, wallet + " not stored at epoch " + std::to_string(epoch));
    record->zscore = zscore;
    kv_[wallet_key(epoch, wallet)] = encode_value(*record);
    save();
}

std::map<std::string, std::string> ScoreStore::snapshot() const {
    std::shared_lock lock(mutex_);
    return kv_;
}

void ScoreStore::save() const {
    if (!directory_) return;
    std::ostringstream out;
    for (const auto& [key, value] : kv_) out << key << '\t' << value << '\n';
    write_file_atomic(*directory_ / kStoreFile, out.str());
}

void ScoreStore::load() {
    const auto path = *directory_ / kStoreFile;
    if (!std::filesystem::exists(path)) return;
    std::istringstream in(read_file(path));
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw Error(ErrorCode::Malformed, path.string() + ": line without tab");
        kv_[line.substr(0, tab)] = line.substr(tab + 1);
    }

    // Rebuild the per-epoch indexes from the persisted levels and wallet keys.
    std::map<std::uint64_t, std::vector<std::vector<Digest>>> levels;
    for (const auto& [key, value] : kv_) {
        if (key.size() < 23 || key.compare(0, 2, "e/") != 0) continue;
        const auto epoch = parse_u64(std::string_view(key).substr(2, 20));
        const auto rest = key.substr(23);
        if (rest.rfind("tree/", 0) == 0) {
            levels[epoch].push_back(decode_level(value));
        } else if (rest.rfind("w/", 0) == 0) {
            index_[epoch].wallets.push_back(rest.substr(2));
        } else if (rest == "root") {
            index_[epoch];
        }
    }
    for (auto& [epoch, index] : index_) {
        index.tree = MerkleTree::from_levels(std::move(levels[epoch]));
        if (to_hex(index.tree.root()) != kv_.at(epoch_prefix(epoch) + "root")) {
            throw Error(ErrorCode::Malformed, "stored tree of epoch " + std::to_string(epoch) + " does not match its root");
        }
    }
}

}  // namespace zscore::attest
