#include "zscore/quorum.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <set>
#include <thread>

#include "zscore/common.hpp"
#include "zscore/config_io.hpp"
#include "zscore/rng.hpp"

namespace zscore::quorum {
namespace {

// Votes travel as immutable messages through one mailbox per round.
class Mailbox {
public:
    void post(ValidatorVote vote) {
        std::lock_guard lock(mutex_);
        votes_.push_back(std::move(vote));
    }

    std::vector<ValidatorVote> drain() {
        std::lock_guard lock(mutex_);
        auto out = std::move(votes_);
        votes_.clear();
        return out;
    }

private:
    std::mutex mutex_;
    std::vector<ValidatorVote> votes_;
};

std::size_t sample_size(double fraction, std::size_t n) {
    return std::min(n, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-12)));
}

// First `m` entries of `items` become a uniform sample without replacement.
template <typename T>
void partial_shuffle(std::vector<T>& items, std::size_t m, Rng& rng) {
    for (std::size_t i = 0; i < m; ++i) std::swap(items[i], items[i + rng.index(items.size() - i)]);
}

ValidatorVote cast_vote(const ValidatorSpec& spec, const attest::ScoreStore& store,
                        const std::vector<attest::ZScoreRecord>& records, const attest::Digest& proposed,
                        std::uint64_t epoch) {
    ValidatorVote vote;
    vote.validator_id = spec.id;
    vote.epoch = epoch;
    vote.claimed_root = proposed;
    switch (spec.behavior) {
        case Behavior::RejectAll:
            vote.approve = false;
            break;
        case Behavior::CorruptRecompute:
            vote.claimed_root[0] ^= 0x01;
            vote.approve = true;
            break;
        case Behavior::Honest: {
            const std::size_t m = sample_size(spec.sample_fraction, records.size());
            std::vector<std::size_t> order(records.size());
            std::iota(order.begin(), order.end(), 0);
            Rng rng(derive_seed(spec.seed, epoch));
            partial_shuffle(order, m, rng);
            for (std::size_t i = 0; i < m; ++i) {
                const auto& record = records[order[i]];
                if (!attest::verify_record(record, store.get_proof(record.wallet, epoch), proposed)) ++vote.failed;
            }
            vote.sampled = m;
            vote.approve = records.empty() ? proposed == attest::empty_root() : vote.failed == 0;
            break;
        }
        case Behavior::Silent:
            break;
    }
    return vote;
}

double log_choose(double n, double k) { return std::lgamma(n + 1) - std::lgamma(k + 1) - std::lgamma(n - k + 1); }

// P(X >= q) for X ~ Binomial(h, p).
double binomial_tail(std::size_t h, double p, std::size_t q) {
    if (q == 0) return 1.0;
    if (q > h) return 0.0;
    double total = 0.0;
    for (std::size_t k = q; k <= h; ++k) {
        const double kk = static_cast<double>(k);
        const double hh = static_cast<double>(h);
        double term = std::exp(log_choose(hh, kk)) * std::pow(p, kk) * std::pow(1.0 - p, hh - kk);
        total += term;
    }
    return std::min(1.0, total);
}

}  // namespace

std::string_view to_string(Behavior behavior) {
    switch (behavior) {
        case Behavior::Honest: return "honest";
        case Behavior::RejectAll: return "reject_all";
        case Behavior::CorruptRecompute: return "corrupt_recompute";
        case Behavior::Silent: return "silent";
    }
    return "honest";
}

Behavior parse_behavior(std::string_view text) {
    for (auto b : {Behavior::Honest, Behavior::RejectAll, Behavior::CorruptRecompute, Behavior::Silent}) {
        if (to_string(b) == text) return b;
    }
    throw Error(ErrorCode::InvalidArgument, "unknown validator behavior '" + std::string(text) + "'");
}

void ValidatorSpec::validate() const {
    if (id.empty()) throw Error(ErrorCode::InvalidArgument, "validator id must be non-empty");
    if (!(sample_fraction > 0.0 && sample_fraction <= 1.0)) {
        throw Error(ErrorCode::InvalidArgument, "validator " + id + ": sample_fraction must be in (0, 1]");
    }
}

std::vector<ValidatorSpec> roster_from_json(const nlohmann::json& doc) {
    std::vector<ValidatorSpec> out;
    try {
        for (const auto& v : doc.at("validators")) {
            ValidatorSpec spec;
            spec.id = v.at("id").get<std::string>();
            if (v.contains("behavior")) spec.behavior = parse_behavior(v.at("behavior").get<std::string>());
            if (v.contains("sample_fraction")) spec.sample_fraction = v.at("sample_fraction").get<double>();
            if (v.contains("seed")) spec.seed = v.at("seed").get<std::uint64_t>();
            spec.validate();
            out.push_back(spec);
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Malformed, std::string("validator roster: ") + e.what());
    }
    return out;
}

std::vector<ValidatorSpec> load_roster(const std::filesystem::path& path) {
    return roster_from_json(load_config_document(path));
}

std::size_t quorum_threshold(std::size_t n) { return (2 * n + 2) / 3; }

nlohmann::ordered_json to_json(const QuorumResult& result) {
    nlohmann::ordered_json votes = nlohmann::ordered_json::array();
    for (const auto& v : result.votes) {
        votes.push_back({{"validator_id", v.validator_id},
                         {"epoch", v.epoch},
                         {"claimed_root", attest::to_hex(v.claimed_root)},
                         {"approve", v.approve},
                         {"sampled", v.sampled},
                         {"failed", v.failed}});
    }
    nlohmann::ordered_json doc;
    doc["epoch"] = result.epoch;
    doc["proposed_root"] = attest::to_hex(result.proposed_root);
    doc["approvals"] = result.approvals;
    doc["total_validators"] = result.total_validators;
    doc["quorum"] = quorum_threshold(result.total_validators);
    doc["published"] = result.published;
    doc["votes"] = std::move(votes);
    doc["silent"] = result.silent;
    doc["slashable"] = result.slashable;
    return doc;
}

ChainEntry ChainStub::publish(std::uint64_t epoch, const attest::Digest& root) {
    std::lock_guard lock(mutex_);
    for (const auto& e : entries_) {
        if (e.epoch == epoch) throw Error(ErrorCode::AlreadyPublished, "epoch " + std::to_string(epoch) + " already has a root");
    }
    const ChainEntry entry{epoch, root, entries_.size() + 1};
    entries_.push_back(entry);
    return entry;
}

std::optional<attest::Digest> ChainStub::root_for(std::uint64_t epoch) const {
    std::lock_guard lock(mutex_);
    for (const auto& e : entries_) {
        if (e.epoch == epoch) return e.root;
    }
    return std::nullopt;
}

std::vector<ChainEntry> ChainStub::log() const {
    std::lock_guard lock(mutex_);
    return entries_;
}

std::size_t ChainStub::size() const {
    std::lock_guard lock(mutex_);
    return entries_.size();
}

void ChainStub::save(const std::filesystem::path& path) const {
    nlohmann::ordered_json doc = nlohmann::ordered_json::array();
    for (const auto& e : log()) doc.push_back({{"epoch", e.epoch}, {"root", attest::to_hex(e.root)}, {"timestamp", e.timestamp}});
    write_file_atomic(path, doc.dump(2) + "\n");
}

ChainStub ChainStub::load(const std::filesystem::path& path) {
    ChainStub chain;
    if (!std::filesystem::exists(path)) return chain;
    try {
        for (const auto& e : nlohmann::json::parse(read_file(path))) {
            chain.entries_.push_back({e.at("epoch").get<std::uint64_t>(), attest::digest_from_hex(e.at("root").get<std::string>()),
                                      e.at("timestamp").get<std::uint64_t>()});
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Malformed, path.string() + ": " + e.what());
    }
    return chain;
}

QuorumResult run_epoch(const attest::ScoreStore& store, const std::vector<ValidatorSpec>& validators, ChainStub& chain,
                       std::uint64_t epoch, const EpochOptions& options) {
    if (validators.empty()) throw Error(ErrorCode::NoValidators, "no validators registered");
    std::set<std::string> ids;
    for (const auto& v : validators) {
        v.validate();
        if (!ids.insert(v.id).second) throw Error(ErrorCode::InvalidArgument, "duplicate validator id " + v.id);
    }
    if (chain.root_for(epoch)) throw Error(ErrorCode::AlreadyPublished, "epoch " + std::to_string(epoch) + " already published");

    QuorumResult result;
    result.epoch = epoch;
    result.proposed_root = options.proposed_root.value_or(store.root(epoch));
    result.total_validators = validators.size();
    const auto records = store.records(epoch);

    Mailbox mailbox;
    auto act = [&](const ValidatorSpec& spec) {
        if (spec.behavior == Behavior::Silent) return;
        mailbox.post(cast_vote(spec, store, records, result.proposed_root, epoch));
    };
    if (options.parallel) {
        std::vector<std::jthread> threads;
        threads.reserve(validators.size());
        for (const auto& spec : validators) threads.emplace_back(act, std::cref(spec));
    } else {
        for (const auto& spec : validators) act(spec);
    }

    // Delivery order is fixed by validator id, whatever order the votes arrived in.
    result.votes = mailbox.drain();
    std::sort(result.votes.begin(), result.votes.end(),
              [](const auto& a, const auto& b) { return a.validator_id < b.validator_id; });
    std::set<std::string> voted;
    for (const auto& vote : result.votes) {
        voted.insert(vote.validator_id);
        if (!vote.approve) continue;
        if (vote.claimed_root == result.proposed_root) {
            ++result.approvals;
        } else {
            result.slashable.push_back(vote.validator_id);
        }
    }
    for (const auto& id : ids) {
        if (!voted.contains(id)) result.silent.push_back(id);
    }

    result.published = result.approvals >= quorum_threshold(result.total_validators);
    if (result.published) chain.publish(epoch, result.proposed_root);
    return result;
}

ScoreResponse serve_score(const attest::ScoreStore& store, const ChainStub& chain, const std::string& wallet,
                          std::uint64_t epoch) {
    const auto root = chain.root_for(epoch);
    if (!root) throw Error(ErrorCode::EpochNotPublished, "epoch " + std::to_string(epoch) + " has no published root");
    const auto record = store.get(wallet, epoch);
    if (!record) throw Error(ErrorCode::WalletNotFound, wallet + " has no score at epoch " + std::to_string(epoch));
    ScoreResponse response;
    response.record = *record;
    response.proof = store.get_proof(wallet, epoch);
    response.root = *root;
    response.verified = attest::verify_record(*record, response.proof, *root) && attest::verify_proof(response.proof, *root);
    return response;
}

nlohmann::ordered_json to_json(const ScoreResponse& response) {
    nlohmann::ordered_json doc;
    doc["wallet"] = response.record.wallet;
    doc["epoch"] = response.record.epoch;
    doc["zscore"] = response.record.zscore;
    doc["cluster_id"] = response.record.cluster_id;
    doc["proof"] = attest::to_json(response.proof);
    doc["root"] = attest::to_hex(response.root);
    doc["verified"] = response.verified;
    return doc;
}

std::string handle_query(const attest::ScoreStore& store, const ChainStub& chain, std::string_view request) {
    try {
        const auto doc = nlohmann::json::parse(request);
        if (!doc.is_object() || !doc.contains("wallet") || !doc.contains("epoch")) {
            throw Error(ErrorCode::MissingField, "request needs wallet and epoch");
        }
        return to_json(serve_score(store, chain, doc.at("wallet").get<std::string>(), doc.at("epoch").get<std::uint64_t>()))
            .dump();
    } catch (const Error& e) {
        return nlohmann::ordered_json{{"error", to_string(e.code())}, {"message", e.what()}}.dump();
    } catch (const nlohmann::json::exception& e) {
        return nlohmann::ordered_json{{"error", to_string(ErrorCode::Malformed)}, {"message", e.what()}}.dump();
    }
}

void serve_stdio(const attest::ScoreStore& store, const ChainStub& chain, std::istream& in, std::ostream& out) {
    std::string line;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        out << handle_query(store, chain, line) << '\n' << std::flush;
    }
}

TamperReport detect_tamper(const std::vector<ValidatorSpec>& validators, double tampered_fraction,
                           const TamperOptions& options) {
    if (validators.empty()) throw Error(ErrorCode::NoValidators, "no validators registered");
    if (!(tampered_fraction >= 0.0 && tampered_fraction < 1.0)) {
        throw Error(ErrorCode::InvalidArgument, "tampered_fraction must be in [0, 1)");
    }
    if (options.trials == 0 || options.n_records == 0) throw Error(ErrorCode::InvalidArgument, "need records and trials");

    std::vector<const ValidatorSpec*> honest;
    for (const auto& v : validators) {
        v.validate();
        if (v.behavior == Behavior::Honest) honest.push_back(&v);
    }

    const std::size_t n = options.n_records;
    TamperReport report;
    report.n_records = n;
    report.tampered_fraction = tampered_fraction;
    report.trials = options.trials;
    report.honest = honest.size();
    report.quorum = quorum_threshold(validators.size());
    // Honest validators may differ in sample fraction; the analytic columns use the first one.
    report.sample_size = honest.empty() ? 0 : sample_size(honest.front()->sample_fraction, n);
    report.per_validator_analytic = 1.0 - std::pow(1.0 - tampered_fraction, static_cast<double>(report.sample_size));

    Rng rng(options.seed);
    std::vector<char> tampered(n);
    std::vector<std::size_t> order(n);
    std::size_t hits = 0;
    std::size_t hits_given = 0;
    std::size_t draws_given = 0;
    std::size_t quorum_hits = 0;
    std::size_t any_hits = 0;
    std::size_t blocked = 0;
    for (std::size_t trial = 0; trial < options.trials; ++trial) {
        std::size_t count = 0;
        for (auto& t : tampered) {
            t = rng.uniform() < tampered_fraction ? 1 : 0;
            count += static_cast<std::size_t>(t);
        }
        std::size_t detectors = 0;
        for (const auto* v : honest) {
            std::iota(order.begin(), order.end(), 0);
            const std::size_t m = sample_size(v->sample_fraction, n);
            partial_shuffle(order, m, rng);
            bool hit = false;
            for (std::size_t i = 0; i < m && !hit; ++i) hit = tampered[order[i]] != 0;
            detectors += hit ? 1 : 0;
        }
        hits += detectors;
        if (count > 0) {
            hits_given += detectors;
            draws_given += honest.size();
        }
        if (detectors >= report.quorum) ++quorum_hits;
        if (detectors >= 1) ++any_hits;
        // Only honest validators that found nothing approve the tampered root.
        if (honest.size() - detectors < report.quorum) ++blocked;
    }

    const auto trials = static_cast<double>(options.trials);
    if (!honest.empty()) report.per_validator_detection = static_cast<double>(hits) / (trials * static_cast<double>(honest.size()));
    if (draws_given > 0) report.per_validator_detection_given_tamper = static_cast<double>(hits_given) / static_cast<double>(draws_given);
    report.quorum_detection = static_cast<double>(quorum_hits) / trials;
    report.any_detection = static_cast<double>(any_hits) / trials;
    report.blocked = static_cast<double>(blocked) / trials;

    // Exact value: mix over the tampered count T ~ Binomial(n, f); given T, each
    // validator misses with the hypergeometric probability C(n-T, m) / C(n, m).
    if (!honest.empty() && tampered_fraction > 0.0) {
        const double nn = static_cast<double>(n);
        const double m = static_cast<double>(report.sample_size);
        double total = 0.0;
        for (std::size_t t = 0; t <= n; ++t) {
            const double tt = static_cast<double>(t);
            const double weight =
                std::exp(log_choose(nn, tt) + tt * std::log(tampered_fraction) + (nn - tt) * std::log1p(-tampered_fraction));
            if (weight < 1e-300) continue;
            const double miss = nn - tt < m ? 0.0 : std::exp(log_choose(nn - tt, m) - log_choose(nn, m));
            total += weight * binomial_tail(honest.size(), 1.0 - miss, report.quorum);
        }
        report.quorum_detection_analytic = std::min(1.0, total);
    }
    return report;
}

nlohmann::ordered_json to_json(const TamperReport& r) {
    nlohmann::ordered_json doc;
    doc["n_records"] = r.n_records;
    doc["tampered_fraction"] = r.tampered_fraction;
    doc["trials"] = r.trials;
    doc["sample_size"] = r.sample_size;
    doc["honest"] = r.honest;
    doc["quorum"] = r.quorum;
    doc["per_validator_detection"] = r.per_validator_detection;
    doc["per_validator_detection_given_tamper"] = r.per_validator_detection_given_tamper;
    doc["per_validator_analytic"] = r.per_validator_analytic;
    doc["quorum_detection"] = r.quorum_detection;
    doc["quorum_detection_analytic"] = r.quorum_detection_analytic;
    doc["any_detection"] = r.any_detection;
    doc["blocked"] = r.blocked;
    return doc;
}

}  // namespace zscore::quorum
