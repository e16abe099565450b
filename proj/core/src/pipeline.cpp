#include "zscore/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <unistd.h>

#include "zscore/common.hpp"
#include "zscore/config_io.hpp"
#include "zscore/features.hpp"
#include "zscore/labeling.hpp"
#include "zscore/net.hpp"
#include "zscore/pso.hpp"
#include "zscore/quorum.hpp"
#include "zscore/rng.hpp"
#include "zscore/store.hpp"

namespace zscore::pipeline {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr std::uint64_t kClusterStream = 0xC1A5;
constexpr std::uint64_t kNetStream = 0x7EA1;
constexpr std::uint64_t kValidatorStream = 0x0A15;
constexpr std::array<Cohort, 2> kCohorts{Cohort::NonLiquidation, Cohort::Liquidation};

fs::path in_workdir(const RunConfig& config, const std::string& name) { return config.workdir / name; }

// Path of an earlier stage's artifact; throws with the command that makes it.
fs::path require(const RunConfig& config, const std::string& name, std::string_view stage) {
    auto path = in_workdir(config, name);
    if (!fs::exists(path)) {
        throw Error(ErrorCode::NotFound, "missing " + path.string() + "; run `zscore " + std::string(stage) + "` first");
    }
    return path;
}

fs::path require_input(const fs::path& path, std::string_view what) {
    if (path.empty()) throw Error(ErrorCode::InvalidArgument, std::string(what) + " path is not configured");
    if (!fs::exists(path)) throw Error(ErrorCode::NotFound, std::string(what) + " file " + path.string() + " does not exist");
    return path;
}

std::ifstream open_in(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
    return in;
}

template <typename Writer>
void write_artifact(const RunConfig& config, const std::string& name, Writer&& writer) {
    std::ostringstream out;
    writer(out);
    const auto path = in_workdir(config, name);
    fs::create_directories(path.parent_path());
    write_file_atomic(path, out.str());
}

void write_json(const RunConfig& config, const std::string& name, const ordered_json& doc) {
    write_artifact(config, name, [&](std::ostream& out) { out << doc.dump(2) << '\n'; });
}

std::string hash_of(const fs::path& path) {
    if (fs::is_directory(path)) {
        std::string combined;
        std::vector<fs::path> files;
        for (const auto& entry : fs::recursive_directory_iterator(path)) {
            if (entry.is_regular_file()) files.push_back(entry.path());
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) combined += fs::relative(f, path).generic_string() + ':' + file_sha256(f) + '\n';
        return attest::to_hex(attest::sha256(combined));
    }
    return file_sha256(path);
}

// Records one stage in the manifest: seed, input hashes and output hashes.
void record_stage(const RunConfig& config, const std::string& stage, const std::vector<fs::path>& inputs,
                  const std::vector<std::string>& outputs) {
    const auto path = in_workdir(config, artifact::kManifest);
    ordered_json manifest = fs::exists(path) ? ordered_json::parse(read_file(path)) : ordered_json{{"stages", ordered_json::object()}};
    ordered_json entry;
    entry["seed"] = config.seed;
    entry["inputs"] = ordered_json::object();
    for (const auto& input : inputs) {
        if (input.empty() || !fs::exists(input)) continue;
        const auto rel = input.lexically_normal().lexically_relative(config.workdir.lexically_normal());
        const bool inside = !rel.empty() && *rel.begin() != "..";
        const auto key = inside ? rel.generic_string() : input.lexically_normal().generic_string();
        entry["inputs"][key] = hash_of(input);
    }
    entry["outputs"] = ordered_json::object();
    for (const auto& name : outputs) {
        const auto file = in_workdir(config, name);
        if (fs::exists(file)) entry["outputs"][name] = hash_of(file);
    }
    manifest["stages"][stage] = entry;
    write_json(config, artifact::kManifest, manifest);
}

std::vector<std::string> read_lines(const fs::path& path) {
    auto in = open_in(path);
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) out.push_back(line);
    }
    return out;
}

struct CohortTable {
    std::map<std::string, std::string> cohort_of;  // wallet -> cohort name or "dropped"
};

CohortTable read_cohorts(const RunConfig& config) {
    CohortTable table;
    const auto lines = read_lines(require(config, artifact::kCohorts, "ingest"));
    for (std::size_t i = 1; i < lines.size(); ++i) {
        std::stringstream ss(lines[i]);
        std::string wallet, cohort;
        std::getline(ss, wallet, ',');
        std::getline(ss, cohort, ',');
        table.cohort_of[wallet] = cohort;
    }
    return table;
}

std::vector<features::UserFeatureVector> read_features(const RunConfig& config) {
    auto in = open_in(require(config, artifact::kFeatures, "features"));
    return features::read_features_csv(in);
}

features::ScalingParams read_scaling(const RunConfig& config) {
    return features::scaling_from_json(nlohmann::json::parse(read_file(require(config, artifact::kScaling, "features"))));
}

label::RulePolicy policy_for(const RunConfig& config) {
    if (config.policy.empty()) return {};
    return label::load_policy(require_input(config.policy, "policy").string());
}

net::NetConfig net_config_for(const RunConfig& config) {
    net::NetConfig net = config.net.empty() ? net::NetConfig{} : net::load_config(require_input(config.net, "network config").string());
    net.seed = derive_seed(config.seed, kNetStream);
    net.validate();
    return net;
}

std::vector<quorum::ValidatorSpec> validators_for(const RunConfig& config) {
    std::vector<quorum::ValidatorSpec> roster;
    if (config.validators.empty()) {
        for (int i = 1; i <= 3; ++i) roster.push_back({"v" + std::to_string(i), quorum::Behavior::Honest, 0.1, static_cast<std::uint64_t>(i)});
    } else {
        roster = quorum::load_roster(require_input(config.validators, "validator roster"));
    }
    for (auto& v : roster) v.seed = derive_seed(derive_seed(config.seed, kValidatorStream), v.seed);
    return roster;
}

// features.csv rows joined with labels.csv and intervals.csv.
label::LabeledDataset read_labeled(const RunConfig& config) {
    const auto vectors = read_features(config);
    auto in = open_in(require(config, artifact::kLabels, "label"));
    const auto table = cluster::read_labels_csv(in);
    std::map<std::string, int> by_wallet;
    for (std::size_t i = 0; i < table.wallets.size(); ++i) by_wallet[table.wallets[i]] = table.labels[i];
    std::vector<int> labels;
    labels.reserve(vectors.size());
    for (const auto& v : vectors) {
        auto it = by_wallet.find(v.wallet);
        if (it == by_wallet.end()) throw Error(ErrorCode::SchemaMismatch, "wallet " + v.wallet + " has no label; rerun `zscore label`");
        labels.push_back(it->second);
    }
    auto intervals_in = open_in(require(config, artifact::kIntervals, "label"));
    return label::label_users(vectors, labels, label::read_intervals_csv(intervals_in));
}

std::vector<net::ScoredRow> read_scores(const RunConfig& config) {
    auto in = open_in(require(config, artifact::kScores, "score"));
    return net::read_scores_jsonl(in);
}

ordered_json sweep_json(const net::SweepReport& sweep) {
    ordered_json doc;
    doc["chosen"] = sweep.chosen;
    doc["entries"] = ordered_json::array();
    for (const auto& e : sweep.entries) {
        doc["entries"].push_back({{"batch_size", e.batch_size}, {"validation_loss", e.validation_loss}, {"epochs_run", e.epochs_run}});
    }
    return doc;
}

std::string path_string(const fs::path& p) { return p.empty() ? std::string() : p.generic_string(); }

fs::path resolve(const nlohmann::json& doc, const char* key, const fs::path& base) {
    if (!doc.contains(key)) return {};
    fs::path p = doc.at(key).get<std::string>();
    if (p.empty()) return {};
    return p.is_absolute() || base.empty() ? p : (base / p).lexically_normal();
}

}  // namespace

std::string_view to_string(Cohort cohort) {
    return cohort == Cohort::Liquidation ? "liquidation" : "non-liquidation";
}

Cohort parse_cohort(std::string_view text) {
    if (text == "liquidation") return Cohort::Liquidation;
    if (text == "non-liquidation") return Cohort::NonLiquidation;
    throw Error(ErrorCode::InvalidArgument, "unknown cohort '" + std::string(text) + "' (liquidation|non-liquidation)");
}

namespace artifact {
std::string clusters_csv(Cohort cohort) { return "clusters-" + std::string(to_string(cohort)) + ".csv"; }
std::string clusters_json(Cohort cohort) { return "clusters-" + std::string(to_string(cohort)) + ".json"; }
std::string epoch_json(std::uint64_t epoch) { return "epoch-" + std::to_string(epoch) + ".json"; }
}  // namespace artifact

void RunConfig::validate() const {
    auto fail = [](const std::string& what) { throw Error(ErrorCode::InvalidArgument, "run config: " + what); };
    for (const auto* s : {&non_liquidation, &liquidation}) {
        if (s->k_lower < 1 || s->k_lower > s->k_upper) fail("cohort k bounds must satisfy 1 <= lower <= upper");
        if (s->particles < 2) fail("particles must be >= 2");
    }
    if (!(eps_bounds[0] > 0.0 && eps_bounds[0] < eps_bounds[1])) fail("eps bounds must satisfy 0 < lower < upper");
    if (!(min_samples_bounds[0] >= 1.0 && min_samples_bounds[0] < min_samples_bounds[1])) fail("min_samples bounds invalid");
    if (pso_iterations < 1) fail("pso_iterations must be >= 1");
    if (!(dominance_threshold > 0.0 && dominance_threshold <= 1.0)) fail("dominance_threshold must be in (0, 1]");
    for (int b : batch_sizes) {
        if (b < 1) fail("batch sizes must be positive");
    }
}

RunConfig config_from_json(const nlohmann::json& doc, const fs::path& base) {
    RunConfig config;
    try {
        config.events = resolve(doc, "events", base);
        config.thresholds = resolve(doc, "thresholds", base);
        config.roster = resolve(doc, "roster", base);
        config.workdir = resolve(doc, "workdir", base);
        config.policy = resolve(doc, "policy", base);
        config.net = resolve(doc, "net", base);
        config.validators = resolve(doc, "validators", base);
        config.overrides = resolve(doc, "overrides", base);
        if (doc.contains("format")) config.format = ledger::parse_format(doc.at("format").get<std::string>());
        if (doc.contains("algorithm")) config.algorithm = cluster::parse_algorithm(doc.at("algorithm").get<std::string>());
        if (doc.contains("cohorts")) {
            for (const auto& [name, table] : doc.at("cohorts").items()) {
                auto& s = parse_cohort(name) == Cohort::Liquidation ? config.liquidation : config.non_liquidation;
                if (table.contains("k")) {
                    const auto k = table.at("k").get<std::array<int, 2>>();
                    s.k_lower = k[0];
                    s.k_upper = k[1];
                }
                if (table.contains("particles")) s.particles = table.at("particles").get<int>();
            }
        }
        if (doc.contains("eps")) config.eps_bounds = doc.at("eps").get<std::array<double, 2>>();
        if (doc.contains("min_samples")) config.min_samples_bounds = doc.at("min_samples").get<std::array<double, 2>>();
        if (doc.contains("pso_iterations")) config.pso_iterations = doc.at("pso_iterations").get<int>();
        if (doc.contains("silhouette_gate")) config.silhouette_gate = doc.at("silhouette_gate").get<double>();
        if (doc.contains("dominance_threshold")) config.dominance_threshold = doc.at("dominance_threshold").get<double>();
        if (doc.contains("batch_sizes")) config.batch_sizes = doc.at("batch_sizes").get<std::vector<int>>();
        if (doc.contains("epoch")) config.epoch = doc.at("epoch").get<std::uint64_t>();
        if (doc.contains("seed")) config.seed = doc.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Malformed, std::string("run config: ") + e.what());
    }
    config.validate();
    return config;
}

RunConfig load_run_config(const fs::path& path) {
    require_input(path, "config");
    return config_from_json(load_config_document(path), fs::absolute(path).parent_path());
}

ordered_json to_json(const RunConfig& config) {
    ordered_json doc;
    doc["events"] = path_string(config.events);
    doc["thresholds"] = path_string(config.thresholds);
    doc["roster"] = path_string(config.roster);
    doc["workdir"] = path_string(config.workdir);
    doc["policy"] = path_string(config.policy);
    doc["net"] = path_string(config.net);
    doc["validators"] = path_string(config.validators);
    doc["overrides"] = path_string(config.overrides);
    doc["format"] = config.format == ledger::Format::Csv ? "csv" : "jsonl";
    doc["algorithm"] = cluster::to_string(config.algorithm);
    doc["cohorts"] = ordered_json::object();
    for (auto cohort : kCohorts) {
        const auto& s = config.settings(cohort);
        doc["cohorts"][std::string(to_string(cohort))] = {{"k", {s.k_lower, s.k_upper}}, {"particles", s.particles}};
    }
    doc["eps"] = config.eps_bounds;
    doc["min_samples"] = config.min_samples_bounds;
    doc["pso_iterations"] = config.pso_iterations;
    doc["silhouette_gate"] = config.silhouette_gate;
    doc["dominance_threshold"] = config.dominance_threshold;
    doc["batch_sizes"] = config.batch_sizes;
    doc["epoch"] = config.epoch;
    doc["seed"] = config.seed;
    return doc;
}

WorkdirLock::WorkdirLock(const fs::path& workdir) : path_(workdir / artifact::kLock) {
    fs::create_directories(workdir);
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (f == nullptr) {
        throw Error(ErrorCode::Io, "workdir " + workdir.string() + " is locked by another command (remove " +
                                       path_.string() + " if no command is running)");
    }
    std::fprintf(f, "%ld\n", static_cast<long>(::getpid()));
    std::fclose(f);
}

WorkdirLock::~WorkdirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
}

ordered_json ingest(const RunConfig& config) {
    const auto events_path = require_input(config.events, "events");
    const auto thresholds_path = require_input(config.thresholds, "thresholds");
    fs::create_directories(config.workdir);

    auto events_in = open_in(events_path);
    auto parsed = ledger::parse_events(events_in, config.format);
    auto thresholds_in = open_in(thresholds_path);
    const auto thresholds = ledger::parse_thresholds_csv(thresholds_in);
    ledger::build_volatility_table(thresholds);  // validates the table

    std::vector<std::string> roster;
    if (!config.roster.empty()) roster = read_lines(require_input(config.roster, "roster"));
    const auto positions = ledger::reconstruct_positions(parsed.events);
    const auto users = ledger::group_by_wallet(parsed.events, positions.positions, roster);
    const auto split = ledger::split_cohorts(users);

    std::map<std::string, std::pair<std::string, std::string>> cohort_of;
    for (const auto& u : split.non_liquidation) cohort_of[u.wallet] = {"non-liquidation", ""};
    for (const auto& u : split.liquidation) cohort_of[u.wallet] = {"liquidation", ""};
    for (const auto& d : split.dropped) cohort_of[d.wallet] = {"dropped", d.reason};

    write_artifact(config, artifact::kEvents, [&](std::ostream& out) { ledger::write_events(out, parsed.events, ledger::Format::Jsonl); });
    write_artifact(config, artifact::kRejects, [&](std::ostream& out) { ledger::write_rejects(out, parsed.rejects); });
    write_artifact(config, artifact::kThresholds, [&](std::ostream& out) { out << read_file(thresholds_path); });
    write_artifact(config, artifact::kCohorts, [&](std::ostream& out) {
        out << "wallet,cohort,reason\n";
        for (const auto& [wallet, c] : cohort_of) out << wallet << ',' << c.first << ',' << c.second << '\n';
    });
    // Later commands reuse this config when no --config is given.
    RunConfig saved = config;
    for (auto* p : {&saved.events, &saved.thresholds, &saved.roster, &saved.workdir, &saved.policy, &saved.net, &saved.validators,
                    &saved.overrides}) {
        if (!p->empty()) *p = fs::absolute(*p).lexically_normal();
    }
    write_json(config, artifact::kConfig, to_json(saved));
    record_stage(config, "ingest", {config.events, config.thresholds, config.roster},
                 {artifact::kEvents, artifact::kRejects, artifact::kThresholds, artifact::kCohorts, artifact::kConfig});

    ordered_json summary;
    summary["events"] = parsed.events.size();
    summary["rejects"] = parsed.rejects.size();
    summary["anomalies"] = positions.anomalies.size();
    summary["wallets"] = users.size();
    summary["non_liquidation"] = split.non_liquidation.size();
    summary["liquidation"] = split.liquidation.size();
    summary["dropped"] = split.dropped.size();
    return summary;
}

ordered_json extract(const RunConfig& config) {
    const auto events_path = require(config, artifact::kEvents, "ingest");
    const auto thresholds_path = require(config, artifact::kThresholds, "ingest");
    const auto cohorts = read_cohorts(config);

    auto events_in = open_in(events_path);
    const auto parsed = ledger::parse_events(events_in, ledger::Format::Jsonl);
    auto thresholds_in = open_in(thresholds_path);
    const auto table = ledger::build_volatility_table(ledger::parse_thresholds_csv(thresholds_in));

    std::vector<std::string> kept;
    for (const auto& [wallet, cohort] : cohorts.cohort_of) {
        if (cohort != "dropped") kept.push_back(wallet);
    }
    const auto positions = ledger::reconstruct_positions(parsed.events);
    std::vector<features::UserFeatureVector> vectors;
    for (const auto& user : ledger::group_by_wallet(parsed.events, positions.positions, kept)) {
        auto it = cohorts.cohort_of.find(user.wallet);
        if (it == cohorts.cohort_of.end() || it->second == "dropped") continue;
        vectors.push_back(features::extract_features(user, table));
    }
    if (vectors.empty()) throw Error(ErrorCode::InsufficientData, "no users left after ingest");
    const auto scaling = features::fit_scaling(vectors);

    write_artifact(config, artifact::kFeatures, [&](std::ostream& out) { features::write_features_csv(out, vectors); });
    write_json(config, artifact::kScaling, features::to_json(scaling));
    record_stage(config, "features", {events_path, thresholds_path, in_workdir(config, artifact::kCohorts)},
                 {artifact::kFeatures, artifact::kScaling});
    return {{"users", vectors.size()}, {"columns", features::kFeatureCount}};
}

ordered_json cluster_stage(const RunConfig& config, std::optional<Cohort> only) {
    const auto vectors = read_features(config);
    const auto scaling = read_scaling(config);
    const auto cohorts = read_cohorts(config);
    ordered_json summary = ordered_json::object();

    for (auto cohort : kCohorts) {
        if (only && *only != cohort) continue;
        const std::string name(to_string(cohort));
        std::vector<features::UserFeatureVector> members;
        for (const auto& v : vectors) {
            auto it = cohorts.cohort_of.find(v.wallet);
            if (it != cohorts.cohort_of.end() && it->second == name) members.push_back(v);
        }
        const auto& settings = config.settings(cohort);
        const std::uint64_t seed = derive_seed(config.seed, kClusterStream + static_cast<std::uint64_t>(cohort));

        cluster::LabelTable table;
        for (const auto& m : members) table.wallets.push_back(m.wallet);
        ordered_json doc;
        const auto rows = static_cast<int>(members.size());
        const bool searchable = config.algorithm == cluster::Algorithm::Dbscan ? rows >= 2 : rows > settings.k_lower;
        if (!searchable) {
            // Too few users to search; they share one cluster.
            table.labels.assign(members.size(), 0);
            doc = {{"algorithm", cluster::to_string(config.algorithm)}, {"seed", seed}, {"n_clusters", members.empty() ? 0 : 1},
                   {"cluster_sizes", members.empty() ? std::vector<std::size_t>{} : std::vector<std::size_t>{members.size()}},
                   {"note", "too few users to search; single cluster"}};
        } else {
            const auto data = features::apply_scaling(members, scaling).rows;
            cluster::SearchConfig search;
            search.algorithm = config.algorithm;
            search.silhouette_gate = config.silhouette_gate;
            search.pso.particles = settings.particles;
            search.pso.iterations = config.pso_iterations;
            search.pso.seed = seed;
            if (config.algorithm == cluster::Algorithm::Dbscan) {
                search.pso.bounds = {{config.eps_bounds[0], config.eps_bounds[1]},
                                     {config.min_samples_bounds[0], config.min_samples_bounds[1]}};
            } else {
                search.pso.bounds = {{static_cast<double>(settings.k_lower), static_cast<double>(settings.k_upper)}};
            }
            const auto found = cluster::pso_search(data, search);
            const auto split = cluster::split_dominant(data, found.best, config.dominance_threshold, search);
            table.labels = split.result.labels;
            doc = cluster::to_json(split.result, seed);
            doc["search"] = {{"bounds", search.pso.bounds.size() == 1
                                            ? ordered_json::array({search.pso.bounds[0].lower, search.pso.bounds[0].upper})
                                            : ordered_json::array({ordered_json::array({search.pso.bounds[0].lower, search.pso.bounds[0].upper}),
                                                                   ordered_json::array({search.pso.bounds[1].lower, search.pso.bounds[1].upper})})},
                             {"particles", settings.particles},
                             {"iterations", config.pso_iterations},
                             {"distinct_evaluations", found.distinct_evaluations},
                             {"below_gate", found.below_gate},
                             {"selected", cluster::to_json(found.best, seed)}};
            doc["split_cluster"] = split.split_cluster ? ordered_json(*split.split_cluster) : ordered_json(nullptr);
        }
        write_artifact(config, artifact::clusters_csv(cohort), [&](std::ostream& out) { cluster::write_labels_csv(out, table); });
        write_json(config, artifact::clusters_json(cohort), doc);
        record_stage(config, "cluster-" + name, {in_workdir(config, artifact::kFeatures), in_workdir(config, artifact::kScaling),
                                                 in_workdir(config, artifact::kCohorts)},
                     {artifact::clusters_csv(cohort), artifact::clusters_json(cohort)});
        summary[name] = {{"users", members.size()}, {"n_clusters", doc.value("n_clusters", 0)},
                         {"silhouette", doc.contains("silhouette") ? doc["silhouette"] : ordered_json(nullptr)}};
    }
    return summary;
}

ordered_json label(const RunConfig& config) {
    const auto vectors = read_features(config);
    const auto cohorts = read_cohorts(config);
    const auto policy = policy_for(config);

    // Cohort ids are made contiguous: non-liquidation clusters first, then
    // liquidation clusters, each cohort's noise as one extra cluster.
    std::map<std::string, int> global;
    std::map<int, std::string> cohort_of_cluster;
    int offset = 0;
    std::vector<fs::path> inputs{in_workdir(config, artifact::kFeatures), in_workdir(config, artifact::kCohorts)};
    for (auto cohort : kCohorts) {
        const std::string name(to_string(cohort));
        const bool populated = std::any_of(cohorts.cohort_of.begin(), cohorts.cohort_of.end(),
                                           [&](const auto& kv) { return kv.second == name; });
        if (!populated) continue;
        const auto path = in_workdir(config, artifact::clusters_csv(cohort));
        if (!fs::exists(path)) {
            throw Error(ErrorCode::NotFound, "missing " + path.string() + "; run `zscore cluster --cohort " + name + "` first");
        }
        inputs.push_back(path);
        auto in = open_in(path);
        const auto table = cluster::read_labels_csv(in);
        const auto canonical = cluster::canonical_labels(table.labels);
        const int clusters = cluster::count_clusters(canonical);
        const bool noisy = std::find(canonical.begin(), canonical.end(), cluster::kNoise) != canonical.end();
        for (std::size_t i = 0; i < table.wallets.size(); ++i) {
            const int local = canonical[i] == cluster::kNoise ? clusters : canonical[i];
            global[table.wallets[i]] = offset + local;
        }
        for (int c = 0; c < clusters + (noisy ? 1 : 0); ++c) cohort_of_cluster[offset + c] = name;
        offset += clusters + (noisy ? 1 : 0);
    }

    std::vector<int> labels;
    for (const auto& v : vectors) {
        auto it = global.find(v.wallet);
        if (it == global.end()) throw Error(ErrorCode::NotFound, "wallet " + v.wallet + " has no cluster; rerun `zscore cluster`");
        labels.push_back(it->second);
    }

    const auto profiles = label::profile_clusters(vectors, labels, policy);
    auto intervals = label::assign_intervals(profiles, policy);
    if (!config.overrides.empty()) {
        auto in = open_in(require_input(config.overrides, "overrides"));
        intervals = label::apply_overrides(intervals, label::read_overrides_csv(in), profiles, policy);
        inputs.push_back(config.overrides);
    }
    for (const auto& profile : profiles) {
        const auto it = std::find_if(intervals.begin(), intervals.end(), [&](const auto& i) { return i.cluster_id == profile.cluster_id; });
        const auto problem = it == intervals.end() ? "no interval" : label::interval_violation(*it, profile, policy);
        if (!problem.empty()) {
            throw Error(ErrorCode::InvalidInterval, "cluster " + std::to_string(profile.cluster_id) + ": " + problem);
        }
    }
    const auto labeled = label::label_users(vectors, labels, intervals);

    write_artifact(config, artifact::kLabels, [&](std::ostream& out) {
        out << "wallet,cluster_id,cohort,lower,upper,pinned\n";
        for (const auto& row : labeled.rows) {
            out << row.features.wallet << ',' << row.cluster_id << ',' << cohort_of_cluster[row.cluster_id] << ','
                << row.interval.lower << ',' << row.interval.upper << ',' << (row.pinned ? 1 : 0) << '\n';
        }
    });
    write_artifact(config, artifact::kIntervals, [&](std::ostream& out) { label::write_intervals_csv(out, intervals); });
    ordered_json profiles_doc = ordered_json::array();
    for (const auto& p : profiles) {
        const auto& interval = *std::find_if(intervals.begin(), intervals.end(), [&](const auto& i) { return i.cluster_id == p.cluster_id; });
        profiles_doc.push_back({{"cluster_id", p.cluster_id},
                                {"cohort", cohort_of_cluster[p.cluster_id]},
                                {"size", p.size},
                                {"liquidation_rate", p.liquidation_rate},
                                {"median_borrow_count", p.median_borrow_count},
                                {"is_new_users", p.is_new_users},
                                {"has_liquidations", p.has_liquidations},
                                {"interval", {interval.lower, interval.upper}}});
    }
    write_json(config, artifact::kProfiles, profiles_doc);
    if (!config.policy.empty()) inputs.push_back(config.policy);
    record_stage(config, "label", inputs, {artifact::kLabels, artifact::kIntervals, artifact::kProfiles});
    return {{"users", labeled.rows.size()}, {"clusters", intervals.size()}};
}

ordered_json train(const RunConfig& config) {
    const auto labeled = read_labeled(config);
    const auto set = net::make_training_set(labeled, read_scaling(config));
    auto net_config = net_config_for(config);

    ordered_json doc;
    if (!config.batch_sizes.empty()) {
        const auto sweep = net::batch_size_sweep(set, net_config, config.batch_sizes);
        net_config.batch_size = sweep.chosen;
        doc["sweep"] = sweep_json(sweep);
    }
    const auto [params, training] = net::train(set, net_config);
    doc["config"] = net::to_json(net_config);
    doc["report"] = net::to_json(training);

    write_artifact(config, artifact::kModel, [&](std::ostream& out) { net::write_params(out, params); });
    write_json(config, artifact::kTraining, doc);
    record_stage(config, "train", {in_workdir(config, artifact::kFeatures), in_workdir(config, artifact::kLabels),
                                   in_workdir(config, artifact::kIntervals), in_workdir(config, artifact::kScaling), config.net},
                 {artifact::kModel, artifact::kTraining});
    return {{"epochs", training.epochs.size()}, {"best_epoch", training.best_epoch},
            {"best_validation_loss", training.best_validation_loss}, {"stopped_early", training.stopped_early},
            {"batch_size", net_config.batch_size}};
}

ordered_json score(const RunConfig& config) {
    const auto labeled = read_labeled(config);
    const auto set = net::make_training_set(labeled, read_scaling(config));
    auto model_in = open_in(require(config, artifact::kModel, "train"));
    const auto params = net::read_params(model_in);
    const auto policy = policy_for(config);
    const auto rows = net::score_all(params, set, policy);

    std::map<std::string, label::ScoreInterval> target;
    for (const auto& row : labeled.rows) target[row.features.wallet] = row.target(policy);
    std::size_t outside = 0;
    for (const auto& r : rows) {
        const auto& t = target.at(r.wallet);
        if (r.zscore < t.lower || r.zscore > t.upper || r.zscore < kMinScore || r.zscore > kMaxScore) ++outside;
    }
    write_artifact(config, artifact::kScores, [&](std::ostream& out) { net::write_scores_jsonl(out, rows); });
    record_stage(config, "score", {in_workdir(config, artifact::kModel), in_workdir(config, artifact::kLabels),
                                   in_workdir(config, artifact::kIntervals), config.policy},
                 {artifact::kScores});
    return {{"users", rows.size()}, {"outside_interval", outside}};
}

ordered_json attest(const RunConfig& config) {
    const auto rows = read_scores(config);
    std::vector<attest::ZScoreRecord> records;
    records.reserve(rows.size());
    for (const auto& r : rows) records.push_back({r.wallet, r.zscore, config.epoch, r.cluster_id});
    attest::ScoreStore store(in_workdir(config, artifact::kStore));
    const auto root = store.put_scores(std::move(records), config.epoch);
    ordered_json doc{{"epoch", config.epoch}, {"root", attest::to_hex(root)}, {"records", rows.size()}};
    write_json(config, artifact::kAttest, doc);
    record_stage(config, "attest", {in_workdir(config, artifact::kScores)}, {artifact::kStore, artifact::kAttest});
    return doc;
}

ordered_json epoch(const RunConfig& config) {
    const auto store_dir = require(config, artifact::kStore, "attest");
    const attest::ScoreStore store(store_dir);
    if (!store.has_epoch(config.epoch)) {
        throw Error(ErrorCode::NotFound, "epoch " + std::to_string(config.epoch) + " is not committed; run `zscore attest --epoch " +
                                             std::to_string(config.epoch) + "` first");
    }
    const auto validators = validators_for(config);
    auto chain = quorum::ChainStub::load(in_workdir(config, artifact::kChain));
    const auto result = quorum::run_epoch(store, validators, chain, config.epoch);
    if (result.published) chain.save(in_workdir(config, artifact::kChain));

    auto doc = quorum::to_json(result);
    write_json(config, artifact::epoch_json(config.epoch), doc);
    record_stage(config, "epoch-" + std::to_string(config.epoch), {store_dir, config.validators},
                 {artifact::epoch_json(config.epoch), artifact::kChain});
    return {{"epoch", config.epoch}, {"published", result.published}, {"approvals", result.approvals},
            {"threshold", quorum::quorum_threshold(result.total_validators)}, {"validators", result.total_validators},
            {"root", attest::to_hex(result.proposed_root)}};
}

ordered_json query(const RunConfig& config, const std::string& wallet) {
    const attest::ScoreStore store(require(config, artifact::kStore, "attest"));
    const auto chain = quorum::ChainStub::load(require(config, artifact::kChain, "epoch"));
    return quorum::to_json(quorum::serve_score(store, chain, wallet, config.epoch));
}

std::size_t Histogram::total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }

Histogram histogram(const std::vector<int>& scores, int bin_width) {
    if (bin_width < 1) throw Error(ErrorCode::InvalidArgument, "bin width must be positive");
    Histogram h;
    h.bin_width = bin_width;
    h.counts.assign(static_cast<std::size_t>((kMaxScore + bin_width - 1) / bin_width), 0);
    for (int s : scores) {
        if (s < kMinScore || s > kMaxScore) throw Error(ErrorCode::ScoreOutOfRange, "score " + std::to_string(s));
        ++h.counts[static_cast<std::size_t>((s - 1) / bin_width)];
    }
    return h;
}

std::string histogram_svg(const Histogram& histogram, const std::string& title) {
    constexpr int width = 640, height = 320, left = 50, bottom = 40, top = 30;
    const int plot_w = width - left - 10;
    const int plot_h = height - bottom - top;
    const std::size_t peak = histogram.counts.empty() ? 0 : *std::max_element(histogram.counts.begin(), histogram.counts.end());
    const double bar_w = histogram.counts.empty() ? 0.0 : static_cast<double>(plot_w) / static_cast<double>(histogram.counts.size());

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\" viewBox=\"0 0 "
        << width << ' ' << height << "\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << "<text x=\"" << width / 2 << "\" y=\"18\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">" << title
        << "</text>\n";
    for (std::size_t i = 0; i < histogram.counts.size(); ++i) {
        const double h = peak == 0 ? 0.0 : plot_h * static_cast<double>(histogram.counts[i]) / static_cast<double>(peak);
        svg << "<rect x=\"" << format_double(left + bar_w * static_cast<double>(i) + 1.0) << "\" y=\""
            << format_double(top + plot_h - h) << "\" width=\"" << format_double(std::max(0.0, bar_w - 2.0)) << "\" height=\""
            << format_double(h) << "\" fill=\"#4c72b0\"><title>" << (static_cast<int>(i) * histogram.bin_width + 1) << '-'
            << std::min(kMaxScore, (static_cast<int>(i) + 1) * histogram.bin_width) << ": " << histogram.counts[i]
            << "</title></rect>\n";
    }
    svg << "<line x1=\"" << left << "\" y1=\"" << top + plot_h << "\" x2=\"" << left + plot_w << "\" y2=\"" << top + plot_h
        << "\" stroke=\"black\"/>\n";
    for (int tick = 0; tick <= kMaxScore; tick += 150) {
        const double x = left + plot_w * static_cast<double>(tick) / kMaxScore;
        svg << "<text x=\"" << format_double(x) << "\" y=\"" << top + plot_h + 16
            << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << tick << "</text>\n";
    }
    svg << "<text x=\"" << left - 6 << "\" y=\"" << top + 10 << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
        << peak << "</text>\n";
    svg << "<text x=\"" << width / 2 << "\" y=\"" << height - 6
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">zScore</text>\n";
    svg << "</svg>\n";
    return svg.str();
}

ordered_json report(const RunConfig& config) {
    const auto rows = read_scores(config);
    const std::string dir = artifact::kReportDir;
    std::vector<int> all;
    std::map<int, std::vector<int>> by_cluster;
    for (const auto& r : rows) {
        all.push_back(r.zscore);
        by_cluster[r.cluster_id].push_back(r.zscore);
    }
    const auto overall = histogram(all);

    std::vector<std::string> outputs{dir + "/histogram.csv", dir + "/overall.svg", dir + "/summary.json"};
    write_artifact(config, dir + "/histogram.csv", [&](std::ostream& out) {
        out << "scope,bin_lower,bin_upper,count\n";
        auto emit = [&](const std::string& scope, const Histogram& h) {
            for (std::size_t i = 0; i < h.counts.size(); ++i) {
                const int lo = static_cast<int>(i) * h.bin_width + 1;
                out << scope << ',' << lo << ',' << std::min(kMaxScore, lo + h.bin_width - 1) << ',' << h.counts[i] << '\n';
            }
        };
        emit("all", overall);
        for (const auto& [id, scores] : by_cluster) emit("cluster-" + std::to_string(id), histogram(scores));
    });
    write_artifact(config, dir + "/overall.svg", [&](std::ostream& out) { out << histogram_svg(overall, "All users"); });

    auto stats = [](std::vector<int> scores) {
        std::sort(scores.begin(), scores.end());
        const double mean = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
        const auto n = scores.size();
        const double median = n % 2 == 1 ? scores[n / 2] : 0.5 * (scores[n / 2 - 1] + scores[n / 2]);
        const auto below = static_cast<std::size_t>(std::count_if(scores.begin(), scores.end(), [](int s) { return s < 300; }));
        const auto above = static_cast<std::size_t>(std::count_if(scores.begin(), scores.end(), [](int s) { return s > 600; }));
        return ordered_json{{"users", n},
                            {"min", scores.front()},
                            {"max", scores.back()},
                            {"mean", mean},
                            {"median", median},
                            {"below_300", below},
                            {"above_600", above},
                            {"share_below_300", static_cast<double>(below) / static_cast<double>(n)},
                            {"share_above_600", static_cast<double>(above) / static_cast<double>(n)}};
    };
    ordered_json summary = all.empty() ? ordered_json{{"users", 0}} : stats(all);
    summary["clusters"] = ordered_json::object();
    for (const auto& [id, scores] : by_cluster) {
        const auto name = "cluster-" + std::to_string(id) + ".svg";
        write_artifact(config, dir + "/" + name, [&](std::ostream& out) {
            out << histogram_svg(histogram(scores), "Cluster " + std::to_string(id));
        });
        outputs.push_back(dir + "/" + name);
        summary["clusters"][std::to_string(id)] = stats(scores);
    }
    write_json(config, dir + "/summary.json", summary);
    record_stage(config, "report", {in_workdir(config, artifact::kScores)}, outputs);
    return summary;
}

ordered_json run_all(const RunConfig& config) {
    ordered_json out;
    out["ingest"] = ingest(config);
    out["features"] = extract(config);
    out["cluster"] = cluster_stage(config);
    out["label"] = label(config);
    out["train"] = train(config);
    out["score"] = score(config);
    out["attest"] = attest(config);
    out["epoch"] = epoch(config);
    const auto summary = report(config);
    out["report"] = {{"users", summary["users"]},
                     {"share_below_300", summary.value("share_below_300", 0.0)},
                     {"share_above_600", summary.value("share_above_600", 0.0)}};
    return out;
}

}  // namespace zscore::pipeline
