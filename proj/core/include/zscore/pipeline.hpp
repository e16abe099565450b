#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "zscore/cluster.hpp"
#include "zscore/ledger.hpp"

namespace zscore::pipeline {

enum class Cohort { NonLiquidation, Liquidation };

std::string_view to_string(Cohort cohort);
Cohort parse_cohort(std::string_view text);

struct CohortSettings {
    int k_lower = 10;
    int k_upper = 50;
    int particles = 30;
};

/// Everything one pipeline run needs. Optional paths fall back to built-in
/// defaults (policy, network, a three-validator honest roster).
struct RunConfig {
    std::filesystem::path events;
    std::filesystem::path thresholds;
    std::filesystem::path roster;      // wallets with no events, one per line
    std::filesystem::path workdir;
    std::filesystem::path policy;
    std::filesystem::path net;
    std::filesystem::path validators;
    std::filesystem::path overrides;   // cluster_id,lower,upper
    ledger::Format format = ledger::Format::Jsonl;
    cluster::Algorithm algorithm = cluster::Algorithm::KMeans;
    CohortSettings non_liquidation{10, 50, 30};
    CohortSettings liquidation{5, 20, 10};
    std::array<double, 2> eps_bounds{0.1, 3.0};          // DBSCAN only
    std::array<double, 2> min_samples_bounds{3.0, 20.0};  // DBSCAN only
    int pso_iterations = 60;
    double silhouette_gate = 0.51;
    double dominance_threshold = 0.6;
    std::vector<int> batch_sizes;  // empty trains with the network config's batch size
    std::uint64_t epoch = 1;
    std::uint64_t seed = 0;

    const CohortSettings& settings(Cohort cohort) const {
        return cohort == Cohort::Liquidation ? liquidation : non_liquidation;
    }

    /// Value checks only; paths are checked by the stage that reads them.
    void validate() const;
};

/// Relative paths resolve against `base`.
RunConfig config_from_json(const nlohmann::json& doc, const std::filesystem::path& base = {});
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::ordered_json to_json(const RunConfig& config);

/// Artifact names, relative to the workdir.
namespace artifact {
inline constexpr const char* kConfig = "run.json";
inline constexpr const char* kManifest = "manifest.json";
inline constexpr const char* kLock = ".zscore.lock";
inline constexpr const char* kEvents = "events.jsonl";
inline constexpr const char* kRejects = "rejects.jsonl";
inline constexpr const char* kCohorts = "cohorts.csv";
inline constexpr const char* kThresholds = "thresholds.csv";
inline constexpr const char* kFeatures = "features.csv";
inline constexpr const char* kScaling = "scaling.json";
inline constexpr const char* kLabels = "labels.csv";
inline constexpr const char* kIntervals = "intervals.csv";
inline constexpr const char* kProfiles = "profiles.json";
inline constexpr const char* kModel = "model.bin";
inline constexpr const char* kTraining = "training.json";
inline constexpr const char* kScores = "scores.jsonl";
inline constexpr const char* kStore = "store";
inline constexpr const char* kAttest = "attest.json";
inline constexpr const char* kChain = "chain.json";
inline constexpr const char* kReportDir = "report";

std::string clusters_csv(Cohort cohort);   // clusters-<cohort>.csv
std::string clusters_json(Cohort cohort);  // clusters-<cohort>.json
std::string epoch_json(std::uint64_t epoch);  // epoch-<n>.json
}  // namespace artifact

/// Exclusive writer lock on a workdir; throws Io when another command holds it.
class WorkdirLock {
public:
    explicit WorkdirLock(const std::filesystem::path& workdir);
    ~WorkdirLock();
    WorkdirLock(const WorkdirLock&) = delete;
    WorkdirLock& operator=(const WorkdirLock&) = delete;

private:
    std::filesystem::path path_;
};

/// Stages. Each reads the artifacts of earlier stages from the workdir, writes
/// its own, records input and output hashes in the manifest and returns a
/// short summary. A missing artifact raises NotFound naming the stage to run.
nlohmann::ordered_json ingest(const RunConfig& config);
nlohmann::ordered_json extract(const RunConfig& config);
nlohmann::ordered_json cluster_stage(const RunConfig& config, std::optional<Cohort> cohort = std::nullopt);
nlohmann::ordered_json label(const RunConfig& config);
nlohmann::ordered_json train(const RunConfig& config);
nlohmann::ordered_json score(const RunConfig& config);
nlohmann::ordered_json attest(const RunConfig& config);

/// Quorum round for config.epoch. Not publishing is reported, not thrown.
nlohmann::ordered_json epoch(const RunConfig& config);
nlohmann::ordered_json query(const RunConfig& config, const std::string& wallet);
nlohmann::ordered_json report(const RunConfig& config);

/// All stages in order.
nlohmann::ordered_json run_all(const RunConfig& config);

struct Histogram {
    int bin_width = 50;
    std::vector<std::size_t> counts;  // bins [1 + i*w, (i+1)*w], last bin ends at 900

    std::size_t total() const;
};

Histogram histogram(const std::vector<int>& scores, int bin_width = 50);

/// Bar chart of a histogram as a standalone SVG document.
std::string histogram_svg(const Histogram& histogram, const std::string& title);

}  // namespace zscore::pipeline
