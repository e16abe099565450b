#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "zscore/cluster.hpp"
#include "zscore/features.hpp"
#include "zscore/labeling.hpp"
#include "zscore/ledger.hpp"
#include "zscore/net.hpp"
#include "zscore/pipeline.hpp"
#include "zscore/synth.hpp"

namespace testing {

namespace fs = std::filesystem;

inline fs::path data_dir() { return ZSCORE_DATA_DIR; }

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = fs::temp_directory_path() / ("zscore-" + tag + "-" + std::to_string(rd()) + std::to_string(rd()));
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& name) const { return path_ / name; }

private:
    fs::path path_;
};

inline std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

// Writes the population for `spec` into <root>/pop and returns a run config
// based on data/run.toml that reads it and works in <root>/<workdir>.
inline zscore::pipeline::RunConfig prepare_run(const fs::path& root, const zscore::synth::PopulationSpec& spec,
                                               const std::string& workdir = "work") {
    const auto population = zscore::synth::generate(spec);
    zscore::synth::write_population(root / "pop", population);
    auto config = zscore::pipeline::load_run_config(data_dir() / "run.toml");
    config.events = root / "pop" / "events.jsonl";
    config.thresholds = root / "pop" / "thresholds.csv";
    config.roster = root / "pop" / "wallets.txt";
    config.workdir = root / workdir;
    return config;
}

// Labeled rows of a finished workdir, rebuilt from its artifacts.
struct WorkdirView {
    std::vector<zscore::features::UserFeatureVector> features;
    std::map<std::string, int> cluster_of;
    std::map<int, zscore::label::ScoreInterval> interval_of;
    std::vector<zscore::net::ScoredRow> scores;
    zscore::features::ScalingParams scaling;
};

inline WorkdirView read_workdir(const fs::path& workdir) {
    namespace art = zscore::pipeline::artifact;
    WorkdirView view;
    {
        std::ifstream in(workdir / art::kFeatures);
        view.features = zscore::features::read_features_csv(in);
    }
    {
        std::ifstream in(workdir / art::kLabels);
        const auto table = zscore::cluster::read_labels_csv(in);
        for (std::size_t i = 0; i < table.wallets.size(); ++i) view.cluster_of[table.wallets[i]] = table.labels[i];
    }
    {
        std::ifstream in(workdir / art::kIntervals);
        for (const auto& iv : zscore::label::read_intervals_csv(in)) view.interval_of[iv.cluster_id] = iv;
    }
    if (fs::exists(workdir / art::kScores)) {
        std::ifstream in(workdir / art::kScores);
        view.scores = zscore::net::read_scores_jsonl(in);
    }
    view.scaling = zscore::features::scaling_from_json(nlohmann::json::parse(slurp(workdir / art::kScaling)));
    return view;
}

// Feature vectors of every wallet in the roster, wallets ascending.
inline std::vector<zscore::features::UserFeatureVector> population_features(const zscore::synth::Population& population) {
    namespace ledger = zscore::ledger;
    const auto table = ledger::build_volatility_table(population.thresholds);
    const auto positions = ledger::reconstruct_positions(population.events);
    std::vector<zscore::features::UserFeatureVector> out;
    for (const auto& user : ledger::group_by_wallet(population.events, positions.positions, population.roster)) {
        out.push_back(zscore::features::extract_features(user, table));
    }
    return out;
}

inline zscore::net::TrainingSet training_set(const WorkdirView& view) {
    std::vector<int> labels;
    std::vector<zscore::label::ScoreInterval> intervals;
    for (const auto& f : view.features) labels.push_back(view.cluster_of.at(f.wallet));
    for (const auto& [id, iv] : view.interval_of) intervals.push_back(iv);
    const auto labeled = zscore::label::label_users(view.features, labels, intervals);
    return zscore::net::make_training_set(labeled, view.scaling);
}

}  // namespace testing
