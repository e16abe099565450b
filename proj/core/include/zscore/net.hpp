#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "zscore/features.hpp"
#include "zscore/labeling.hpp"

namespace zscore::net {

inline constexpr std::array<int, 8> kSweepBatchSizes{64, 128, 256, 512, 1024, 2048, 4096, 8192};

struct LossWeights {
    double bound = 2.0;
    double dist = 1.0;
    double coh = 1.0;
    double recon = 0.1;  // auxiliary autoencoder reconstruction term
};

struct NetConfig {
    int input_dim = static_cast<int>(features::kFeatureCount);
    int hidden_dim = 32;
    int latent_dim = 16;
    int embedding_dim = 16;
    int attention_dim = 16;
    int attention_heads = 1;
    int head_dim = 16;
    std::uint64_t seed = 0;
    double learning_rate = 1e-3;
    int max_epochs = 400;
    int patience = 15;
    int batch_size = 256;
    LossWeights loss_weights;
    double target_spread = 0.8;
    double validation_fraction = 0.3;
    std::map<int, double> cluster_weights;  // per-cluster multiplier on the distribution term

    void validate() const;
};

NetConfig config_from_json(const nlohmann::json& doc);
NetConfig load_config(const std::string& path);  // .json or .toml
nlohmann::ordered_json to_json(const NetConfig& config);

/// All weights in one flat vector; matrices are stored row-major in a fixed
/// block order (encoder, decoder, embedding, attention, score head, weight head).
struct NetParams {
    int input_dim = 0;
    int hidden_dim = 0;
    int latent_dim = 0;
    int embedding_dim = 0;
    int attention_dim = 0;
    int head_dim = 0;
    int n_clusters = 0;
    std::uint64_t seed = 0;
    Eigen::VectorXd values;

    friend bool operator==(const NetParams&, const NetParams&) = default;
};

/// Xavier-uniform weights, zero biases.
NetParams init_params(const NetConfig& config, int n_clusters);

/// Number of scalars for the given shape.
std::size_t parameter_count(const NetParams& shape);

void write_params(std::ostream& out, const NetParams& params);
NetParams read_params(std::istream& in);

struct ScoreOutput {
    double raw_score = 0.0;                 // in [-1, 1]
    std::vector<double> feature_weights;    // on the simplex
    std::array<double, 2> attention{};      // over (latent token, cluster token)
    int zscore = 0;                         // set by scale_score, 0 before scaling
};

/// Forward pass for one scaled feature vector. Throws UnknownCluster.
ScoreOutput forward(const NetParams& params, const Eigen::VectorXd& x, int cluster_id);

/// round(lower + (s + 1) / 2 * (upper - lower)), clamped to [1, 900].
int scale_score(double s, const label::ScoreInterval& interval);

/// Continuous counterpart of scale_score, before rounding.
double continuous_score(double s, const label::ScoreInterval& interval);

struct ClusterImportance {
    std::map<int, std::vector<double>> by_cluster;
};

/// imp_j = |mean_c(j) - mean(j)| / (std(j) + eps) + eps, normalized per cluster.
/// Population statistics over the rows given; noise labels are skipped.
ClusterImportance observed_importance(const Eigen::MatrixXd& x, const std::vector<int>& labels, double eps = 1e-8);

double boundary_loss(const std::vector<double>& zscores, const std::vector<label::ScoreInterval>& intervals);
double distribution_loss(const std::vector<double>& zscores, const std::vector<int>& clusters,
                         const std::vector<label::ScoreInterval>& intervals, double target_spread,
                         const std::map<int, double>& cluster_weights = {});
double coherence_loss(const std::vector<std::vector<double>>& weights, const std::vector<int>& clusters,
                      const ClusterImportance& importance);

/// Rows the network trains on. Pinned rows are kept for scoring but never
/// enter a batch.
struct TrainingSet {
    std::vector<std::string> wallets;
    Eigen::MatrixXd x;  // one scaled row per user
    std::vector<int> clusters;
    std::vector<label::ScoreInterval> intervals;
    std::vector<bool> pinned;
    int n_clusters = 0;
};

TrainingSet make_training_set(const label::LabeledDataset& labeled, const features::ScalingParams& scaling);

struct LossBreakdown {
    double bound = 0.0;
    double dist = 0.0;
    double coh = 0.0;
    double recon = 0.0;
    double total = 0.0;
};

/// Loss over the given rows treated as one batch. When `gradient` is set it
/// receives d(total)/d(params.values).
LossBreakdown evaluate_batch(const NetParams& params, const TrainingSet& set, const std::vector<std::size_t>& rows,
                             const ClusterImportance& importance, const NetConfig& config,
                             Eigen::VectorXd* gradient = nullptr);

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    LossBreakdown validation;
};

struct TrainingReport {
    std::vector<EpochRecord> epochs;
    int best_epoch = 0;
    double best_validation_loss = 0.0;
    bool stopped_early = false;
    std::size_t train_rows = 0;
    std::size_t validation_rows = 0;
    int batch_size = 0;
    std::vector<std::size_t> validation_indices;  // into the training set
};

nlohmann::ordered_json to_json(const TrainingReport& report);

/// 70/30 split stratified by cluster, Adam, early stopping on validation loss.
/// The returned parameters are the ones from the best validation epoch.
/// Throws Diverged when a loss turns non-finite.
std::pair<NetParams, TrainingReport> train(const TrainingSet& set, const NetConfig& config);

/// Stratified train/validation split used by train().
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_rows(const TrainingSet& set, const NetConfig& config);

struct SweepEntry {
    int batch_size = 0;
    double validation_loss = 0.0;
    int epochs_run = 0;
};

struct SweepReport {
    int chosen = 0;
    std::vector<SweepEntry> entries;
};

/// Trains one model per batch size and keeps the lowest validation loss; ties
/// go to the larger size. `max_epochs` overrides the epoch budget per size.
SweepReport batch_size_sweep(const TrainingSet& set, const NetConfig& config, const std::vector<int>& sizes,
                             const std::map<int, int>& max_epochs = {});

struct ScoredRow {
    std::string wallet;
    int zscore = 0;
    int cluster_id = 0;
    double raw_score = 0.0;
    std::vector<double> feature_weights;
    double closed_form = 0.0;  // lower bound * (weights . scaled features), a diagnostic only
    bool pinned = false;
};

/// Scores every row; pinned rows get the policy's fixed score. Sorted by wallet.
std::vector<ScoredRow> score_all(const NetParams& params, const TrainingSet& set, const label::RulePolicy& policy);

void write_scores_jsonl(std::ostream& out, const std::vector<ScoredRow>& rows);
std::vector<ScoredRow> read_scores_jsonl(std::istream& in);

}  // namespace zscore::net
