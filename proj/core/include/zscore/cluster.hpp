#pragma once

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

namespace zscore::cluster {

enum class Algorithm { KMeans, Agglomerative, Dbscan };

std::string_view to_string(Algorithm algorithm);
Algorithm parse_algorithm(std::string_view text);

inline constexpr int kNoise = -1;

struct ClusterParams {
    int k = 0;            // KMeans, Agglomerative
    double eps = 0.0;     // Dbscan
    int min_samples = 0;  // Dbscan

    friend bool operator==(const ClusterParams&, const ClusterParams&) = default;
};

struct ClusteringResult {
    Algorithm algorithm = Algorithm::KMeans;
    ClusterParams params;
    std::vector<int> labels;  // one per row, kNoise for DBSCAN noise
    double silhouette = -1.0;
    double objective = 0.0;
    int n_clusters = 0;
    bool all_noise = false;
    double inertia = 0.0;  // within-cluster sum of squares (KMeans only)

    std::vector<std::size_t> cluster_sizes() const;
};

/// 10 * silhouette + n_clusters, rounded once.
double objective(double silhouette, int n_clusters);

/// Mean silhouette over non-noise rows. Rows of singleton clusters contribute 0,
/// as do rows with a = b = 0. Throws SingleCluster when fewer than two clusters.
double silhouette_score(const Eigen::MatrixXd& data, const std::vector<int>& labels);

/// Number of distinct non-noise labels.
int count_clusters(const std::vector<int>& labels);

/// Fills silhouette, objective and n_clusters from labels. Undefined
/// silhouettes (fewer than two clusters) use the -1 sentinel; all-noise
/// results get an objective of -infinity.
void finalize(ClusteringResult& result, const Eigen::MatrixXd& data);

struct KMeansOptions {
    int max_iterations = 300;
    double tolerance = 1e-6;  // max centroid shift
    int restarts = 4;         // independent k-means++ seeds, lowest inertia wins
};

ClusteringResult kmeans(const Eigen::MatrixXd& data, int k, std::uint64_t seed, const KMeansOptions& options = {});

/// Ward linkage, dendrogram cut at k clusters. Labels are numbered by first
/// occurrence in row order.
ClusteringResult agglomerative(const Eigen::MatrixXd& data, int k);

struct WardMerge {
    int left = 0;
    int right = 0;
    double height = 0.0;  // Lance-Williams Ward distance (twice the SSE increase)
};

/// Merge list of the full Ward dendrogram, nondecreasing in height.
std::vector<WardMerge> ward_linkage(const Eigen::MatrixXd& data);

/// eps-neighbourhoods are inclusive; min_samples counts the point itself.
ClusteringResult dbscan(const Eigen::MatrixXd& data, double eps, int min_samples);

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b);

/// Renumbers labels to 0..m-1 by first occurrence; noise stays kNoise.
std::vector<int> canonical_labels(const std::vector<int>& labels);

/// Run manifest: algorithm, params, seed, silhouette, objective and cluster sizes.
nlohmann::ordered_json to_json(const ClusteringResult& result, std::uint64_t seed);

struct LabelTable {
    std::vector<std::string> wallets;
    std::vector<int> labels;
};

/// wallet,cluster_id rows; noise is written as -1.
void write_labels_csv(std::ostream& out, const LabelTable& table);
LabelTable read_labels_csv(std::istream& in);

}  // namespace zscore::cluster
