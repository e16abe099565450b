#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "zscore/cluster.hpp"

namespace zscore::cluster {

struct Bounds {
    double lower = 0.0;
    double upper = 1.0;
};

struct PsoConfig {
    int particles = 30;
    int iterations = 60;
    double inertia = 0.72;
    double cognitive = 1.49;
    double social = 1.49;
    std::vector<Bounds> bounds;
    std::uint64_t seed = 0;

    /// Throws InvalidArgument unless particles >= 2, iterations >= 1 and every lower < upper.
    void validate() const;
};

struct PsoMinimum {
    std::vector<double> position;
    double value = 0.0;
    std::size_t evaluations = 0;
    std::vector<std::vector<double>> evaluated;  // every position handed to the function
};

/// Global-best particle swarm minimization. Velocities are clamped to the
/// bound width and positions clipped to the bounds.
PsoMinimum pso_minimize(const std::function<double(std::span<const double>)>& function, const PsoConfig& config);

struct SearchConfig {
    Algorithm algorithm = Algorithm::KMeans;
    PsoConfig pso;
    double silhouette_gate = 0.51;
    KMeansOptions kmeans;
};

struct SearchReport {
    ClusteringResult best;  // best gate-passing result, else best found
    bool below_gate = false;
    std::vector<ClusterParams> evaluated;  // decoded params of every particle evaluation
    std::size_t distinct_evaluations = 0;
};

/// Maximizes the clustering objective over the algorithm's hyperparameters.
/// KMeans/Agglomerative search k (one dimension, rounded); DBSCAN searches
/// (eps, min_samples) with min_samples rounded.
SearchReport pso_search(const Eigen::MatrixXd& data, const SearchConfig& config);

/// Decodes a particle position into clustering parameters.
ClusterParams decode_position(Algorithm algorithm, std::span<const double> position, const std::vector<Bounds>& bounds,
                              Eigen::Index rows);

struct SplitReport {
    ClusteringResult result;
    std::optional<int> split_cluster;      // original id of the cluster that was split
    std::optional<SearchReport> sub_search;  // sub-clustering of that cluster alone
};

/// Re-clusters the largest cluster when it holds more than `dominance_threshold`
/// of the rows. Sub-clusters take ids 0..m-1, the remaining clusters follow in
/// their original order. At most one split is performed.
SplitReport split_dominant(const Eigen::MatrixXd& data, const ClusteringResult& result, double dominance_threshold,
                           const SearchConfig& config);

}  // namespace zscore::cluster
