#include "zscore/pso.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <tuple>

#include "zscore/common.hpp"
#include "zscore/rng.hpp"

namespace zscore::cluster {
namespace {

constexpr double kUnusable = 1e300;

int round_within(double x, double lo, double hi) {
    const int lower = static_cast<int>(std::ceil(lo));
    const int upper = static_cast<int>(std::floor(hi));
    return std::clamp(static_cast<int>(std::lround(x)), lower, std::max(lower, upper));
}

Eigen::MatrixXd select_rows(const Eigen::MatrixXd& data, const std::vector<Eigen::Index>& rows) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), data.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = data.row(rows[i]);
    return out;
}

}  // namespace

void PsoConfig::validate() const {
    if (particles < 2) throw Error(ErrorCode::InvalidArgument, "PSO needs at least 2 particles");
    if (iterations < 1) throw Error(ErrorCode::InvalidArgument, "PSO needs at least 1 iteration");
    if (bounds.empty()) throw Error(ErrorCode::InvalidArgument, "PSO needs at least one dimension");
    for (const auto& b : bounds) {
        if (!(b.lower < b.upper)) throw Error(ErrorCode::InvalidArgument, "PSO bound lower must be < upper");
    }
}

PsoMinimum pso_minimize(const std::function<double(std::span<const double>)>& function, const PsoConfig& config) {
    config.validate();
    const std::size_t dims = config.bounds.size();
    const auto count = static_cast<std::size_t>(config.particles);
    Rng rng(config.seed);

    std::vector<std::vector<double>> x(count, std::vector<double>(dims));
    std::vector<std::vector<double>> v(count, std::vector<double>(dims));
    for (auto& p : x) {
        for (std::size_t d = 0; d < dims; ++d) p[d] = rng.uniform(config.bounds[d].lower, config.bounds[d].upper);
    }
    for (auto& p : v) {
        for (std::size_t d = 0; d < dims; ++d) {
            const double width = config.bounds[d].upper - config.bounds[d].lower;
            p[d] = rng.uniform(-0.1 * width, 0.1 * width);
        }
    }

    PsoMinimum out;
    auto evaluate = [&](const std::vector<double>& position) {
        out.evaluated.push_back(position);
        ++out.evaluations;
        const double value = function(position);
        return std::isfinite(value) ? value : kUnusable;
    };

    auto personal = x;
    std::vector<double> personal_value(count);
    out.value = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < count; ++i) {
        personal_value[i] = evaluate(x[i]);
        if (personal_value[i] < out.value) {
            out.value = personal_value[i];
            out.position = x[i];
        }
    }

    for (int iter = 0; iter < config.iterations; ++iter) {
        for (std::size_t i = 0; i < count; ++i) {
            for (std::size_t d = 0; d < dims; ++d) {
                const auto& b = config.bounds[d];
                const double width = b.upper - b.lower;
                const double r1 = rng.uniform();
                const double r2 = rng.uniform();
                double vel = config.inertia * v[i][d] + config.cognitive * r1 * (personal[i][d] - x[i][d]) +
                             config.social * r2 * (out.position[d] - x[i][d]);
                vel = std::clamp(vel, -width, width);
                v[i][d] = vel;
                x[i][d] = std::clamp(x[i][d] + vel, b.lower, b.upper);
            }
        }
        // Global best is updated once per iteration, after every particle moved.
        for (std::size_t i = 0; i < count; ++i) {
            const double value = evaluate(x[i]);
            if (value < personal_value[i]) {
                personal_value[i] = value;
                personal[i] = x[i];
            }
        }
        for (std::size_t i = 0; i < count; ++i) {
            if (personal_value[i] < out.value) {
                out.value = personal_value[i];
                out.position = personal[i];
            }
        }
    }
    return out;
}

ClusterParams decode_position(Algorithm algorithm, std::span<const double> position, const std::vector<Bounds>& bounds,
                              Eigen::Index rows) {
    ClusterParams params;
    if (algorithm == Algorithm::Dbscan) {
        params.eps = position[0];
        params.min_samples = round_within(position[1], std::max(1.0, bounds[1].lower), bounds[1].upper);
        return params;
    }
    const double hi = std::min(bounds[0].upper, static_cast<double>(rows));
    params.k = round_within(position[0], std::max(1.0, bounds[0].lower), hi);
    return params;
}

SearchReport pso_search(const Eigen::MatrixXd& data, const SearchConfig& config) {
    const std::size_t expected_dims = config.algorithm == Algorithm::Dbscan ? 2 : 1;
    if (config.pso.bounds.size() != expected_dims) {
        throw Error(ErrorCode::InvalidArgument, std::string(to_string(config.algorithm)) + " search needs " +
                                                    std::to_string(expected_dims) + " bound(s)");
    }
    if (config.algorithm != Algorithm::Dbscan && std::ceil(std::max(1.0, config.pso.bounds[0].lower)) > data.rows()) {
        throw Error(ErrorCode::KTooLarge, "lower k bound exceeds row count");
    }

    SearchReport report;
    using Key = std::tuple<int, double, int>;
    std::map<Key, ClusteringResult> cache;

    auto run = [&](const ClusterParams& params) -> const ClusteringResult& {
        const Key key{params.k, params.eps, params.min_samples};
        auto it = cache.find(key);
        if (it != cache.end()) return it->second;
        ClusteringResult result;
        switch (config.algorithm) {
            case Algorithm::KMeans: result = kmeans(data, params.k, config.pso.seed, config.kmeans); break;
            case Algorithm::Agglomerative: result = agglomerative(data, params.k); break;
            case Algorithm::Dbscan: result = dbscan(data, params.eps, params.min_samples); break;
        }
        return cache.emplace(key, std::move(result)).first->second;
    };

    auto function = [&](std::span<const double> position) {
        const auto params = decode_position(config.algorithm, position, config.pso.bounds, data.rows());
        report.evaluated.push_back(params);
        return -run(params).objective;
    };
    pso_minimize(function, config.pso);

    report.distinct_evaluations = cache.size();
    const ClusteringResult* best_gated = nullptr;
    const ClusteringResult* best_any = nullptr;
    // std::map iteration order makes tie-breaking deterministic.
    for (const auto& [key, result] : cache) {
        if (best_any == nullptr || result.objective > best_any->objective) best_any = &result;
        if (result.n_clusters >= 2 && result.silhouette > config.silhouette_gate &&
            (best_gated == nullptr || result.objective > best_gated->objective)) {
            best_gated = &result;
        }
    }
    report.below_gate = best_gated == nullptr;
    report.best = best_gated != nullptr ? *best_gated : *best_any;
    return report;
}

SplitReport split_dominant(const Eigen::MatrixXd& data, const ClusteringResult& result, double dominance_threshold,
                           const SearchConfig& config) {
    SplitReport report;
    report.result = result;
    const auto sizes = result.cluster_sizes();
    if (sizes.empty()) return report;

    const auto largest = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
    const double share = static_cast<double>(sizes[static_cast<std::size_t>(largest)]) /
                         static_cast<double>(result.labels.size());
    if (share <= dominance_threshold) return report;

    std::vector<Eigen::Index> rows;
    for (std::size_t i = 0; i < result.labels.size(); ++i) {
        if (result.labels[i] == largest) rows.push_back(static_cast<Eigen::Index>(i));
    }
    if (rows.size() < 3) return report;
    const Eigen::MatrixXd subset = select_rows(data, rows);

    SearchConfig sub = config;
    if (sub.algorithm != Algorithm::Dbscan) {
        auto& b = sub.pso.bounds.at(0);
        b.upper = std::min(b.upper, static_cast<double>(rows.size() - 1));
        b.lower = std::max(2.0, std::min(b.lower, b.upper - 1.0));
        if (!(b.lower < b.upper)) return report;
    }
    auto sub_report = pso_search(subset, sub);
    const auto sub_labels = canonical_labels(sub_report.best.labels);
    const int sub_count = count_clusters(sub_labels);

    std::vector<int> merged(result.labels.size());
    std::map<int, int> others;
    int next_id = sub_count;
    for (std::size_t id = 0; id < sizes.size(); ++id) {
        if (static_cast<int>(id) != largest && sizes[id] > 0) others[static_cast<int>(id)] = next_id++;
    }
    std::size_t cursor = 0;
    for (std::size_t i = 0; i < result.labels.size(); ++i) {
        const int label = result.labels[i];
        if (label == largest) {
            merged[i] = sub_labels[cursor++];
        } else if (label == kNoise) {
            merged[i] = kNoise;
        } else {
            merged[i] = others.at(label);
        }
    }

    ClusteringResult spliced = result;
    spliced.labels = std::move(merged);
    spliced.inertia = 0.0;
    finalize(spliced, data);
    if (spliced.algorithm != Algorithm::Dbscan) spliced.params.k = spliced.n_clusters;

    report.result = std::move(spliced);
    report.split_cluster = largest;
    report.sub_search = std::move(sub_report);
    return report;
}

}  // namespace zscore::cluster
