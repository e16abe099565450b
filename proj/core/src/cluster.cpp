#include "zscore/cluster.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <numeric>
#include <set>

#include "zscore/common.hpp"
#include "zscore/rng.hpp"

namespace zscore::cluster {
namespace {

double squared_distance(const Eigen::MatrixXd& data, Eigen::Index i, Eigen::Index j) {
    return (data.row(i) - data.row(j)).squaredNorm();
}

void require_k(const Eigen::MatrixXd& data, int k) {
    if (k < 1) throw Error(ErrorCode::InvalidArgument, "k must be positive, got " + std::to_string(k));
    if (k > data.rows()) {
        throw Error(ErrorCode::KTooLarge,
                    "k=" + std::to_string(k) + " exceeds " + std::to_string(data.rows()) + " rows");
    }
}

struct LloydRun {
    std::vector<int> labels;
    double inertia = std::numeric_limits<double>::infinity();
};

LloydRun lloyd(const Eigen::MatrixXd& data, int k, std::uint64_t seed, const KMeansOptions& options) {
    const Eigen::Index n = data.rows();
    Rng rng(seed);

    // k-means++ seeding
    Eigen::MatrixXd centers(k, data.cols());
    centers.row(0) = data.row(static_cast<Eigen::Index>(rng.index(static_cast<std::uint64_t>(n))));
    Eigen::VectorXd nearest(n);
    for (Eigen::Index i = 0; i < n; ++i) nearest(i) = (data.row(i) - centers.row(0)).squaredNorm();
    for (int c = 1; c < k; ++c) {
        const double total = nearest.sum();
        Eigen::Index pick = 0;
        if (total > 0.0) {
            const double target = rng.uniform() * total;
            double acc = 0.0;
            pick = n - 1;
            for (Eigen::Index i = 0; i < n; ++i) {
                acc += nearest(i);
                if (acc > target && nearest(i) > 0.0) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = static_cast<Eigen::Index>(rng.index(static_cast<std::uint64_t>(n)));
        }
        centers.row(c) = data.row(pick);
        for (Eigen::Index i = 0; i < n; ++i) {
            nearest(i) = std::min(nearest(i), (data.row(i) - centers.row(c)).squaredNorm());
        }
    }

    LloydRun run;
    run.labels.assign(static_cast<std::size_t>(n), 0);
    Eigen::VectorXd best_dist(n);
    for (int iter = 0; iter < options.max_iterations; ++iter) {
        for (Eigen::Index i = 0; i < n; ++i) {
            int best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (int c = 0; c < k; ++c) {
                const double d = (data.row(i) - centers.row(c)).squaredNorm();
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            run.labels[static_cast<std::size_t>(i)] = best;
            best_dist(i) = best_d;
        }

        Eigen::MatrixXd next = Eigen::MatrixXd::Zero(k, data.cols());
        std::vector<int> counts(static_cast<std::size_t>(k), 0);
        for (Eigen::Index i = 0; i < n; ++i) {
            const int c = run.labels[static_cast<std::size_t>(i)];
            next.row(c) += data.row(i);
            ++counts[static_cast<std::size_t>(c)];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[static_cast<std::size_t>(c)] > 0) {
                next.row(c) /= counts[static_cast<std::size_t>(c)];
                continue;
            }
            // Empty cluster: steal the point farthest from its centroid.
            Eigen::Index far = 0;
            best_dist.maxCoeff(&far);
            next.row(c) = data.row(far);
            best_dist(far) = 0.0;
            const int donor = run.labels[static_cast<std::size_t>(far)];
            run.labels[static_cast<std::size_t>(far)] = c;
            counts[static_cast<std::size_t>(c)] = 1;
            --counts[static_cast<std::size_t>(donor)];
        }

        double shift = 0.0;
        for (int c = 0; c < k; ++c) shift = std::max(shift, (next.row(c) - centers.row(c)).norm());
        centers = next;
        if (shift < options.tolerance) break;
    }

    // Final assignment against the converged centers.
    run.inertia = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        int best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (int c = 0; c < k; ++c) {
            const double d = (data.row(i) - centers.row(c)).squaredNorm();
            if (d < best_d) {
                best_d = d;
                best = c;
            }
        }
        run.labels[static_cast<std::size_t>(i)] = best;
        run.inertia += best_d;
    }
    return run;
}

}  // namespace

std::string_view to_string(Algorithm algorithm) {
    switch (algorithm) {
        case Algorithm::KMeans: return "kmeans";
        case Algorithm::Agglomerative: return "agglomerative";
        case Algorithm::Dbscan: return "dbscan";
    }
    return "kmeans";
}

Algorithm parse_algorithm(std::string_view text) {
    if (text == "kmeans") return Algorithm::KMeans;
    if (text == "agglomerative") return Algorithm::Agglomerative;
    if (text == "dbscan") return Algorithm::Dbscan;
    throw Error(ErrorCode::InvalidArgument, "unknown clustering algorithm '" + std::string(text) + "'");
}

std::vector<std::size_t> ClusteringResult::cluster_sizes() const {
    std::vector<std::size_t> sizes;
    for (int label : labels) {
        if (label < 0) continue;
        if (static_cast<std::size_t>(label) >= sizes.size()) sizes.resize(static_cast<std::size_t>(label) + 1, 0);
        ++sizes[static_cast<std::size_t>(label)];
    }
    return sizes;
}

double objective(double silhouette, int n_clusters) {
    return std::fma(10.0, silhouette, static_cast<double>(n_clusters));
}

int count_clusters(const std::vector<int>& labels) {
    std::set<int> distinct;
    for (int label : labels) {
        if (label != kNoise) distinct.insert(label);
    }
    return static_cast<int>(distinct.size());
}

double silhouette_score(const Eigen::MatrixXd& data, const std::vector<int>& labels) {
    if (static_cast<Eigen::Index>(labels.size()) != data.rows()) {
        throw Error(ErrorCode::InvalidArgument, "labels/rows size mismatch");
    }
    // Dense ids for non-noise labels.
    std::map<int, int> dense;
    for (int label : labels) {
        if (label != kNoise) dense.emplace(label, 0);
    }
    if (dense.size() < 2) throw Error(ErrorCode::SingleCluster, "silhouette needs at least two clusters");
    int next = 0;
    for (auto& [label, id] : dense) id = next++;

    const auto m = static_cast<std::size_t>(next);
    std::vector<int> ids(labels.size(), -1);
    std::vector<double> sizes(m, 0.0);
    std::vector<Eigen::Index> members;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == kNoise) continue;
        ids[i] = dense[labels[i]];
        sizes[static_cast<std::size_t>(ids[i])] += 1.0;
        members.push_back(static_cast<Eigen::Index>(i));
    }

    std::vector<double> sums(m);
    double total = 0.0;
    for (Eigen::Index i : members) {
        std::fill(sums.begin(), sums.end(), 0.0);
        for (Eigen::Index j : members) {
            if (i == j) continue;
            sums[static_cast<std::size_t>(ids[static_cast<std::size_t>(j)])] += std::sqrt(squared_distance(data, i, j));
        }
        const auto own = static_cast<std::size_t>(ids[static_cast<std::size_t>(i)]);
        if (sizes[own] <= 1.0) continue;  // singleton contributes 0
        const double a = sums[own] / (sizes[own] - 1.0);
        double b = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < m; ++c) {
            if (c != own) b = std::min(b, sums[c] / sizes[c]);
        }
        const double denom = std::max(a, b);
        if (denom > 0.0) total += (b - a) / denom;
    }
    return total / static_cast<double>(members.size());
}

void finalize(ClusteringResult& result, const Eigen::MatrixXd& data) {
    result.n_clusters = count_clusters(result.labels);
    result.all_noise = result.n_clusters == 0;
    if (result.all_noise) {
        result.silhouette = -1.0;
        result.objective = -std::numeric_limits<double>::infinity();
        return;
    }
    result.silhouette = result.n_clusters >= 2 ? silhouette_score(data, result.labels) : -1.0;
    result.objective = objective(result.silhouette, result.n_clusters);
}

ClusteringResult kmeans(const Eigen::MatrixXd& data, int k, std::uint64_t seed, const KMeansOptions& options) {
    require_k(data, k);
    LloydRun best;
    for (int r = 0; r < std::max(1, options.restarts); ++r) {
        auto run = lloyd(data, k, derive_seed(seed, static_cast<std::uint64_t>(r)), options);
        if (run.inertia < best.inertia) best = std::move(run);
    }
    ClusteringResult result;
    result.algorithm = Algorithm::KMeans;
    result.params.k = k;
    result.labels = std::move(best.labels);
    result.inertia = best.inertia;
    finalize(result, data);
    return result;
}

std::vector<WardMerge> ward_linkage(const Eigen::MatrixXd& data) {
    const auto n = static_cast<std::size_t>(data.rows());
    std::vector<WardMerge> merges;
    if (n < 2) return merges;

    // Full symmetric matrix of Lance-Williams Ward distances between active clusters.
    std::vector<double> dist(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double d = squared_distance(data, static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    std::vector<double> size(n, 1.0);
    std::vector<bool> active(n, true);
    std::vector<int> node_id(n);  // dendrogram node represented by each active slot
    std::iota(node_id.begin(), node_id.end(), 0);
    int next_node = static_cast<int>(n);

    struct RawMerge {
        int a, b;
        double height;
        std::size_t order;
    };
    std::vector<RawMerge> raw;
    std::vector<std::size_t> chain;
    std::size_t remaining = n;

    // Nearest-neighbour chain; valid because Ward linkage is reducible.
    while (remaining > 1) {
        if (chain.empty()) {
            for (std::size_t i = 0; i < n; ++i) {
                if (active[i]) {
                    chain.push_back(i);
                    break;
                }
            }
        }
        while (true) {
            const std::size_t top = chain.back();
            const std::size_t prev = chain.size() >= 2 ? chain[chain.size() - 2] : n;
            std::size_t best = n;
            double best_d = std::numeric_limits<double>::infinity();
            if (prev != n) {
                best = prev;
                best_d = dist[top * n + prev];
            }
            for (std::size_t j = 0; j < n; ++j) {
                if (!active[j] || j == top) continue;
                const double d = dist[top * n + j];
                if (d < best_d) {
                    best_d = d;
                    best = j;
                }
            }
            if (best == prev) {
                chain.pop_back();
                chain.pop_back();
                const std::size_t a = std::min(top, prev);
                const std::size_t b = std::max(top, prev);
                raw.push_back(RawMerge{node_id[a], node_id[b], best_d, raw.size()});
                // Lance-Williams update into slot a.
                for (std::size_t k = 0; k < n; ++k) {
                    if (!active[k] || k == a || k == b) continue;
                    const double nk = size[k];
                    const double updated = ((size[a] + nk) * dist[a * n + k] + (size[b] + nk) * dist[b * n + k] -
                                            nk * dist[a * n + b]) /
                                           (size[a] + size[b] + nk);
                    dist[a * n + k] = updated;
                    dist[k * n + a] = updated;
                }
                size[a] += size[b];
                active[b] = false;
                node_id[a] = next_node++;
                --remaining;
                break;
            }
            chain.push_back(best);
        }
    }

    std::stable_sort(raw.begin(), raw.end(), [](const RawMerge& x, const RawMerge& y) { return x.height < y.height; });
    // Node ids were assigned in chain order; remap to the sorted order so that
    // merge i creates node n + i.
    std::map<int, int> remap;
    for (std::size_t i = 0; i < n; ++i) remap[static_cast<int>(i)] = static_cast<int>(i);
    // Old node id of raw merge m is n + m.order.
    for (std::size_t i = 0; i < raw.size(); ++i) {
        remap[static_cast<int>(n + raw[i].order)] = static_cast<int>(n + i);
    }
    for (const auto& m : raw) merges.push_back(WardMerge{remap.at(m.a), remap.at(m.b), m.height});
    return merges;
}

ClusteringResult agglomerative(const Eigen::MatrixXd& data, int k) {
    require_k(data, k);
    const auto n = static_cast<std::size_t>(data.rows());
    const auto merges = ward_linkage(data);

    std::vector<std::size_t> parent(2 * n);
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&parent](std::size_t x) {
        while (parent[x] != x) {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        return x;
    };
    const std::size_t applied = n - static_cast<std::size_t>(k);
    for (std::size_t i = 0; i < applied; ++i) {
        const std::size_t node = n + i;
        parent[find(static_cast<std::size_t>(merges[i].left))] = node;
        parent[find(static_cast<std::size_t>(merges[i].right))] = node;
    }

    ClusteringResult result;
    result.algorithm = Algorithm::Agglomerative;
    result.params.k = k;
    result.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) result.labels[i] = static_cast<int>(find(i));
    result.labels = canonical_labels(result.labels);
    finalize(result, data);
    return result;
}

ClusteringResult dbscan(const Eigen::MatrixXd& data, double eps, int min_samples) {
    if (!(eps > 0.0)) throw Error(ErrorCode::InvalidArgument, "eps must be positive");
    if (min_samples < 1) throw Error(ErrorCode::InvalidArgument, "min_samples must be >= 1");
    const auto n = static_cast<std::size_t>(data.rows());
    const double eps2 = eps * eps;

    std::vector<std::vector<std::size_t>> neighbours(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (squared_distance(data, static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) <= eps2) {
                neighbours[i].push_back(j);
            }
        }
    }
    auto is_core = [&](std::size_t i) { return neighbours[i].size() >= static_cast<std::size_t>(min_samples); };

    constexpr int kUnvisited = -2;
    std::vector<int> labels(n, kUnvisited);
    int cluster = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] != kUnvisited) continue;
        if (!is_core(i)) {
            labels[i] = kNoise;
            continue;
        }
        labels[i] = cluster;
        std::vector<std::size_t> frontier = neighbours[i];
        for (std::size_t f = 0; f < frontier.size(); ++f) {
            const std::size_t j = frontier[f];
            if (labels[j] == kNoise) labels[j] = cluster;  // border point
            if (labels[j] != kUnvisited) continue;
            labels[j] = cluster;
            if (is_core(j)) frontier.insert(frontier.end(), neighbours[j].begin(), neighbours[j].end());
        }
        ++cluster;
    }

    ClusteringResult result;
    result.algorithm = Algorithm::Dbscan;
    result.params.eps = eps;
    result.params.min_samples = min_samples;
    result.labels = std::move(labels);
    finalize(result, data);
    return result;
}

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.size() != b.size()) throw Error(ErrorCode::InvalidArgument, "label vectors differ in length");
    const double n = static_cast<double>(a.size());
    std::map<std::pair<int, int>, double> table;
    std::map<int, double> rows;
    std::map<int, double> cols;
    for (std::size_t i = 0; i < a.size(); ++i) {
        table[{a[i], b[i]}] += 1.0;
        rows[a[i]] += 1.0;
        cols[b[i]] += 1.0;
    }
    auto pairs = [](double x) { return x * (x - 1.0) / 2.0; };
    double index = 0.0;
    for (const auto& [key, count] : table) index += pairs(count);
    double sum_rows = 0.0;
    for (const auto& [key, count] : rows) sum_rows += pairs(count);
    double sum_cols = 0.0;
    for (const auto& [key, count] : cols) sum_cols += pairs(count);
    const double expected = sum_rows * sum_cols / pairs(n);
    const double max_index = 0.5 * (sum_rows + sum_cols);
    if (max_index == expected) return 1.0;
    return (index - expected) / (max_index - expected);
}

std::vector<int> canonical_labels(const std::vector<int>& labels) {
    std::map<int, int> ids;
    std::vector<int> out;
    out.reserve(labels.size());
    for (int label : labels) {
        if (label == kNoise) {
            out.push_back(kNoise);
            continue;
        }
        auto [it, inserted] = ids.emplace(label, static_cast<int>(ids.size()));
        out.push_back(it->second);
    }
    return out;
}

nlohmann::ordered_json to_json(const ClusteringResult& result, std::uint64_t seed) {
    nlohmann::ordered_json params;
    if (result.algorithm == Algorithm::Dbscan) {
        params["eps"] = result.params.eps;
        params["min_samples"] = result.params.min_samples;
    } else {
        params["k"] = result.params.k;
    }
    nlohmann::ordered_json doc;
    doc["algorithm"] = to_string(result.algorithm);
    doc["params"] = params;
    doc["seed"] = seed;
    doc["silhouette"] = result.silhouette;
    doc["objective"] = std::isfinite(result.objective) ? nlohmann::ordered_json(result.objective) : nlohmann::ordered_json(nullptr);
    doc["n_clusters"] = result.n_clusters;
    doc["cluster_sizes"] = result.cluster_sizes();
    doc["noise"] = std::count(result.labels.begin(), result.labels.end(), kNoise);
    return doc;
}

void write_labels_csv(std::ostream& out, const LabelTable& table) {
    if (table.wallets.size() != table.labels.size()) {
        throw Error(ErrorCode::InvalidArgument, "label table has mismatched columns");
    }
    out << "wallet,cluster_id\n";
    for (std::size_t i = 0; i < table.wallets.size(); ++i) out << table.wallets[i] << ',' << table.labels[i] << '\n';
}

LabelTable read_labels_csv(std::istream& in) {
    LabelTable table;
    std::string line;
    if (!std::getline(in, line) || line.rfind("wallet,cluster_id", 0) != 0) {
        throw Error(ErrorCode::Malformed, "labels csv needs a wallet,cluster_id header");
    }
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw Error(ErrorCode::Malformed, "labels row '" + line + "'");
        table.wallets.push_back(line.substr(0, comma));
        const auto end = line.find(',', comma + 1);
        table.labels.push_back(static_cast<int>(parse_i64(line.substr(comma + 1, end == std::string::npos ? end : end - comma - 1))));
    }
    return table;
}

}  // namespace zscore::cluster
