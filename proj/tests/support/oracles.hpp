#pragma once

// Straightforward reference implementations, written from the textbook
// definitions and kept deliberately naive.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <vector>

#include <Eigen/Core>

namespace oracle {

inline double distance(const Eigen::MatrixXd& x, Eigen::Index i, Eigen::Index j) {
    double s = 0.0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) s += (x(i, c) - x(j, c)) * (x(i, c) - x(j, c));
    return std::sqrt(s);
}

// Mean of (b - a) / max(a, b) over non-noise points; singletons score 0.
inline double silhouette(const Eigen::MatrixXd& x, const std::vector<int>& labels) {
    std::set<int> ids;
    for (int l : labels) {
        if (l >= 0) ids.insert(l);
    }
    double total = 0.0;
    int counted = 0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const int own = labels[static_cast<std::size_t>(i)];
        if (own < 0) continue;
        ++counted;
        std::map<int, double> sum;
        std::map<int, int> count;
        for (Eigen::Index j = 0; j < x.rows(); ++j) {
            const int other = labels[static_cast<std::size_t>(j)];
            if (j == i || other < 0) continue;
            sum[other] += distance(x, i, j);
            count[other] += 1;
        }
        if (count[own] == 0) continue;
        const double a = sum[own] / count[own];
        double b = INFINITY;
        for (int id : ids) {
            if (id != own && count[id] > 0) b = std::min(b, sum[id] / count[id]);
        }
        const double m = std::max(a, b);
        if (m > 0.0) total += (b - a) / m;
    }
    return total / counted;
}

// Pair-counting form of the adjusted Rand index.
inline double adjusted_rand(const std::vector<int>& a, const std::vector<int>& b) {
    const std::size_t n = a.size();
    double both = 0, in_a = 0, in_b = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const bool sa = a[i] == a[j], sb = b[i] == b[j];
            both += sa && sb;
            in_a += sa;
            in_b += sb;
        }
    }
    const double pairs = static_cast<double>(n) * static_cast<double>(n - 1) / 2.0;
    const double expected = in_a * in_b / pairs;
    const double max_index = (in_a + in_b) / 2.0;
    if (max_index == expected) return 1.0;
    return (both - expected) / (max_index - expected);
}

inline double log_choose(double n, double k) { return std::lgamma(n + 1) - std::lgamma(k + 1) - std::lgamma(n - k + 1); }

// P(X >= at_least) for X ~ Binomial(trials, p).
inline double binomial_tail(int trials, double p, int at_least) {
    double total = 0.0;
    for (int k = at_least; k <= trials; ++k) {
        total += std::exp(log_choose(trials, k)) * std::pow(p, k) * std::pow(1.0 - p, trials - k);
    }
    return total;
}

}  // namespace oracle
