#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "oodguard/errors.hpp"

namespace oodguard {

// log(sum_i exp(v[i]/t)) evaluated with the max shifted out so that logits up
// to +-1e4 neither overflow nor collapse to -inf.
inline double log_sum_exp(std::span<const double> values, double temperature = 1.0) {
    if (values.empty()) raise(Errc::empty_series, "log_sum_exp of no values");
    const double m = *std::max_element(values.begin(), values.end());
    double acc = 0.0;
    for (double v : values) acc += std::exp((v - m) / temperature);
    return m / temperature + std::log(acc);
}

// Nearest-rank percentile: rank = ceil(p/100 * N) on the ascending sort,
// 1-based. Deterministic across platforms; p in [0, 100].
inline double nearest_rank_percentile(std::vector<double> values, double p) {
    if (values.empty()) raise(Errc::empty_scores, "percentile of empty list");
    std::sort(values.begin(), values.end());
    const auto n = values.size();
    auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(n)));
    rank = std::clamp<std::size_t>(rank, 1, n);
    return values[rank - 1];
}

// sign(x) * |x|^(1/p). Keeps odd-signed correlations meaningful where a plain
// real root would be undefined for negatives at even p.
inline double signed_root(double x, int order) {
    if (order == 1) return x;
    const double mag = std::pow(std::abs(x), 1.0 / static_cast<double>(order));
    return x < 0 ? -mag : mag;
}

inline double sign(double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); }

}  // namespace oodguard
