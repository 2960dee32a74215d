#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "oodguard/archive.hpp"
#include "oodguard/score_series.hpp"

namespace oodguard {

// Element-wise min/max over the upper triangle (diagonal included, packed
// row-major) of one (class, layer, order) Gram matrix. A class never seen in
// the bounds partition keeps mins at +inf and maxs at -inf, which scores as a
// unit deviation per element.
struct GramBounds {
    std::vector<double> mins;
    std::vector<double> maxs;
};

struct GramProfile {
    std::vector<int> orders;
    std::vector<std::vector<std::vector<GramBounds>>> bounds;  // [class][layer][order]
    std::vector<double> expected_layer_deviation;              // floored at epsilon_div
    double threshold = 0.0;
    double epsilon_div = 1e-12;
    std::vector<std::string> layer_names;
    std::vector<std::size_t> layer_channels;
    std::size_t num_classes = 0;
};

inline const std::vector<int> kDefaultOrders{1, 2, 3, 4, 5};

// Sample's layer features as a channels x spatial matrix; dense layers get S=1.
Eigen::MatrixXd sample_feature_matrix(const TensorBuffer& layer_tensor, std::size_t sample);

// Upper triangle of signed-root((F^p)(F^p)^T), packed row-major. An empty
// spatial axis yields all zeros.
std::vector<double> gram_matrix(const Eigen::MatrixXd& feature_map, int order);

// 0 inside [lo, hi]; otherwise the overshoot relative to the violated bound.
double deviation(double value, double lo, double hi, double epsilon_div);

GramProfile fit_profile(const ActivationArchive& train,
                        const std::vector<int>& orders = kDefaultOrders,
                        double holdout_fraction = 0.2, double epsilon_div = 1e-12);

// Normalized total deviation per sample, evaluated against each sample's
// predicted-class bounds.
std::vector<double> total_deviations(const GramProfile& profile, const ActivationArchive& data);

// Canonical orientation: -total_deviation, so higher = more in-distribution.
ScoreSeries score(const GramProfile& profile, const ActivationArchive& data);

bool is_ood(const GramProfile& profile, double total_deviation);

void save_gram(const GramProfile& profile, const std::filesystem::path& dir);
GramProfile load_gram(const std::filesystem::path& dir);

}  // namespace oodguard
