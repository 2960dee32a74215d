#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "oodguard/archive.hpp"
#include "oodguard/micronet.hpp"
#include "oodguard/score_series.hpp"

namespace oodguard {

struct LayerGaussians {
    Eigen::MatrixXd means;      // [K, C], row c = class mean
    Eigen::MatrixXd precision;  // [C, C], inverse of the tied covariance
    int layer_index = 0;
    double ridge = 0.0;  // lambda actually added before inversion
};

struct LayerWeights {
    std::vector<double> alpha;
    double bias = 0.0;
};

struct MahalanobisModel {
    std::vector<LayerGaussians> layers;
    std::vector<std::string> layer_names;
    LayerWeights weights;
    double noise_magnitude = 0.0;
};

// Tied covariance per layer: (1/N) * sum_c sum_{i: y_i=c} (f_i - mu_c)(f_i - mu_c)^T
// plus ridge * I. Without an explicit ridge each layer gets
// max(1e-6 * trace(scatter)/C, 1e-12). Cholesky failures retry with 10x the
// ridge up to three times before giving up.
std::vector<LayerGaussians> fit_gaussians(const ActivationArchive& train,
                                          std::optional<double> ridge = std::nullopt);

// max over classes c of -(f - mu_c)^T P (f - mu_c); always <= 0.
double layer_score(const LayerGaussians& gaussians, const Eigen::VectorXd& feature);

// [N, L] matrix of layer scores for every sample, spatial axes mean-pooled.
Eigen::MatrixXd layer_score_matrix(const std::vector<LayerGaussians>& layers,
                                   const std::vector<std::string>& layer_names,
                                   const ActivationArchive& data);

LayerWeights uniform_weights(std::size_t num_layers);

// Logistic regression separating in-distribution (label 1) from adversarial
// (label 0) layer-score rows: 500 full-batch epochs at step 0.01 on per-layer
// standardized inputs, with the learned weights mapped back to raw scores.
LayerWeights fit_layer_weights(const Eigen::MatrixXd& in_scores,
                               const Eigen::MatrixXd& adversarial_scores);
LayerWeights fit_layer_weights(const ActivationArchive& in_dist,
                               const ActivationArchive& adversarial,
                               const MahalanobisModel& model);

// Weighted sum over layers, canonical orientation (higher = in-distribution).
ScoreSeries score(const MahalanobisModel& model, const ActivationArchive& data);

// End-to-end variant: each layer scores a copy of the input nudged by
// noise_magnitude * sign of that layer score's input gradient, which raises
// in-distribution scores more than out-of-distribution ones.
ScoreSeries score_perturbed(const MahalanobisModel& model, const MicroNet& net,
                            const Eigen::MatrixXd& inputs);

inline constexpr std::array<double, 8> kNoiseGrid{0.0,   0.0005, 0.001, 0.0014,
                                                  0.002, 0.0024, 0.005, 0.01};

// Picks the grid value maximizing combiner AUROC between clean inputs and
// their FGSM counterparts (attack strength attack_epsilon). Ties go to the
// smaller magnitude.
double grid_search_noise_magnitude(const MahalanobisModel& model, const MicroNet& net,
                                   const Eigen::MatrixXd& in_inputs,
                                   const std::vector<int>& labels, double attack_epsilon);

void save_mahalanobis(const MahalanobisModel& model, const std::filesystem::path& dir);
MahalanobisModel load_mahalanobis(const std::filesystem::path& dir);

}  // namespace oodguard
