#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "oodguard/archive.hpp"

namespace oodguard {

enum class Activation { relu, identity };

struct DenseLayer {
    Eigen::MatrixXd weight;  // [out, in]
    Eigen::VectorXd bias;    // [out]
    Activation activation = Activation::relu;
};

// Dense feedforward classifier. The last layer emits logits (identity
// activation); everything is double precision and single threaded.
struct MicroNet {
    std::vector<DenseLayer> layers;

    int input_dim() const { return static_cast<int>(layers.front().weight.cols()); }
    int num_classes() const { return static_cast<int>(layers.back().weight.rows()); }
};

// Seeded init: uniform +-1/sqrt(fan_in), hidden layers ReLU, last identity.
MicroNet make_net(const std::vector<int>& widths, std::uint64_t seed);

struct ForwardTrace {
    std::vector<Eigen::VectorXd> pre;   // affine outputs per layer
    std::vector<Eigen::VectorXd> post;  // after activation; back() = logits
};

Eigen::VectorXd forward(const MicroNet& net, const Eigen::VectorXd& x);
ForwardTrace forward_trace(const MicroNet& net, const Eigen::VectorXd& x);

double cross_entropy(const Eigen::VectorXd& logits, int label);

// Exact reverse-mode d(cross_entropy)/dx; ReLU subgradient at 0 is 0.
Eigen::VectorXd input_gradient(const MicroNet& net, const Eigen::VectorXd& x, int label);

// Gradient of any scalar functional of one layer's post-activation features:
// the caller supplies d(functional)/d(features at layer_index) and gets the
// gradient pulled back to the input.
Eigen::VectorXd input_gradient_of_layer(const MicroNet& net, const Eigen::VectorXd& x,
                                        std::size_t layer_index,
                                        const Eigen::VectorXd& feature_gradient);

// x + epsilon * sign(d cross_entropy / dx), with sign(0) = 0.
Eigen::VectorXd fgsm(const MicroNet& net, const Eigen::VectorXd& x, int label, double epsilon);

struct TrainConfig {
    int epochs = 200;
    double learning_rate = 0.05;
    std::uint64_t seed = 0;
};

// Plain per-sample SGD on cross-entropy with seeded shuffling.
MicroNet train(MicroNet net, const Eigen::MatrixXd& inputs, const std::vector<int>& labels,
               const TrainConfig& config);

double train_accuracy(const MicroNet& net, const Eigen::MatrixXd& inputs,
                      const std::vector<int>& labels);

void save_net(const MicroNet& net, const std::filesystem::path& dir);
MicroNet load_net(const std::filesystem::path& dir);

enum class OodKind { far_cluster, near_midpoints };

// Gaussian-blob classification task with a matched OOD generator: far-OOD is
// a distant cluster, near-OOD sits on the midpoints of nearest-neighbor
// center pairs.
struct SyntheticTask {
    Eigen::MatrixXd centers;  // [K, D], pairwise distinct
    Eigen::RowVectorXd far_center;
    double sigma = 1.0;
    OodKind ood_kind = OodKind::far_cluster;
    std::uint64_t seed = 0;
};

// Classes 0..K-2 sit evenly on a circle of radius radius_sigmas * sigma; the
// last class sits at twice that radius on class 0's spoke. The far-OOD
// cluster is the circle's center, radius_sigmas sigmas from every ring
// class. Keeping it surrounded by training blobs (rather than beyond them)
// matters: there the net interpolates and every logit stays small, whereas
// past the data the piecewise-linear logits grow without bound and can make
// arbitrary OOD inputs look confident. Near-OOD midpoints then land either
// radially between the two same-spoke classes (where both stay confident) or
// between the remaining ring classes.
SyntheticTask make_blobs_task(int num_classes, int dim, double radius_sigmas, double sigma,
                              OodKind ood_kind, std::uint64_t seed);

struct TaskData {
    Eigen::MatrixXd train_inputs;  // [N_train, D]
    std::vector<int> train_labels;
    Eigen::MatrixXd test_inputs;
    std::vector<int> test_labels;
    Eigen::MatrixXd ood_inputs;
};

TaskData sample_task(const SyntheticTask& task, int n_train_per_class, int n_test_per_class,
                     int n_ood);

// Forward passes each row and collects every hidden layer plus logits (and
// the raw inputs and labels when given).
ActivationArchive make_archive(const MicroNet& net, const Eigen::MatrixXd& inputs,
                               const std::optional<std::vector<int>>& labels);

struct TaskArchives {
    ActivationArchive train;
    ActivationArchive test;
    ActivationArchive ood;
};

// Convenience wrapper: sample_task + make_archive for each split, with
// n_test_per_class = n_train_per_class.
TaskArchives generate_task(const MicroNet& net, const SyntheticTask& task, int n_per_class,
                           int n_ood);

}  // namespace oodguard
