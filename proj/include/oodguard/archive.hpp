#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "oodguard/tensor.hpp"

namespace oodguard {

struct NamedLayer {
    std::string name;
    TensorBuffer tensor;  // first axis = sample count

    bool operator==(const NamedLayer&) const = default;
};

// Per-layer features + logits (+ optional labels and raw inputs) for one
// dataset split. Immutable after load; safe to share across threads.
struct ActivationArchive {
    std::vector<NamedLayer> layers;          // forward order
    TensorBuffer logits;                     // [N, K]
    std::optional<TensorBuffer> labels;      // [N] i64
    std::optional<TensorBuffer> raw_inputs;  // [N, D]

    std::size_t sample_count() const { return logits.dim(0); }
    std::size_t num_classes() const { return logits.dim(1); }

    bool operator==(const ActivationArchive&) const = default;
};

// Checks the N-consistency, K >= 2, and label-range invariants; throws on
// violation. load_archive runs this on every load.
void validate_archive(const ActivationArchive& archive);

ActivationArchive load_archive(const std::filesystem::path& manifest_path);

// Writes <dir>/manifest.json plus one NPY file per tensor.
void save_archive(const ActivationArchive& archive, const std::filesystem::path& dir);

// Per-sample argmax over logits; ties break toward the lowest class index.
std::vector<int> predicted_classes(const ActivationArchive& archive);

// New archive holding the given samples (in the given order) from every
// tensor, payload bits untouched.
ActivationArchive subset_archive(const ActivationArchive& archive,
                                 const std::vector<std::size_t>& indices);

// [N, ...] tensor as an N x (product of trailing dims) double matrix.
Eigen::MatrixXd to_matrix(const TensorBuffer& tensor);

// Layer features reduced to [N, C] doubles: rank-2 passes through, higher
// ranks are globally average-pooled over the spatial axes.
Eigen::MatrixXd pooled_features(const TensorBuffer& layer_tensor);

}  // namespace oodguard
