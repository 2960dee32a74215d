#include "oodguard/archive.hpp"

#include <fstream>

#include <json.hpp>

namespace oodguard {
namespace {

using nlohmann::json;

json load_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) raise(Errc::io_failure, "cannot open " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        raise(Errc::malformed_header, "manifest " + path.string() + ": " + e.what());
    }
    return doc;
}

TensorBuffer load_referenced(const json& entry, const std::filesystem::path& base,
                             const char* what) {
    if (!entry.is_object() || !entry.contains("file") || !entry["file"].is_string()) {
        raise(Errc::malformed_header, std::string(what) + " entry needs a \"file\" field");
    }
    return read_npy_file(base / entry["file"].get<std::string>());
}

}  // namespace

void validate_archive(const ActivationArchive& archive) {
    if (archive.logits.rank() != 2) {
        raise(Errc::missing_logits,
              "logits must be [N, K], got rank " + std::to_string(archive.logits.rank()));
    }
    const std::size_t n = archive.logits.dim(0);
    const std::size_t k = archive.logits.dim(1);
    if (k < 2) raise(Errc::missing_logits, "need K >= 2 classes, got " + std::to_string(k));

    for (const auto& layer : archive.layers) {
        if (layer.tensor.rank() < 1 || layer.tensor.dim(0) != n) {
            raise(Errc::inconsistent_sample_count,
                  "layer '" + layer.name + "' has " +
                      std::to_string(layer.tensor.rank() > 0 ? layer.tensor.dim(0) : 0) +
                      " samples, logits have " + std::to_string(n));
        }
        if (!layer.tensor.is_floating()) {
            raise(Errc::unsupported_dtype, "layer '" + layer.name + "' must be float");
        }
    }
    if (archive.labels) {
        if (archive.labels->rank() != 1 || archive.labels->dim(0) != n) {
            raise(Errc::inconsistent_sample_count, "labels do not match sample count");
        }
        if (archive.labels->dtype() != Dtype::i64) {
            raise(Errc::unsupported_dtype, "labels must be int64");
        }
        for (const auto label : archive.labels->i64()) {
            if (label < 0 || static_cast<std::size_t>(label) >= k) {
                raise(Errc::label_out_of_range,
                      "label " + std::to_string(label) + " outside [0, " + std::to_string(k) + ")");
            }
        }
    }
    if (archive.raw_inputs) {
        if (archive.raw_inputs->rank() < 1 || archive.raw_inputs->dim(0) != n) {
            raise(Errc::inconsistent_sample_count, "raw inputs do not match sample count");
        }
    }
}

ActivationArchive load_archive(const std::filesystem::path& manifest_path) {
    const json doc = load_json(manifest_path);
    const auto base = manifest_path.parent_path();

    ActivationArchive archive;
    if (!doc.contains("logits")) raise(Errc::missing_logits, "manifest has no logits entry");
    archive.logits = load_referenced(doc["logits"], base, "logits");

    if (doc.contains("layers")) {
        if (!doc["layers"].is_array()) raise(Errc::malformed_header, "layers must be an array");
        for (const auto& entry : doc["layers"]) {
            if (!entry.contains("name") || !entry["name"].is_string()) {
                raise(Errc::malformed_header, "layer entry needs a \"name\" field");
            }
            if (entry.contains("role") &&
                (!entry["role"].is_string() || entry["role"].get<std::string>() != "activation")) {
                raise(Errc::malformed_header,
                      "layer role must be \"activation\", got " + entry["role"].dump());
            }
            archive.layers.push_back(
                {entry["name"].get<std::string>(), load_referenced(entry, base, "layer")});
        }
    }
    if (doc.contains("labels")) {
        archive.labels = load_referenced(doc["labels"], base, "labels");
    }
    if (doc.contains("inputs")) {
        archive.raw_inputs = load_referenced(doc["inputs"], base, "inputs");
    }

    validate_archive(archive);
    return archive;
}

void save_archive(const ActivationArchive& archive, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    json manifest;
    manifest["layers"] = json::array();
    for (std::size_t i = 0; i < archive.layers.size(); ++i) {
        const std::string file = "layer" + std::to_string(i) + ".npy";
        write_npy_file(dir / file, archive.layers[i].tensor);
        manifest["layers"].push_back(
            {{"name", archive.layers[i].name}, {"file", file}, {"role", "activation"}});
    }
    write_npy_file(dir / "logits.npy", archive.logits);
    manifest["logits"] = {{"file", "logits.npy"}};
    if (archive.labels) {
        write_npy_file(dir / "labels.npy", *archive.labels);
        manifest["labels"] = {{"file", "labels.npy"}};
    }
    if (archive.raw_inputs) {
        write_npy_file(dir / "inputs.npy", *archive.raw_inputs);
        manifest["inputs"] = {{"file", "inputs.npy"}};
    }

    std::ofstream out(dir / "manifest.json");
    if (!out) raise(Errc::io_failure, "cannot write manifest in " + dir.string());
    out << manifest.dump(2) << "\n";
}

std::vector<int> predicted_classes(const ActivationArchive& archive) {
    const std::size_t n = archive.sample_count();
    const std::size_t k = archive.num_classes();
    std::vector<int> out(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        int best = 0;
        double best_value = archive.logits.at_f64(i * k);
        for (std::size_t j = 1; j < k; ++j) {
            const double v = archive.logits.at_f64(i * k + j);
            if (v > best_value) {
                best_value = v;
                best = static_cast<int>(j);
            }
        }
        out[i] = best;
    }
    return out;
}

ActivationArchive subset_archive(const ActivationArchive& archive,
                                 const std::vector<std::size_t>& indices) {
    const std::size_t n = archive.sample_count();
    for (const std::size_t i : indices) {
        if (i >= n) raise(Errc::inconsistent_sample_count, "subset index out of range");
    }

    const auto take_rows = [&](const TensorBuffer& t) {
        std::vector<std::size_t> shape = t.shape();
        shape[0] = indices.size();
        const std::size_t row = t.dim(0) > 0 ? t.size() / t.dim(0) : 0;
        return std::visit(
            [&](const auto& data) {
                std::decay_t<decltype(data)> out;
                out.reserve(indices.size() * row);
                for (const std::size_t i : indices) {
                    out.insert(out.end(), data.begin() + static_cast<std::ptrdiff_t>(i * row),
                               data.begin() + static_cast<std::ptrdiff_t>((i + 1) * row));
                }
                return TensorBuffer(shape, std::move(out));
            },
            t.storage());
    };

    ActivationArchive out;
    for (const auto& layer : archive.layers) {
        out.layers.push_back({layer.name, take_rows(layer.tensor)});
    }
    out.logits = take_rows(archive.logits);
    if (archive.labels) out.labels = take_rows(*archive.labels);
    if (archive.raw_inputs) out.raw_inputs = take_rows(*archive.raw_inputs);
    return out;
}

Eigen::MatrixXd to_matrix(const TensorBuffer& tensor) {
    if (tensor.rank() < 1) raise(Errc::dimension_mismatch, "to_matrix needs rank >= 1");
    const std::size_t n = tensor.dim(0);
    const std::size_t cols = n > 0 ? tensor.size() / n : 0;
    Eigen::MatrixXd m(n, cols);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                tensor.at_f64(i * cols + j);
        }
    }
    return m;
}

Eigen::MatrixXd pooled_features(const TensorBuffer& layer_tensor) {
    return to_matrix(layer_tensor.rank() > 2 ? spatial_mean(layer_tensor) : layer_tensor);
}

}  // namespace oodguard
