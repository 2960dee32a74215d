#include "oodguard/mahalanobis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "oodguard/errors.hpp"
#include "oodguard/metrics.hpp"
#include "oodguard/numeric.hpp"
#include "oodguard/parallel.hpp"

namespace oodguard {
namespace {

std::vector<int> labels_of(const ActivationArchive& archive) {
    if (!archive.labels) raise(Errc::missing_labels, "archive has no labels");
    std::vector<int> labels(archive.sample_count());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        labels[i] = static_cast<int>(archive.labels->i64()[i]);
    }
    return labels;
}

// Quadratic form of the nearest class; also reports which class it is.
std::pair<double, int> nearest_class(const LayerGaussians& g, const Eigen::VectorXd& f) {
    double best = std::numeric_limits<double>::infinity();
    int best_class = 0;
    for (Eigen::Index c = 0; c < g.means.rows(); ++c) {
        const Eigen::VectorXd d = f - g.means.row(c).transpose();
        const double q = d.dot(g.precision * d);
        if (q < best) {
            best = q;
            best_class = static_cast<int>(c);
        }
    }
    return {best, best_class};
}

void check_layer_structure(const std::vector<LayerGaussians>& layers,
                           const std::vector<std::string>& layer_names,
                           const ActivationArchive& data) {
    if (data.layers.size() != layers.size()) {
        raise(Errc::layer_mismatch, "archive has " + std::to_string(data.layers.size()) +
                                        " layers, model has " + std::to_string(layers.size()));
    }
    if (!layer_names.empty()) {
        for (std::size_t l = 0; l < layers.size(); ++l) {
            if (data.layers[l].name != layer_names[l]) {
                raise(Errc::layer_mismatch, "layer " + std::to_string(l) + " is '" +
                                                data.layers[l].name + "', model expects '" +
                                                layer_names[l] + "'");
            }
        }
    }
}

void check_weights(const MahalanobisModel& model) {
    if (model.weights.alpha.size() != model.layers.size()) {
        raise(Errc::layer_mismatch, "combiner has " + std::to_string(model.weights.alpha.size()) +
                                        " weights for " + std::to_string(model.layers.size()) +
                                        " layers");
    }
    if (!(model.noise_magnitude >= 0.0) || !std::isfinite(model.noise_magnitude)) {
        raise(Errc::bad_config, "noise magnitude must be finite and >= 0");
    }
}

TensorBuffer matrix_tensor(const Eigen::MatrixXd& m) {
    std::vector<double> data(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            data[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
        }
    }
    return TensorBuffer::from_f64(
        {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
        std::move(data));
}

Eigen::MatrixXd tensor_matrix(const TensorBuffer& t) {
    if (t.rank() != 2) raise(Errc::dimension_mismatch, "expected a rank-2 tensor");
    return to_matrix(t);
}

}  // namespace

std::vector<LayerGaussians> fit_gaussians(const ActivationArchive& train,
                                          std::optional<double> ridge) {
    if (train.sample_count() == 0) raise(Errc::empty_archive, "no samples to fit on");
    if (ridge && !(*ridge > 0.0)) raise(Errc::bad_config, "ridge must be > 0");
    const std::vector<int> labels = labels_of(train);
    const auto n = train.sample_count();
    const auto k = train.num_classes();

    std::vector<std::size_t> class_counts(k, 0);
    for (const int y : labels) ++class_counts[static_cast<std::size_t>(y)];
    for (std::size_t c = 0; c < k; ++c) {
        if (class_counts[c] < 2) {
            raise(Errc::empty_class, "class " + std::to_string(c) + " has " +
                                         std::to_string(class_counts[c]) +
                                         " samples, need at least 2");
        }
    }

    std::vector<LayerGaussians> result;
    for (std::size_t l = 0; l < train.layers.size(); ++l) {
        const Eigen::MatrixXd x = pooled_features(train.layers[l].tensor);
        const auto dim = x.cols();

        LayerGaussians g;
        g.layer_index = static_cast<int>(l);
        g.means = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(k), dim);
        for (std::size_t i = 0; i < n; ++i) {
            g.means.row(labels[i]) += x.row(static_cast<Eigen::Index>(i));
        }
        for (std::size_t c = 0; c < k; ++c) {
            g.means.row(static_cast<Eigen::Index>(c)) /= static_cast<double>(class_counts[c]);
        }

        Eigen::MatrixXd scatter = Eigen::MatrixXd::Zero(dim, dim);
        for (std::size_t i = 0; i < n; ++i) {
            const Eigen::VectorXd d =
                x.row(static_cast<Eigen::Index>(i)).transpose() - g.means.row(labels[i]).transpose();
            scatter.noalias() += d * d.transpose();
        }
        scatter /= static_cast<double>(n);

        double lambda = ridge ? *ridge
                              : std::max(1e-6 * scatter.trace() / static_cast<double>(dim), 1e-12);
        bool inverted = false;
        for (int attempt = 0; attempt < 4 && !inverted; ++attempt, lambda *= 10.0) {
            Eigen::MatrixXd sigma = scatter;
            sigma.diagonal().array() += lambda;
            Eigen::LLT<Eigen::MatrixXd> llt(sigma);
            if (llt.info() != Eigen::Success) continue;
            g.precision = llt.solve(Eigen::MatrixXd::Identity(dim, dim));
            g.precision = 0.5 * (g.precision + g.precision.transpose()).eval();
            g.ridge = lambda;
            inverted = true;
        }
        if (!inverted) {
            raise(Errc::singular_covariance,
                  "layer " + std::to_string(l) + " covariance is not invertible");
        }
        result.push_back(std::move(g));
    }
    return result;
}

double layer_score(const LayerGaussians& gaussians, const Eigen::VectorXd& feature) {
    if (feature.size() != gaussians.means.cols()) {
        raise(Errc::dimension_mismatch,
              "feature has dim " + std::to_string(feature.size()) + ", gaussians expect " +
                  std::to_string(gaussians.means.cols()));
    }
    return std::min(0.0, -nearest_class(gaussians, feature).first);
}

Eigen::MatrixXd layer_score_matrix(const std::vector<LayerGaussians>& layers,
                                   const std::vector<std::string>& layer_names,
                                   const ActivationArchive& data) {
    check_layer_structure(layers, layer_names, data);
    const auto n = data.sample_count();
    Eigen::MatrixXd scores(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(layers.size()));
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const Eigen::MatrixXd x = pooled_features(data.layers[l].tensor);
        if (x.cols() != layers[l].means.cols()) {
            raise(Errc::layer_mismatch, "layer " + std::to_string(l) + " has " +
                                            std::to_string(x.cols()) + " channels, model expects " +
                                            std::to_string(layers[l].means.cols()));
        }
        parallel_for(n, [&](std::size_t i) {
            scores(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(l)) =
                layer_score(layers[l], x.row(static_cast<Eigen::Index>(i)).transpose());
        });
    }
    return scores;
}

LayerWeights uniform_weights(std::size_t num_layers) {
    LayerWeights w;
    w.alpha.assign(num_layers, num_layers == 0 ? 0.0 : 1.0 / static_cast<double>(num_layers));
    return w;
}

LayerWeights fit_layer_weights(const Eigen::MatrixXd& in_scores,
                               const Eigen::MatrixXd& adversarial_scores) {
    if (in_scores.cols() != adversarial_scores.cols()) {
        raise(Errc::layer_mismatch, "score matrices disagree on layer count");
    }
    if (in_scores.rows() == 0 || adversarial_scores.rows() == 0) {
        raise(Errc::empty_scores, "both populations need at least one sample");
    }
    const auto num_layers = in_scores.cols();
    const auto total = in_scores.rows() + adversarial_scores.rows();

    Eigen::MatrixXd pooled(total, num_layers);
    pooled << in_scores, adversarial_scores;
    const Eigen::RowVectorXd mean = pooled.colwise().mean();
    Eigen::RowVectorXd sd(num_layers);
    for (Eigen::Index l = 0; l < num_layers; ++l) {
        sd[l] = std::max(std::sqrt((pooled.col(l).array() - mean[l]).square().mean()), 1e-12);
    }
    const Eigen::MatrixXd z = (pooled.rowwise() - mean).array().rowwise() / sd.array();

    Eigen::VectorXd alpha = Eigen::VectorXd::Zero(num_layers);
    double bias = 0.0;
    const double step = 0.01;
    for (int epoch = 0; epoch < 500; ++epoch) {
        Eigen::VectorXd grad = Eigen::VectorXd::Zero(num_layers);
        double grad_bias = 0.0;
        for (Eigen::Index i = 0; i < total; ++i) {
            const double label = i < in_scores.rows() ? 1.0 : 0.0;
            const double p = 1.0 / (1.0 + std::exp(-(z.row(i).dot(alpha) + bias)));
            grad.noalias() += (p - label) * z.row(i).transpose();
            grad_bias += p - label;
        }
        alpha -= step / static_cast<double>(total) * grad;
        bias -= step / static_cast<double>(total) * grad_bias;
    }

    // Undo the standardization so the weights apply to raw layer scores.
    LayerWeights w;
    w.alpha.resize(static_cast<std::size_t>(num_layers));
    w.bias = bias;
    for (Eigen::Index l = 0; l < num_layers; ++l) {
        w.alpha[static_cast<std::size_t>(l)] = alpha[l] / sd[l];
        w.bias -= alpha[l] * mean[l] / sd[l];
    }
    return w;
}

LayerWeights fit_layer_weights(const ActivationArchive& in_dist,
                               const ActivationArchive& adversarial,
                               const MahalanobisModel& model) {
    return fit_layer_weights(layer_score_matrix(model.layers, model.layer_names, in_dist),
                             layer_score_matrix(model.layers, model.layer_names, adversarial));
}

ScoreSeries score(const MahalanobisModel& model, const ActivationArchive& data) {
    check_weights(model);
    const Eigen::MatrixXd m = layer_score_matrix(model.layers, model.layer_names, data);
    ScoreSeries series;
    series.source_tag = "mahalanobis";
    series.values.resize(static_cast<std::size_t>(m.rows()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        double s = model.weights.bias;
        for (Eigen::Index l = 0; l < m.cols(); ++l) {
            s += model.weights.alpha[static_cast<std::size_t>(l)] * m(i, l);
        }
        series.values[static_cast<std::size_t>(i)] = s;
    }
    return series;
}

ScoreSeries score_perturbed(const MahalanobisModel& model, const MicroNet& net,
                            const Eigen::MatrixXd& inputs) {
    check_weights(model);
    const std::size_t hidden = net.layers.size() - 1;
    if (model.layers.size() != hidden) {
        raise(Errc::layer_mismatch, "model has " + std::to_string(model.layers.size()) +
                                        " layers, net has " + std::to_string(hidden));
    }
    for (std::size_t l = 0; l < hidden; ++l) {
        if (net.layers[l].weight.rows() != model.layers[l].means.cols()) {
            raise(Errc::layer_mismatch, "layer " + std::to_string(l) + " width mismatch");
        }
    }

    const auto n = static_cast<std::size_t>(inputs.rows());
    ScoreSeries series;
    series.source_tag = "mahalanobis";
    series.values.resize(n);
    parallel_for(n, [&](std::size_t i) {
        const Eigen::VectorXd x = inputs.row(static_cast<Eigen::Index>(i)).transpose();
        const ForwardTrace trace = forward_trace(net, x);
        double s = model.weights.bias;
        for (std::size_t l = 0; l < hidden; ++l) {
            const auto& g = model.layers[l];
            const auto [q, c] = nearest_class(g, trace.post[l]);
            (void)q;
            const Eigen::VectorXd feature_grad =
                -2.0 * g.precision * (trace.post[l] - g.means.row(c).transpose());
            const Eigen::VectorXd input_grad =
                input_gradient_of_layer(net, x, l, feature_grad);
            Eigen::VectorXd nudged = x;
            for (Eigen::Index d = 0; d < nudged.size(); ++d) {
                nudged[d] += model.noise_magnitude * sign(input_grad[d]);
            }
            const ForwardTrace nudged_trace = forward_trace(net, nudged);
            s += model.weights.alpha[l] * layer_score(g, nudged_trace.post[l]);
        }
        series.values[i] = s;
    });
    return series;
}

double grid_search_noise_magnitude(const MahalanobisModel& model, const MicroNet& net,
                                   const Eigen::MatrixXd& in_inputs,
                                   const std::vector<int>& labels, double attack_epsilon) {
    if (static_cast<std::size_t>(in_inputs.rows()) != labels.size()) {
        raise(Errc::inconsistent_sample_count, "inputs vs labels");
    }
    if (in_inputs.rows() == 0) raise(Errc::empty_scores, "no samples to search on");

    Eigen::MatrixXd adversarial(in_inputs.rows(), in_inputs.cols());
    for (Eigen::Index i = 0; i < in_inputs.rows(); ++i) {
        adversarial.row(i) =
            fgsm(net, in_inputs.row(i).transpose(), labels[static_cast<std::size_t>(i)],
                 attack_epsilon)
                .transpose();
    }

    double best_noise = kNoiseGrid.front();
    double best_auroc = -1.0;
    for (const double noise : kNoiseGrid) {
        MahalanobisModel candidate = model;
        candidate.noise_magnitude = noise;
        const ScoreSeries clean = score_perturbed(candidate, net, in_inputs);
        const ScoreSeries attacked = score_perturbed(candidate, net, adversarial);
        const double a = auroc(clean.values, attacked.values);
        if (a > best_auroc) {
            best_auroc = a;
            best_noise = noise;
        }
    }
    return best_noise;
}

void save_mahalanobis(const MahalanobisModel& model, const std::filesystem::path& dir) {
    check_weights(model);
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["method"] = "mahalanobis";
    manifest["noise_magnitude"] = model.noise_magnitude;
    manifest["layers"] = model.layer_names;
    manifest["ridge"] = nlohmann::json::array();
    manifest["weights"] = {{"alpha", model.weights.alpha}, {"bias", model.weights.bias}};
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        manifest["ridge"].push_back(model.layers[l].ridge);
        write_npy_file(dir / ("mu_" + std::to_string(l) + ".npy"),
                       matrix_tensor(model.layers[l].means));
        write_npy_file(dir / ("precision_" + std::to_string(l) + ".npy"),
                       matrix_tensor(model.layers[l].precision));
    }
    std::ofstream out(dir / "manifest.json");
    if (!out) raise(Errc::io_failure, "cannot write " + (dir / "manifest.json").string());
    out << manifest.dump(2) << "\n";
}

MahalanobisModel load_mahalanobis(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) raise(Errc::io_failure, "cannot open " + (dir / "manifest.json").string());
    nlohmann::json manifest = nlohmann::json::parse(in);
    if (manifest.at("method").get<std::string>() != "mahalanobis") {
        raise(Errc::bad_config, "manifest method is not mahalanobis");
    }

    MahalanobisModel model;
    model.noise_magnitude = manifest.at("noise_magnitude").get<double>();
    model.layer_names = manifest.at("layers").get<std::vector<std::string>>();
    model.weights.alpha = manifest.at("weights").at("alpha").get<std::vector<double>>();
    model.weights.bias = manifest.at("weights").at("bias").get<double>();

    for (std::size_t l = 0;; ++l) {
        const auto mu_path = dir / ("mu_" + std::to_string(l) + ".npy");
        if (!std::filesystem::exists(mu_path)) break;
        LayerGaussians g;
        g.layer_index = static_cast<int>(l);
        g.means = tensor_matrix(read_npy_file(mu_path));
        g.precision = tensor_matrix(read_npy_file(dir / ("precision_" + std::to_string(l) + ".npy")));
        if (g.precision.rows() != g.precision.cols() || g.precision.cols() != g.means.cols()) {
            raise(Errc::dimension_mismatch, "layer " + std::to_string(l) + " tensor shapes");
        }
        const auto& ridge = manifest.at("ridge");
        g.ridge = ridge.is_array() ? ridge.at(l).get<double>() : ridge.get<double>();
        model.layers.push_back(std::move(g));
    }
    if (model.layers.empty()) raise(Errc::bad_config, "no layer tensors found in " + dir.string());
    if (!model.layer_names.empty() && model.layer_names.size() != model.layers.size()) {
        raise(Errc::layer_mismatch, "manifest layer names disagree with tensor files");
    }
    check_weights(model);
    return model;
}

}  // namespace oodguard
