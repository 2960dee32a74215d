#include "oodguard/micronet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <utility>

#include <json.hpp>

#include "oodguard/numeric.hpp"
#include "oodguard/rng.hpp"

namespace oodguard {
namespace {

Eigen::VectorXd apply_activation(const Eigen::VectorXd& v, Activation act) {
    if (act == Activation::identity) return v;
    return v.cwiseMax(0.0);
}

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
    std::vector<double> values(logits.data(), logits.data() + logits.size());
    const double lse = log_sum_exp(values);
    Eigen::VectorXd out(logits.size());
    for (Eigen::Index i = 0; i < logits.size(); ++i) out[i] = std::exp(logits[i] - lse);
    return out;
}

void check_input_dim(const MicroNet& net, const Eigen::VectorXd& x) {
    if (x.size() != net.layers.front().weight.cols()) {
        raise(Errc::dimension_mismatch,
              "input has dim " + std::to_string(x.size()) + ", net expects " +
                  std::to_string(net.layers.front().weight.cols()));
    }
}

// Backprop a gradient sitting on the post-activation output of layer `from`
// down to the input. `trace` must come from forward_trace on the same x.
Eigen::VectorXd pull_back(const MicroNet& net, const ForwardTrace& trace,
                          std::size_t from, Eigen::VectorXd grad) {
    for (std::size_t li = from + 1; li-- > 0;) {
        const auto& layer = net.layers[li];
        if (layer.activation == Activation::relu) {
            for (Eigen::Index i = 0; i < grad.size(); ++i) {
                if (trace.pre[li][i] <= 0.0) grad[i] = 0.0;
            }
        }
        grad = layer.weight.transpose() * grad;
    }
    return grad;
}

}  // namespace

MicroNet make_net(const std::vector<int>& widths, std::uint64_t seed) {
    if (widths.size() < 2) raise(Errc::bad_config, "need at least input and output widths");
    Rng rng(seed);
    MicroNet net;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        DenseLayer layer;
        const int fan_in = widths[i];
        const int fan_out = widths[i + 1];
        const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
        layer.weight.resize(fan_out, fan_in);
        for (int r = 0; r < fan_out; ++r) {
            for (int c = 0; c < fan_in; ++c) layer.weight(r, c) = rng.uniform(-scale, scale);
        }
        layer.bias = Eigen::VectorXd::Zero(fan_out);
        layer.activation =
            (i + 2 == widths.size()) ? Activation::identity : Activation::relu;
        net.layers.push_back(std::move(layer));
    }
    return net;
}

Eigen::VectorXd forward(const MicroNet& net, const Eigen::VectorXd& x) {
    check_input_dim(net, x);
    Eigen::VectorXd h = x;
    for (const auto& layer : net.layers) {
        h = apply_activation(layer.weight * h + layer.bias, layer.activation);
    }
    return h;
}

ForwardTrace forward_trace(const MicroNet& net, const Eigen::VectorXd& x) {
    check_input_dim(net, x);
    ForwardTrace trace;
    Eigen::VectorXd h = x;
    for (const auto& layer : net.layers) {
        trace.pre.push_back(layer.weight * h + layer.bias);
        h = apply_activation(trace.pre.back(), layer.activation);
        trace.post.push_back(h);
    }
    return trace;
}

double cross_entropy(const Eigen::VectorXd& logits, int label) {
    if (label < 0 || label >= logits.size()) {
        raise(Errc::label_out_of_range, "label " + std::to_string(label));
    }
    std::vector<double> values(logits.data(), logits.data() + logits.size());
    return log_sum_exp(values) - logits[label];
}

Eigen::VectorXd input_gradient(const MicroNet& net, const Eigen::VectorXd& x, int label) {
    const ForwardTrace trace = forward_trace(net, x);
    const Eigen::VectorXd& logits = trace.post.back();
    if (label < 0 || label >= logits.size()) {
        raise(Errc::label_out_of_range, "label " + std::to_string(label));
    }
    Eigen::VectorXd grad = softmax(logits);
    grad[label] -= 1.0;
    return pull_back(net, trace, net.layers.size() - 1, std::move(grad));
}

Eigen::VectorXd input_gradient_of_layer(const MicroNet& net, const Eigen::VectorXd& x,
                                        std::size_t layer_index,
                                        const Eigen::VectorXd& feature_gradient) {
    if (layer_index >= net.layers.size()) {
        raise(Errc::layer_mismatch, "layer index " + std::to_string(layer_index));
    }
    const ForwardTrace trace = forward_trace(net, x);
    if (feature_gradient.size() != trace.post[layer_index].size()) {
        raise(Errc::dimension_mismatch, "feature gradient dim");
    }
    return pull_back(net, trace, layer_index, feature_gradient);
}

Eigen::VectorXd fgsm(const MicroNet& net, const Eigen::VectorXd& x, int label, double epsilon) {
    if (epsilon < 0.0) raise(Errc::bad_config, "epsilon must be >= 0");
    const Eigen::VectorXd grad = input_gradient(net, x, label);
    Eigen::VectorXd adv = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) adv[i] += epsilon * sign(grad[i]);
    return adv;
}

MicroNet train(MicroNet net, const Eigen::MatrixXd& inputs, const std::vector<int>& labels,
               const TrainConfig& config) {
    if (static_cast<std::size_t>(inputs.rows()) != labels.size()) {
        raise(Errc::inconsistent_sample_count, "inputs vs labels");
    }
    Rng rng(config.seed);
    std::vector<std::size_t> order(labels.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        rng.shuffle(order);
        for (const std::size_t i : order) {
            const Eigen::VectorXd x = inputs.row(static_cast<Eigen::Index>(i)).transpose();
            const ForwardTrace trace = forward_trace(net, x);
            Eigen::VectorXd grad = softmax(trace.post.back());
            grad[labels[i]] -= 1.0;
            // Walk layers top-down, updating weights with the local gradient.
            for (std::size_t li = net.layers.size(); li-- > 0;) {
                auto& layer = net.layers[li];
                if (layer.activation == Activation::relu) {
                    for (Eigen::Index j = 0; j < grad.size(); ++j) {
                        if (trace.pre[li][j] <= 0.0) grad[j] = 0.0;
                    }
                }
                const Eigen::VectorXd& below = li == 0 ? x : trace.post[li - 1];
                const Eigen::VectorXd grad_below = layer.weight.transpose() * grad;
                layer.weight.noalias() -= config.learning_rate * grad * below.transpose();
                layer.bias -= config.learning_rate * grad;
                grad = grad_below;
            }
        }
    }
    return net;
}

double train_accuracy(const MicroNet& net, const Eigen::MatrixXd& inputs,
                      const std::vector<int>& labels) {
    std::size_t hits = 0;
    for (Eigen::Index i = 0; i < inputs.rows(); ++i) {
        Eigen::Index pred = 0;
        forward(net, inputs.row(i).transpose()).maxCoeff(&pred);
        if (pred == labels[static_cast<std::size_t>(i)]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(inputs.rows());
}

void save_net(const MicroNet& net, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["kind"] = "micronet";
    manifest["layers"] = nlohmann::json::array();
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        const auto& layer = net.layers[i];
        const std::string wfile = "w" + std::to_string(i) + ".npy";
        const std::string bfile = "b" + std::to_string(i) + ".npy";
        std::vector<double> w(layer.weight.size());
        for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
            for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) {
                w[static_cast<std::size_t>(r * layer.weight.cols() + c)] = layer.weight(r, c);
            }
        }
        write_npy_file(dir / wfile,
                       TensorBuffer::from_f64({static_cast<std::size_t>(layer.weight.rows()),
                                               static_cast<std::size_t>(layer.weight.cols())},
                                              std::move(w)));
        write_npy_file(dir / bfile,
                       TensorBuffer::from_f64({static_cast<std::size_t>(layer.bias.size())},
                                              {layer.bias.data(),
                                               layer.bias.data() + layer.bias.size()}));
        manifest["layers"].push_back(
            {{"weight", wfile},
             {"bias", bfile},
             {"activation", layer.activation == Activation::relu ? "relu" : "identity"}});
    }
    std::ofstream out(dir / "net.json");
    if (!out) raise(Errc::io_failure, "cannot write net manifest in " + dir.string());
    out << manifest.dump(2) << "\n";
}

MicroNet load_net(const std::filesystem::path& dir) {
    std::ifstream in(dir / "net.json");
    if (!in) raise(Errc::io_failure, "cannot open " + (dir / "net.json").string());
    nlohmann::json manifest = nlohmann::json::parse(in);
    MicroNet net;
    for (const auto& entry : manifest.at("layers")) {
        DenseLayer layer;
        const TensorBuffer w = read_npy_file(dir / entry.at("weight").get<std::string>());
        const TensorBuffer b = read_npy_file(dir / entry.at("bias").get<std::string>());
        if (w.rank() != 2 || b.rank() != 1) raise(Errc::dimension_mismatch, "bad net tensors");
        layer.weight.resize(static_cast<Eigen::Index>(w.dim(0)),
                            static_cast<Eigen::Index>(w.dim(1)));
        for (std::size_t r = 0; r < w.dim(0); ++r) {
            for (std::size_t c = 0; c < w.dim(1); ++c) {
                layer.weight(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
                    w.at_f64(r * w.dim(1) + c);
            }
        }
        layer.bias.resize(static_cast<Eigen::Index>(b.dim(0)));
        for (std::size_t i = 0; i < b.dim(0); ++i) {
            layer.bias[static_cast<Eigen::Index>(i)] = b.at_f64(i);
        }
        layer.activation = entry.at("activation").get<std::string>() == "relu"
                               ? Activation::relu
                               : Activation::identity;
        net.layers.push_back(std::move(layer));
    }
    return net;
}

SyntheticTask make_blobs_task(int num_classes, int dim, double radius_sigmas, double sigma,
                              OodKind ood_kind, std::uint64_t seed) {
    if (num_classes < 3 || dim < 2) raise(Errc::bad_config, "need K >= 3 and D >= 2");
    constexpr double pi = 3.14159265358979323846;
    SyntheticTask task;
    task.centers = Eigen::MatrixXd::Zero(num_classes, dim);
    const double radius = radius_sigmas * sigma;
    for (int k = 0; k + 1 < num_classes; ++k) {
        const double angle = pi / 2.0 + 2.0 * pi * k / (num_classes - 1);
        task.centers(k, 0) = radius * std::cos(angle);
        task.centers(k, 1) = radius * std::sin(angle);
    }
    task.centers(num_classes - 1, 0) = 0.0;
    task.centers(num_classes - 1, 1) = 2.0 * radius;
    task.far_center = Eigen::RowVectorXd::Zero(dim);
    task.sigma = sigma;
    task.ood_kind = ood_kind;
    task.seed = seed;
    return task;
}

TaskData sample_task(const SyntheticTask& task, int n_train_per_class, int n_test_per_class,
                     int n_ood) {
    if (task.sigma <= 0.0) raise(Errc::bad_config, "sigma must be > 0");
    const auto k = task.centers.rows();
    const auto dim = task.centers.cols();
    for (Eigen::Index a = 0; a < k; ++a) {
        for (Eigen::Index b = a + 1; b < k; ++b) {
            if ((task.centers.row(a) - task.centers.row(b)).norm() == 0.0) {
                raise(Errc::bad_config, "blob centers must be pairwise distinct");
            }
        }
    }

    Rng rng(task.seed);
    auto sample_around = [&](const Eigen::RowVectorXd& center) {
        Eigen::RowVectorXd x(dim);
        for (Eigen::Index d = 0; d < dim; ++d) x[d] = center[d] + task.sigma * rng.normal();
        return x;
    };

    TaskData data;
    auto fill_split = [&](Eigen::MatrixXd& inputs, std::vector<int>& labels, int per_class) {
        inputs.resize(k * per_class, dim);
        labels.resize(static_cast<std::size_t>(k * per_class));
        Eigen::Index row = 0;
        for (Eigen::Index c = 0; c < k; ++c) {
            for (int i = 0; i < per_class; ++i, ++row) {
                inputs.row(row) = sample_around(task.centers.row(c));
                labels[static_cast<std::size_t>(row)] = static_cast<int>(c);
            }
        }
    };
    fill_split(data.train_inputs, data.train_labels, n_train_per_class);
    fill_split(data.test_inputs, data.test_labels, n_test_per_class);

    data.ood_inputs.resize(n_ood, dim);
    if (task.ood_kind == OodKind::far_cluster) {
        if (task.far_center.size() != dim) {
            raise(Errc::bad_config, "far-cluster center dimension must match the blob centers");
        }
        for (int i = 0; i < n_ood; ++i) data.ood_inputs.row(i) = sample_around(task.far_center);
    } else {
        // Midpoints of nearest-neighbor center pairs (all pairs on ties),
        // deduplicated; these sit on the hardest decision boundaries.
        std::vector<std::pair<Eigen::Index, Eigen::Index>> pairs;
        for (Eigen::Index a = 0; a < k; ++a) {
            double best = std::numeric_limits<double>::infinity();
            for (Eigen::Index b = 0; b < k; ++b) {
                if (b != a) best = std::min(best, (task.centers.row(a) - task.centers.row(b)).norm());
            }
            for (Eigen::Index b = 0; b < k; ++b) {
                if (b == a || (task.centers.row(a) - task.centers.row(b)).norm() != best) continue;
                const auto pair = std::minmax(a, b);
                if (std::find(pairs.begin(), pairs.end(),
                              std::make_pair(pair.first, pair.second)) == pairs.end()) {
                    pairs.emplace_back(pair.first, pair.second);
                }
            }
        }
        std::vector<Eigen::RowVectorXd> midpoints;
        for (const auto& [a, b] : pairs) {
            midpoints.push_back(0.5 * (task.centers.row(a) + task.centers.row(b)));
        }
        for (int i = 0; i < n_ood; ++i) {
            data.ood_inputs.row(i) = sample_around(midpoints[rng.index(midpoints.size())]);
        }
    }
    return data;
}

ActivationArchive make_archive(const MicroNet& net, const Eigen::MatrixXd& inputs,
                               const std::optional<std::vector<int>>& labels) {
    const auto n = static_cast<std::size_t>(inputs.rows());
    const auto hidden = net.layers.size() - 1;
    std::vector<std::vector<double>> layer_data(hidden);
    for (std::size_t li = 0; li < hidden; ++li) {
        layer_data[li].reserve(n * static_cast<std::size_t>(net.layers[li].weight.rows()));
    }
    std::vector<double> logit_data;
    logit_data.reserve(n * static_cast<std::size_t>(net.num_classes()));

    for (Eigen::Index i = 0; i < inputs.rows(); ++i) {
        const ForwardTrace trace = forward_trace(net, inputs.row(i).transpose());
        for (std::size_t li = 0; li < hidden; ++li) {
            const auto& h = trace.post[li];
            layer_data[li].insert(layer_data[li].end(), h.data(), h.data() + h.size());
        }
        const auto& logits = trace.post.back();
        logit_data.insert(logit_data.end(), logits.data(), logits.data() + logits.size());
    }

    ActivationArchive archive;
    for (std::size_t li = 0; li < hidden; ++li) {
        const auto width = static_cast<std::size_t>(net.layers[li].weight.rows());
        archive.layers.push_back(
            {"dense" + std::to_string(li),
             TensorBuffer::from_f64({n, width}, std::move(layer_data[li]))});
    }
    archive.logits = TensorBuffer::from_f64({n, static_cast<std::size_t>(net.num_classes())},
                                            std::move(logit_data));
    if (labels) {
        std::vector<std::int64_t> raw(labels->begin(), labels->end());
        archive.labels = TensorBuffer::from_i64({n}, std::move(raw));
    }
    std::vector<double> input_data;
    input_data.reserve(n * static_cast<std::size_t>(inputs.cols()));
    for (Eigen::Index i = 0; i < inputs.rows(); ++i) {
        for (Eigen::Index j = 0; j < inputs.cols(); ++j) input_data.push_back(inputs(i, j));
    }
    archive.raw_inputs =
        TensorBuffer::from_f64({n, static_cast<std::size_t>(inputs.cols())}, std::move(input_data));
    validate_archive(archive);
    return archive;
}

TaskArchives generate_task(const MicroNet& net, const SyntheticTask& task, int n_per_class,
                           int n_ood) {
    const TaskData data = sample_task(task, n_per_class, n_per_class, n_ood);
    TaskArchives archives{
        make_archive(net, data.train_inputs, data.train_labels),
        make_archive(net, data.test_inputs, data.test_labels),
        make_archive(net, data.ood_inputs, std::nullopt),
    };
    return archives;
}

}  // namespace oodguard
