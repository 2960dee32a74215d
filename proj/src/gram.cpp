#include "oodguard/gram.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "oodguard/errors.hpp"
#include "oodguard/numeric.hpp"
#include "oodguard/parallel.hpp"

namespace oodguard {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double ipow(double base, int exponent) {
    double r = 1.0;
    for (int i = 0; i < exponent; ++i) r *= base;
    return r;
}

std::size_t triangle_size(std::size_t channels) { return channels * (channels + 1) / 2; }

bool bounds_empty(const GramBounds& b) { return !b.mins.empty() && b.mins[0] == kInf; }

// Deviation of one sample's layer against its class bounds, summed over
// orders and triangle elements. Unseen-class bounds count 1 per element.
double layer_sample_deviation(const GramProfile& profile, int cls, std::size_t layer,
                              const Eigen::MatrixXd& features) {
    double total = 0.0;
    for (std::size_t p = 0; p < profile.orders.size(); ++p) {
        const auto& b = profile.bounds[static_cast<std::size_t>(cls)][layer][p];
        if (bounds_empty(b)) {
            total += static_cast<double>(b.mins.size());
            continue;
        }
        const std::vector<double> g = gram_matrix(features, profile.orders[p]);
        for (std::size_t t = 0; t < g.size(); ++t) {
            total += deviation(g[t], b.mins[t], b.maxs[t], profile.epsilon_div);
        }
    }
    return total;
}

void check_structure(const GramProfile& profile, const ActivationArchive& data) {
    if (data.layers.size() != profile.layer_channels.size()) {
        raise(Errc::layer_mismatch, "archive has " + std::to_string(data.layers.size()) +
                                        " layers, profile has " +
                                        std::to_string(profile.layer_channels.size()));
    }
    for (std::size_t l = 0; l < data.layers.size(); ++l) {
        const auto& t = data.layers[l].tensor;
        const std::size_t channels = t.rank() >= 2 ? t.dim(1) : 0;
        if (channels != profile.layer_channels[l]) {
            raise(Errc::layer_mismatch, "layer " + std::to_string(l) + " has " +
                                            std::to_string(channels) +
                                            " channels, profile expects " +
                                            std::to_string(profile.layer_channels[l]));
        }
        if (!profile.layer_names.empty() && data.layers[l].name != profile.layer_names[l]) {
            raise(Errc::layer_mismatch, "layer " + std::to_string(l) + " is '" +
                                            data.layers[l].name + "', profile expects '" +
                                            profile.layer_names[l] + "'");
        }
    }
    if (data.num_classes() != profile.num_classes) {
        raise(Errc::layer_mismatch, "archive has " + std::to_string(data.num_classes()) +
                                        " classes, profile has " +
                                        std::to_string(profile.num_classes));
    }
}

void check_orders(const std::vector<int>& orders) {
    if (orders.empty()) raise(Errc::bad_config, "need at least one gram order");
    for (const int p : orders) {
        if (p < 1) raise(Errc::bad_config, "gram orders must be >= 1");
    }
}

}  // namespace

Eigen::MatrixXd sample_feature_matrix(const TensorBuffer& layer_tensor, std::size_t sample) {
    if (layer_tensor.rank() < 2) raise(Errc::dimension_mismatch, "layer tensor must have rank >= 2");
    const std::size_t channels = layer_tensor.dim(1);
    std::size_t spatial = 1;
    for (std::size_t d = 2; d < layer_tensor.rank(); ++d) spatial *= layer_tensor.dim(d);
    Eigen::MatrixXd f(static_cast<Eigen::Index>(channels), static_cast<Eigen::Index>(spatial));
    const std::size_t base = sample * channels * spatial;
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t s = 0; s < spatial; ++s) {
            f(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(s)) =
                layer_tensor.at_f64(base + c * spatial + s);
        }
    }
    return f;
}

std::vector<double> gram_matrix(const Eigen::MatrixXd& feature_map, int order) {
    if (order < 1) raise(Errc::bad_config, "gram order must be >= 1");
    const auto channels = feature_map.rows();
    std::vector<double> upper(triangle_size(static_cast<std::size_t>(channels)), 0.0);
    if (feature_map.cols() == 0) return upper;

    Eigen::MatrixXd powered(channels, feature_map.cols());
    for (Eigen::Index c = 0; c < channels; ++c) {
        for (Eigen::Index s = 0; s < feature_map.cols(); ++s) {
            powered(c, s) = ipow(feature_map(c, s), order);
        }
    }
    const Eigen::MatrixXd g = powered * powered.transpose();
    std::size_t t = 0;
    for (Eigen::Index i = 0; i < channels; ++i) {
        for (Eigen::Index j = i; j < channels; ++j) {
            upper[t++] = signed_root(g(i, j), order);
        }
    }
    return upper;
}

double deviation(double value, double lo, double hi, double epsilon_div) {
    if (!(lo <= hi)) raise(Errc::bad_config, "deviation bounds must satisfy lo <= hi");
    if (value < lo) return (lo - value) / (std::abs(lo) + epsilon_div);
    if (value > hi) return (value - hi) / (std::abs(hi) + epsilon_div);
    return 0.0;
}

GramProfile fit_profile(const ActivationArchive& train, const std::vector<int>& orders,
                        double holdout_fraction, double epsilon_div) {
    check_orders(orders);
    if (!(holdout_fraction > 0.0 && holdout_fraction <= 0.5)) {
        raise(Errc::bad_config, "holdout fraction must be in (0, 0.5]");
    }
    if (!(epsilon_div > 0.0)) raise(Errc::bad_config, "epsilon_div must be > 0");
    const std::size_t n = train.sample_count();
    if (n == 0) raise(Errc::empty_archive, "no samples to fit on");

    GramProfile profile;
    profile.orders = orders;
    profile.epsilon_div = epsilon_div;
    profile.num_classes = train.num_classes();
    for (const auto& layer : train.layers) {
        profile.layer_names.push_back(layer.name);
        profile.layer_channels.push_back(layer.tensor.dim(1));
    }
    const std::size_t num_layers = train.layers.size();

    // Deterministic strided split: every s-th sample forms the normalization
    // partition, the rest sets the bounds.
    const auto stride = std::max<std::size_t>(
        2, static_cast<std::size_t>(std::llround(1.0 / holdout_fraction)));
    std::vector<std::size_t> bounds_idx;
    std::vector<std::size_t> norm_idx;
    for (std::size_t i = 0; i < n; ++i) {
        (i % stride == stride - 1 ? norm_idx : bounds_idx).push_back(i);
    }
    if (norm_idx.empty()) {
        norm_idx.push_back(bounds_idx.back());
        bounds_idx.pop_back();
    }

    profile.bounds.resize(profile.num_classes);
    for (auto& per_class : profile.bounds) {
        per_class.resize(num_layers);
        for (std::size_t l = 0; l < num_layers; ++l) {
            const std::size_t tri = triangle_size(profile.layer_channels[l]);
            per_class[l].assign(orders.size(),
                                GramBounds{std::vector<double>(tri, kInf),
                                           std::vector<double>(tri, -kInf)});
        }
    }

    const std::vector<int> predicted = predicted_classes(train);
    bool any_class_seen = false;
    for (const std::size_t i : bounds_idx) {
        any_class_seen = true;
        auto& per_layer = profile.bounds[static_cast<std::size_t>(predicted[i])];
        for (std::size_t l = 0; l < num_layers; ++l) {
            const Eigen::MatrixXd f = sample_feature_matrix(train.layers[l].tensor, i);
            for (std::size_t p = 0; p < orders.size(); ++p) {
                const std::vector<double> g = gram_matrix(f, orders[p]);
                auto& b = per_layer[l][p];
                for (std::size_t t = 0; t < g.size(); ++t) {
                    b.mins[t] = std::min(b.mins[t], g[t]);
                    b.maxs[t] = std::max(b.maxs[t], g[t]);
                }
            }
        }
    }
    if (!any_class_seen) {
        raise(Errc::empty_predicted_class, "bounds partition is empty, no class has samples");
    }

    Eigen::MatrixXd layer_dev(static_cast<Eigen::Index>(norm_idx.size()),
                              static_cast<Eigen::Index>(num_layers));
    for (std::size_t r = 0; r < norm_idx.size(); ++r) {
        const std::size_t i = norm_idx[r];
        for (std::size_t l = 0; l < num_layers; ++l) {
            layer_dev(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(l)) =
                layer_sample_deviation(profile, predicted[i], l,
                                       sample_feature_matrix(train.layers[l].tensor, i));
        }
    }

    profile.expected_layer_deviation.resize(num_layers);
    for (std::size_t l = 0; l < num_layers; ++l) {
        profile.expected_layer_deviation[l] =
            std::max(layer_dev.col(static_cast<Eigen::Index>(l)).mean(), epsilon_div);
    }

    std::vector<double> totals(norm_idx.size(), 0.0);
    for (std::size_t r = 0; r < norm_idx.size(); ++r) {
        for (std::size_t l = 0; l < num_layers; ++l) {
            totals[r] += layer_dev(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(l)) /
                         profile.expected_layer_deviation[l];
        }
    }
    profile.threshold = nearest_rank_percentile(totals, 95.0);
    return profile;
}

std::vector<double> total_deviations(const GramProfile& profile, const ActivationArchive& data) {
    check_structure(profile, data);
    const std::vector<int> predicted = predicted_classes(data);
    std::vector<double> totals(data.sample_count(), 0.0);
    parallel_for(data.sample_count(), [&](std::size_t i) {
        double sum = 0.0;
        for (std::size_t l = 0; l < profile.layer_channels.size(); ++l) {
            sum += layer_sample_deviation(profile, predicted[i], l,
                                          sample_feature_matrix(data.layers[l].tensor, i)) /
                   profile.expected_layer_deviation[l];
        }
        totals[i] = sum;
    });
    return totals;
}

ScoreSeries score(const GramProfile& profile, const ActivationArchive& data) {
    ScoreSeries series;
    series.source_tag = "gram";
    series.values = total_deviations(profile, data);
    for (double& v : series.values) v = -v;
    return series;
}

bool is_ood(const GramProfile& profile, double total_deviation) {
    return total_deviation > profile.threshold;
}

void save_gram(const GramProfile& profile, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["method"] = "gram";
    manifest["orders"] = profile.orders;
    manifest["epsilon_div"] = profile.epsilon_div;
    manifest["threshold"] = profile.threshold;
    manifest["expected_layer_deviation"] = profile.expected_layer_deviation;
    manifest["layer_names"] = profile.layer_names;
    manifest["layer_channels"] = profile.layer_channels;
    manifest["num_classes"] = profile.num_classes;
    std::ofstream out(dir / "manifest.json");
    if (!out) raise(Errc::io_failure, "cannot write " + (dir / "manifest.json").string());
    out << manifest.dump(2) << "\n";

    for (std::size_t c = 0; c < profile.num_classes; ++c) {
        for (std::size_t l = 0; l < profile.layer_channels.size(); ++l) {
            for (std::size_t p = 0; p < profile.orders.size(); ++p) {
                const auto& b = profile.bounds[c][l][p];
                const std::string suffix = "_c" + std::to_string(c) + "_l" + std::to_string(l) +
                                           "_p" + std::to_string(profile.orders[p]) + ".npy";
                write_npy_file(dir / ("mins" + suffix),
                               TensorBuffer::from_f64({b.mins.size()}, std::vector<double>(b.mins)));
                write_npy_file(dir / ("maxs" + suffix),
                               TensorBuffer::from_f64({b.maxs.size()}, std::vector<double>(b.maxs)));
            }
        }
    }
}

GramProfile load_gram(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) raise(Errc::io_failure, "cannot open " + (dir / "manifest.json").string());
    nlohmann::json manifest = nlohmann::json::parse(in);
    if (manifest.at("method").get<std::string>() != "gram") {
        raise(Errc::bad_config, "manifest method is not gram");
    }

    GramProfile profile;
    profile.orders = manifest.at("orders").get<std::vector<int>>();
    profile.epsilon_div = manifest.at("epsilon_div").get<double>();
    profile.threshold = manifest.at("threshold").get<double>();
    profile.expected_layer_deviation =
        manifest.at("expected_layer_deviation").get<std::vector<double>>();
    profile.layer_names = manifest.at("layer_names").get<std::vector<std::string>>();
    profile.layer_channels = manifest.at("layer_channels").get<std::vector<std::size_t>>();
    profile.num_classes = manifest.at("num_classes").get<std::size_t>();
    check_orders(profile.orders);

    profile.bounds.resize(profile.num_classes);
    for (std::size_t c = 0; c < profile.num_classes; ++c) {
        profile.bounds[c].resize(profile.layer_channels.size());
        for (std::size_t l = 0; l < profile.layer_channels.size(); ++l) {
            const std::size_t tri = triangle_size(profile.layer_channels[l]);
            for (std::size_t p = 0; p < profile.orders.size(); ++p) {
                const std::string suffix = "_c" + std::to_string(c) + "_l" + std::to_string(l) +
                                           "_p" + std::to_string(profile.orders[p]) + ".npy";
                GramBounds b;
                const TensorBuffer mins = read_npy_file(dir / ("mins" + suffix));
                const TensorBuffer maxs = read_npy_file(dir / ("maxs" + suffix));
                if (mins.size() != tri || maxs.size() != tri) {
                    raise(Errc::dimension_mismatch, "bound tensor size for" + suffix);
                }
                b.mins.resize(tri);
                b.maxs.resize(tri);
                for (std::size_t t = 0; t < tri; ++t) {
                    b.mins[t] = mins.at_f64(t);
                    b.maxs[t] = maxs.at_f64(t);
                }
                profile.bounds[c][l].push_back(std::move(b));
            }
        }
    }
    return profile;
}

}  // namespace oodguard
