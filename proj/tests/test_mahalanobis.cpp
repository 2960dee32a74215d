#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "oodguard/archive.hpp"
#include "oodguard/errors.hpp"
#include "oodguard/mahalanobis.hpp"
#include "oodguard/metrics.hpp"
#include "oodguard/micronet.hpp"
#include "oodguard/rng.hpp"

using oodguard::ActivationArchive;
using oodguard::Error;
using oodguard::LayerGaussians;
using oodguard::MahalanobisModel;
using oodguard::Rng;
using oodguard::TensorBuffer;

namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& tag) {
    const auto dir = fs::temp_directory_path() / ("oodguard_test_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

ActivationArchive feature_archive(const Eigen::MatrixXd& features,
                                  const std::vector<std::int64_t>& labels) {
    const auto n = static_cast<std::size_t>(features.rows());
    const auto c = static_cast<std::size_t>(features.cols());
    std::vector<double> flat;
    flat.reserve(n * c);
    for (Eigen::Index i = 0; i < features.rows(); ++i) {
        for (Eigen::Index j = 0; j < features.cols(); ++j) flat.push_back(features(i, j));
    }
    ActivationArchive archive;
    archive.layers.push_back({"dense0", TensorBuffer::from_f64({n, c}, std::move(flat))});
    std::int64_t k = 2;
    for (const auto y : labels) k = std::max(k, y + 1);
    std::vector<double> logits(n * static_cast<std::size_t>(k), 0.0);
    archive.logits = TensorBuffer::from_f64({n, static_cast<std::size_t>(k)}, std::move(logits));
    if (!labels.empty()) archive.labels = TensorBuffer::from_i64({n}, labels);
    return archive;
}

// Two clusters of gaussian features around well-separated means.
Eigen::MatrixXd two_cluster_features(Rng& rng, int per_class, double gap) {
    Eigen::MatrixXd x(2 * per_class, 2);
    for (int i = 0; i < 2 * per_class; ++i) {
        const double cx = i < per_class ? 0.0 : gap;
        x(i, 0) = cx + rng.normal();
        x(i, 1) = rng.normal();
    }
    return x;
}

std::vector<std::int64_t> two_cluster_labels(int per_class) {
    std::vector<std::int64_t> labels(static_cast<std::size_t>(2 * per_class), 0);
    for (int i = per_class; i < 2 * per_class; ++i) labels[static_cast<std::size_t>(i)] = 1;
    return labels;
}

LayerGaussians identity_gaussians(const Eigen::MatrixXd& means) {
    LayerGaussians g;
    g.means = means;
    g.precision = Eigen::MatrixXd::Identity(means.cols(), means.cols());
    return g;
}

}  // namespace

TEST_CASE("duplicated points recover their class means exactly") {
    // Two samples per class, both at the class point: zero scatter, so only
    // the floor ridge survives and the means come back exact.
    Eigen::MatrixXd x(4, 2);
    x << 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0;
    const auto archive = feature_archive(x, {0, 0, 1, 1});
    const auto layers = oodguard::fit_gaussians(archive);
    REQUIRE(layers.size() == 1);
    CHECK(layers[0].means(0, 0) == 0.0);
    CHECK(layers[0].means(0, 1) == 0.0);
    CHECK(layers[0].means(1, 0) == 1.0);
    CHECK(layers[0].means(1, 1) == 1.0);
    CHECK(layers[0].ridge == 1e-12);
    // Precision is (ridge * I)^-1, enormous but diagonal.
    CHECK(layers[0].precision(0, 0) == doctest::Approx(1e12).epsilon(1e-6));
    CHECK(layers[0].precision(0, 1) == doctest::Approx(0.0).scale(1e6));
    CHECK(oodguard::layer_score(layers[0], Eigen::Vector2d(0.0, 0.0)) == 0.0);
}

TEST_CASE("precision matches a dense inversion of the tied covariance") {
    Rng rng(71);
    const int per_class = 60;
    const auto x = two_cluster_features(rng, per_class, 6.0);
    const auto archive = feature_archive(x, two_cluster_labels(per_class));
    const double ridge = 1.0;
    const auto layers = oodguard::fit_gaussians(archive, ridge);
    REQUIRE(layers.size() == 1);
    CHECK(layers[0].ridge == ridge);

    // Rebuild the tied covariance from scratch and invert it directly.
    Eigen::RowVector2d mu0 = Eigen::RowVector2d::Zero();
    Eigen::RowVector2d mu1 = Eigen::RowVector2d::Zero();
    for (int i = 0; i < per_class; ++i) mu0 += x.row(i);
    for (int i = per_class; i < 2 * per_class; ++i) mu1 += x.row(i);
    mu0 /= per_class;
    mu1 /= per_class;
    Eigen::Matrix2d scatter = Eigen::Matrix2d::Zero();
    for (int i = 0; i < 2 * per_class; ++i) {
        const Eigen::RowVector2d d = x.row(i) - (i < per_class ? mu0 : mu1);
        scatter += d.transpose() * d;
    }
    scatter /= static_cast<double>(2 * per_class);
    scatter += ridge * Eigen::Matrix2d::Identity();
    const Eigen::Matrix2d expected = scatter.fullPivLu().inverse();

    for (int r = 0; r < 2; ++r) {
        for (int c = 0; c < 2; ++c) {
            CHECK(layers[0].precision(r, c) == doctest::Approx(expected(r, c)).epsilon(1e-10));
            CHECK(layers[0].means(0, c) == doctest::Approx(mu0[c]).epsilon(1e-12));
            CHECK(layers[0].means(1, c) == doctest::Approx(mu1[c]).epsilon(1e-12));
        }
    }
}

TEST_CASE("fitting validates labels and class occupancy") {
    Eigen::MatrixXd x(3, 2);
    x << 0.0, 0.0, 0.1, 0.1, 5.0, 5.0;
    const auto lonely = feature_archive(x, {0, 0, 1});
    CHECK_THROWS_WITH_AS(oodguard::fit_gaussians(lonely), doctest::Contains("EmptyClass"), Error);

    const auto unlabeled = feature_archive(x, {});
    CHECK_THROWS_WITH_AS(oodguard::fit_gaussians(unlabeled), doctest::Contains("MissingLabels"),
                         Error);

    const auto labeled = feature_archive(x, {0, 1, 0});
    CHECK_THROWS_WITH_AS(oodguard::fit_gaussians(labeled, -0.5), doctest::Contains("BadConfig"),
                         Error);
}

TEST_CASE("layer score is the best negated quadratic over classes") {
    Eigen::MatrixXd means(2, 2);
    means << 0.0, 0.0, 4.0, 0.0;
    const auto g = identity_gaussians(means);
    CHECK(oodguard::layer_score(g, Eigen::Vector2d(1.0, 0.0)) == -1.0);
    CHECK(oodguard::layer_score(g, Eigen::Vector2d(0.0, 0.0)) == 0.0);
    CHECK(oodguard::layer_score(g, Eigen::Vector2d(4.0, 0.0)) == 0.0);
    CHECK(oodguard::layer_score(g, Eigen::Vector2d(3.0, 0.0)) == -1.0);
    CHECK(oodguard::layer_score(g, Eigen::Vector2d(2.0, 2.0)) == -8.0);

    CHECK_THROWS_WITH_AS(oodguard::layer_score(g, Eigen::Vector3d(0.0, 0.0, 0.0)),
                         doctest::Contains("DimensionMismatch"), Error);
}

TEST_CASE("layer score matches a brute-force quadratic oracle") {
    Rng rng(72);
    for (int round = 0; round < 30; ++round) {
        const int k = 2 + static_cast<int>(rng.index(4));
        const int dim = 2 + static_cast<int>(rng.index(3));
        LayerGaussians g;
        g.means.resize(k, dim);
        for (Eigen::Index i = 0; i < g.means.size(); ++i) g.means(i) = rng.normal(0.0, 3.0);
        // Random SPD precision: A A^T + I.
        Eigen::MatrixXd a(dim, dim);
        for (Eigen::Index i = 0; i < a.size(); ++i) a(i) = rng.normal();
        g.precision = a * a.transpose() + Eigen::MatrixXd::Identity(dim, dim);

        Eigen::VectorXd f(dim);
        for (Eigen::Index i = 0; i < dim; ++i) f[i] = rng.normal(0.0, 3.0);

        double best = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < k; ++c) {
            const Eigen::VectorXd d = f - g.means.row(c).transpose();
            double q = 0.0;
            for (int r = 0; r < dim; ++r) {
                for (int s = 0; s < dim; ++s) q += d[r] * g.precision(r, s) * d[s];
            }
            best = std::max(best, -q);
        }
        CHECK(oodguard::layer_score(g, f) == doctest::Approx(std::min(0.0, best)).epsilon(1e-9));
    }
}

TEST_CASE("layer score ignores the class order") {
    Rng rng(73);
    Eigen::MatrixXd means(4, 3);
    for (Eigen::Index i = 0; i < means.size(); ++i) means(i) = rng.normal(0.0, 2.0);
    const auto g = identity_gaussians(means);

    Eigen::MatrixXd reversed = means.colwise().reverse();
    const auto g_rev = identity_gaussians(reversed);

    for (int round = 0; round < 20; ++round) {
        Eigen::Vector3d f(rng.normal(), rng.normal(), rng.normal());
        CHECK(oodguard::layer_score(g, f) == oodguard::layer_score(g_rev, f));
    }
}

TEST_CASE("layer score is zero exactly at the class means") {
    Rng rng(74);
    Eigen::MatrixXd means(3, 2);
    means << 0.0, 0.0, 10.0, 0.0, 0.0, 10.0;
    const auto g = identity_gaussians(means);
    for (int c = 0; c < 3; ++c) {
        CHECK(oodguard::layer_score(g, means.row(c).transpose()) == 0.0);
    }
    for (int round = 0; round < 20; ++round) {
        Eigen::Vector2d f(rng.normal(3.0, 1.0), rng.normal(3.0, 1.0));
        double nearest = std::numeric_limits<double>::infinity();
        for (int c = 0; c < 3; ++c) {
            nearest = std::min(nearest, (f - means.row(c).transpose()).norm());
        }
        if (nearest > 1e-6) CHECK(oodguard::layer_score(g, f) < 0.0);
    }
}

TEST_CASE("the quadratic is invariant under a change of basis") {
    Rng rng(75);
    Eigen::MatrixXd means(3, 3);
    for (Eigen::Index i = 0; i < means.size(); ++i) means(i) = rng.normal(0.0, 2.0);
    Eigen::Matrix3d p_half;
    for (Eigen::Index i = 0; i < p_half.size(); ++i) p_half(i) = rng.normal();
    LayerGaussians g;
    g.means = means;
    g.precision = p_half * p_half.transpose() + Eigen::Matrix3d::Identity();

    // Transform features by an invertible A and the gaussians covariantly.
    Eigen::Matrix3d a;
    for (Eigen::Index i = 0; i < a.size(); ++i) a(i) = rng.normal();
    a += 3.0 * Eigen::Matrix3d::Identity();
    const Eigen::Matrix3d a_inv = a.inverse();
    LayerGaussians g_t;
    g_t.means = (a * means.transpose()).transpose();
    g_t.precision = a_inv.transpose() * g.precision * a_inv;

    for (int round = 0; round < 25; ++round) {
        Eigen::Vector3d f(rng.normal(), rng.normal(), rng.normal());
        CHECK(oodguard::layer_score(g_t, a * f) ==
              doctest::Approx(oodguard::layer_score(g, f)).epsilon(1e-9));
    }
}

TEST_CASE("scores fall monotonically along a ray from a mean") {
    LayerGaussians g;
    g.means = Eigen::MatrixXd::Zero(1, 2);
    g.precision = Eigen::Matrix2d::Identity();
    Eigen::Vector2d direction(0.6, -0.8);
    double prev = oodguard::layer_score(g, Eigen::Vector2d::Zero());
    CHECK(prev == 0.0);
    for (int step = 1; step <= 20; ++step) {
        const double s = oodguard::layer_score(g, (0.3 * step) * direction);
        CHECK(s < prev);
        prev = s;
    }
}

TEST_CASE("uniform weights over a single layer reproduce the layer score") {
    Rng rng(76);
    const int per_class = 30;
    const auto x = two_cluster_features(rng, per_class, 8.0);
    const auto archive = feature_archive(x, two_cluster_labels(per_class));

    MahalanobisModel model;
    model.layers = oodguard::fit_gaussians(archive);
    model.layer_names = {"dense0"};
    model.weights = oodguard::uniform_weights(1);
    CHECK(model.weights.alpha == std::vector<double>{1.0});
    CHECK(model.weights.bias == 0.0);

    const auto series = oodguard::score(model, archive);
    CHECK(series.source_tag == "mahalanobis");
    const auto matrix =
        oodguard::layer_score_matrix(model.layers, model.layer_names, archive);
    REQUIRE(series.values.size() == static_cast<std::size_t>(matrix.rows()));
    for (std::size_t i = 0; i < series.values.size(); ++i) {
        CHECK(series.values[i] == matrix(static_cast<Eigen::Index>(i), 0));
        CHECK(series.values[i] <= 0.0);
        CHECK(std::isfinite(series.values[i]));
    }
}

TEST_CASE("far features score below every training sample") {
    Rng rng(77);
    const int per_class = 40;
    const auto x = two_cluster_features(rng, per_class, 10.0);
    const auto archive = feature_archive(x, two_cluster_labels(per_class));

    MahalanobisModel model;
    model.layers = oodguard::fit_gaussians(archive);
    model.layer_names = {"dense0"};
    model.weights = oodguard::uniform_weights(1);

    const auto train_scores = oodguard::score(model, archive);
    const double train_min =
        *std::min_element(train_scores.values.begin(), train_scores.values.end());

    Eigen::MatrixXd far(5, 2);
    for (Eigen::Index i = 0; i < 5; ++i) {
        far(i, 0) = 200.0 + rng.normal();
        far(i, 1) = -150.0 + rng.normal();
    }
    const auto far_scores = oodguard::score(model, feature_archive(far, {}));
    for (double s : far_scores.values) CHECK(s < train_min);
}

TEST_CASE("the combiner separates what the layers separate") {
    Rng rng(78);
    const Eigen::Index n = 80;
    Eigen::MatrixXd in_scores(n, 2);
    Eigen::MatrixXd adv_scores(n, 2);
    for (Eigen::Index i = 0; i < n; ++i) {
        in_scores(i, 0) = -1.0 + 0.3 * rng.normal();
        in_scores(i, 1) = -2.0 + 0.3 * rng.normal();
        adv_scores(i, 0) = -6.0 + 0.3 * rng.normal();
        adv_scores(i, 1) = -7.0 + 0.3 * rng.normal();
    }
    const auto w = oodguard::fit_layer_weights(in_scores, adv_scores);
    REQUIRE(w.alpha.size() == 2);

    auto combined = [&](const Eigen::MatrixXd& m) {
        std::vector<double> out(static_cast<std::size_t>(m.rows()));
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            out[static_cast<std::size_t>(i)] =
                w.bias + w.alpha[0] * m(i, 0) + w.alpha[1] * m(i, 1);
        }
        return out;
    };
    CHECK(oodguard::auroc(combined(in_scores), combined(adv_scores)) == 1.0);

    // Indistinguishable populations should hover near chance.
    Eigen::MatrixXd same_a(n, 2);
    Eigen::MatrixXd same_b(n, 2);
    for (Eigen::Index i = 0; i < n; ++i) {
        same_a(i, 0) = rng.normal();
        same_a(i, 1) = rng.normal();
        same_b(i, 0) = rng.normal();
        same_b(i, 1) = rng.normal();
    }
    const auto w_same = oodguard::fit_layer_weights(same_a, same_b);
    auto combined_same = [&](const Eigen::MatrixXd& m) {
        std::vector<double> out(static_cast<std::size_t>(m.rows()));
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            out[static_cast<std::size_t>(i)] =
                w_same.bias + w_same.alpha[0] * m(i, 0) + w_same.alpha[1] * m(i, 1);
        }
        return out;
    };
    const double chance = oodguard::auroc(combined_same(same_a), combined_same(same_b));
    CHECK(chance > 0.35);
    CHECK(chance < 0.65);
}

TEST_CASE("layer bookkeeping failures are reported as such") {
    Rng rng(79);
    const auto x = two_cluster_features(rng, 20, 8.0);
    const auto archive = feature_archive(x, two_cluster_labels(20));

    MahalanobisModel model;
    model.layers = oodguard::fit_gaussians(archive);
    model.layer_names = {"dense7"};
    model.weights = oodguard::uniform_weights(1);
    CHECK_THROWS_WITH_AS(oodguard::score(model, archive), doctest::Contains("LayerMismatch"),
                         Error);

    model.layer_names = {"dense0"};
    model.weights = oodguard::uniform_weights(3);
    CHECK_THROWS_WITH_AS(oodguard::score(model, archive), doctest::Contains("LayerMismatch"),
                         Error);

    CHECK_THROWS_WITH_AS(
        oodguard::fit_layer_weights(Eigen::MatrixXd::Zero(3, 2), Eigen::MatrixXd::Zero(3, 1)),
        doctest::Contains("LayerMismatch"), Error);
    CHECK_THROWS_WITH_AS(
        oodguard::fit_layer_weights(Eigen::MatrixXd::Zero(0, 2), Eigen::MatrixXd::Zero(3, 2)),
        doctest::Contains("EmptyScores"), Error);
}

TEST_CASE("zero noise perturbation reduces to plain archive scoring") {
    const auto task = oodguard::make_blobs_task(4, 2, 20.0, 1.0, oodguard::OodKind::far_cluster, 5);
    const auto data = oodguard::sample_task(task, 30, 5, 0);
    auto net = oodguard::make_net({2, 8, 8, 4}, 2);
    net = oodguard::train(net, data.train_inputs, data.train_labels,
                          oodguard::TrainConfig{30, 0.01, 1});
    const auto train_archive =
        oodguard::make_archive(net, data.train_inputs, data.train_labels);

    MahalanobisModel model;
    model.layers = oodguard::fit_gaussians(train_archive);
    model.layer_names = {"dense0", "dense1"};
    model.weights = oodguard::uniform_weights(2);
    model.noise_magnitude = 0.0;

    const auto via_archive = oodguard::score(model, train_archive);
    const auto via_net = oodguard::score_perturbed(model, net, data.train_inputs);
    REQUIRE(via_net.values.size() == via_archive.values.size());
    for (std::size_t i = 0; i < via_net.values.size(); ++i) {
        CHECK(via_net.values[i] == doctest::Approx(via_archive.values[i]).epsilon(1e-12));
    }

    // Structural mismatches between net and model are caught up front.
    MahalanobisModel wrong = model;
    wrong.layers.pop_back();
    wrong.layer_names.pop_back();
    wrong.weights = oodguard::uniform_weights(1);
    CHECK_THROWS_WITH_AS(oodguard::score_perturbed(wrong, net, data.train_inputs),
                         doctest::Contains("LayerMismatch"), Error);
}

TEST_CASE("noise search stays on the grid and is deterministic") {
    const auto task = oodguard::make_blobs_task(4, 2, 20.0, 1.0, oodguard::OodKind::far_cluster, 6);
    const auto data = oodguard::sample_task(task, 15, 5, 0);
    auto net = oodguard::make_net({2, 8, 8, 4}, 3);
    net = oodguard::train(net, data.train_inputs, data.train_labels,
                          oodguard::TrainConfig{30, 0.01, 1});
    const auto train_archive =
        oodguard::make_archive(net, data.train_inputs, data.train_labels);

    MahalanobisModel model;
    model.layers = oodguard::fit_gaussians(train_archive);
    model.layer_names = {"dense0", "dense1"};
    model.weights = oodguard::uniform_weights(2);

    const double noise = oodguard::grid_search_noise_magnitude(model, net, data.train_inputs,
                                                               data.train_labels, 0.1);
    CHECK(std::find(oodguard::kNoiseGrid.begin(), oodguard::kNoiseGrid.end(), noise) !=
          oodguard::kNoiseGrid.end());
    CHECK(oodguard::grid_search_noise_magnitude(model, net, data.train_inputs, data.train_labels,
                                                0.1) == noise);
}

TEST_CASE("mahalanobis models round-trip through disk exactly") {
    Rng rng(80);
    const auto x = two_cluster_features(rng, 25, 9.0);
    const auto archive = feature_archive(x, two_cluster_labels(25));

    MahalanobisModel model;
    model.layers = oodguard::fit_gaussians(archive);
    model.layer_names = {"dense0"};
    model.weights.alpha = {0.75};
    model.weights.bias = -0.125;
    model.noise_magnitude = 0.002;

    const auto dir = temp_dir("maha");
    oodguard::save_mahalanobis(model, dir);
    const auto loaded = oodguard::load_mahalanobis(dir);
    REQUIRE(loaded.layers.size() == 1);
    CHECK(loaded.layers[0].means == model.layers[0].means);
    CHECK(loaded.layers[0].precision == model.layers[0].precision);
    CHECK(loaded.layers[0].ridge == model.layers[0].ridge);
    CHECK(loaded.layer_names == model.layer_names);
    CHECK(loaded.weights.alpha == model.weights.alpha);
    CHECK(loaded.weights.bias == model.weights.bias);
    CHECK(loaded.noise_magnitude == model.noise_magnitude);

    const auto before = oodguard::score(model, archive);
    const auto after = oodguard::score(loaded, archive);
    CHECK(before.values == after.values);
}

TEST_CASE("a scalar ridge in the manifest applies to every layer") {
    Rng rng(81);
    const auto x = two_cluster_features(rng, 20, 9.0);
    const auto archive = feature_archive(x, two_cluster_labels(20));

    MahalanobisModel model;
    model.layers = oodguard::fit_gaussians(archive, 0.5);
    model.layer_names = {"dense0"};
    model.weights = oodguard::uniform_weights(1);

    const auto dir = temp_dir("maha_scalar");
    oodguard::save_mahalanobis(model, dir);
    {
        std::ifstream in(dir / "manifest.json");
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        in.close();
        const auto pos = text.find("\"ridge\": [");
        REQUIRE(pos != std::string::npos);
        const auto end = text.find(']', pos);
        text.replace(pos, end - pos + 1, "\"ridge\": 0.5");
        std::ofstream out(dir / "manifest.json");
        out << text;
    }
    const auto loaded = oodguard::load_mahalanobis(dir);
    CHECK(loaded.layers[0].ridge == 0.5);
}
