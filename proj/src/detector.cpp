#include "oodguard/detector.hpp"

#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "oodguard/errors.hpp"

namespace oodguard {

std::string method_name(const Detector& detector) {
    if (std::holds_alternative<MahalanobisModel>(detector.model)) return "mahalanobis";
    if (std::holds_alternative<GramProfile>(detector.model)) return "gram";
    return "energy";
}

ScoreSeries score(const Detector& detector, const ActivationArchive& data) {
    return std::visit([&](const auto& model) { return score(model, data); }, detector.model);
}

bool is_ood(const Detector& detector, double canonical_score) {
    if (const auto* gram = std::get_if<GramProfile>(&detector.model)) {
        return canonical_score < -gram->threshold;
    }
    if (const auto* energy = std::get_if<EnergyConfig>(&detector.model)) {
        return canonical_score < -energy->threshold;
    }
    return canonical_score < detector.calibration.tau;
}

FitResult fit_detector(const ActivationArchive& train, const FitOptions& options) {
    const std::size_t n = train.sample_count();
    std::vector<std::size_t> fit_idx;
    std::vector<std::size_t> cal_idx;
    for (std::size_t i = 0; i < n; ++i) {
        (i % 10 == 9 ? cal_idx : fit_idx).push_back(i);
    }
    const bool split = !cal_idx.empty();
    const ActivationArchive fit_part = split ? subset_archive(train, fit_idx) : train;
    const ActivationArchive cal_part = split ? subset_archive(train, cal_idx) : train;

    Detector detector;
    if (options.method == "mahalanobis") {
        MahalanobisModel model;
        model.layers = fit_gaussians(fit_part, options.ridge);
        model.weights = uniform_weights(model.layers.size());
        model.noise_magnitude = options.noise_magnitude;
        for (const auto& layer : fit_part.layers) model.layer_names.push_back(layer.name);
        detector.model = std::move(model);
    } else if (options.method == "gram") {
        detector.model =
            fit_profile(fit_part, options.orders, options.holdout_fraction, options.epsilon_div);
    } else if (options.method == "energy") {
        detector.model = fit_threshold(fit_part, options.temperature);
    } else {
        raise(Errc::bad_config, "unknown method '" + options.method + "'");
    }

    const ScoreSeries cal_scores = score(detector, cal_part);
    detector.calibration = fit_calibration(cal_scores.values);
    return {std::move(detector), cal_part.sample_count()};
}

void save_detector(const Detector& detector, const std::filesystem::path& dir) {
    std::visit(
        [&](const auto& model) {
            using T = std::decay_t<decltype(model)>;
            if constexpr (std::is_same_v<T, MahalanobisModel>) {
                save_mahalanobis(model, dir);
            } else if constexpr (std::is_same_v<T, GramProfile>) {
                save_gram(model, dir);
            } else {
                save_energy(model, dir);
            }
        },
        detector.model);
    save_calibration(detector.calibration, dir / "calibration.json");
}

void write_score_csv(const std::filesystem::path& path, const Detector& detector,
                     const ScoreSeries& series) {
    std::ofstream out(path);
    if (!out) raise(Errc::io_failure, "cannot write " + path.string());
    out << "sample_index,canonical_score,confidence,is_ood\n";
    char row[96];
    for (std::size_t i = 0; i < series.values.size(); ++i) {
        const double s = series.values[i];
        std::snprintf(row, sizeof(row), "%zu,%.17g,%.17g,%d\n", i, s,
                      confidence(detector.calibration, s), is_ood(detector, s) ? 1 : 0);
        out << row;
    }
}

Detector load_detector(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) raise(Errc::io_failure, "cannot open " + (dir / "manifest.json").string());
    nlohmann::json manifest = nlohmann::json::parse(in);
    const std::string method = manifest.at("method").get<std::string>();
    in.close();

    Detector detector;
    if (method == "mahalanobis") {
        detector.model = load_mahalanobis(dir);
    } else if (method == "gram") {
        detector.model = load_gram(dir);
    } else if (method == "energy") {
        detector.model = load_energy(dir);
    } else {
        raise(Errc::bad_config, "unknown method '" + method + "' in " + dir.string());
    }
    detector.calibration = load_calibration(dir / "calibration.json");
    return detector;
}

}  // namespace oodguard
