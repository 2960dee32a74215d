#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "oodguard/demo.hpp"
#include "oodguard/detector.hpp"
#include "oodguard/errors.hpp"

namespace {

using oodguard::Errc;
using oodguard::raise;

// Values can come from --config JSON or from flags; flags win. Unknown config
// keys are rejected so typos cannot silently fall back to defaults.
class ConfigSource {
public:
    ConfigSource(const std::string& path, const std::set<std::string>& allowed_keys) {
        if (path.empty()) return;
        std::ifstream in(path);
        if (!in) raise(Errc::io_failure, "cannot open config " + path);
        try {
            doc_ = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            raise(Errc::bad_config, "config " + path + ": " + e.what());
        }
        if (!doc_.is_object()) raise(Errc::bad_config, "config must be a JSON object");
        for (const auto& item : doc_.items()) {
            if (allowed_keys.count(item.key()) == 0) {
                raise(Errc::bad_config, "unknown config key '" + item.key() + "'");
            }
        }
    }

    template <typename T>
    void fill(const CLI::Option* flag, const char* key, T& out) const {
        if (flag->count() > 0 || !doc_.contains(key)) return;
        try {
            out = doc_.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            raise(Errc::bad_config, std::string("config key '") + key + "' has the wrong type");
        }
    }

private:
    nlohmann::json doc_ = nlohmann::json::object();
};

std::vector<double> read_score_column(const std::string& path) {
    std::ifstream in(path);
    if (!in) raise(Errc::io_failure, "cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) raise(Errc::io_failure, path + " is empty");

    int column = -1;
    std::stringstream header(line);
    std::string cell;
    for (int i = 0; std::getline(header, cell, ','); ++i) {
        if (cell == "canonical_score") column = i;
    }
    if (column < 0) raise(Errc::io_failure, path + " has no canonical_score column");

    std::vector<double> values;
    for (std::size_t row = 2; std::getline(in, line); ++row) {
        if (line.empty()) continue;
        std::stringstream fields(line);
        std::string value;
        for (int i = 0; i <= column; ++i) {
            if (!std::getline(fields, value, ',')) {
                raise(Errc::io_failure, path + ": row " + std::to_string(row) + " is too short");
            }
        }
        std::size_t consumed = 0;
        double parsed = 0.0;
        try {
            parsed = std::stod(value, &consumed);
        } catch (const std::exception&) {
            raise(Errc::io_failure, path + ": row " + std::to_string(row) + " is not numeric");
        }
        if (consumed != value.size()) {
            raise(Errc::io_failure, path + ": row " + std::to_string(row) + " is not numeric");
        }
        values.push_back(parsed);
    }
    return values;
}

void warn_small_calibration(std::size_t n) {
    if (n < 20) {
        std::cerr << "warning: calibration fitted on only " << n
                  << " samples; the confidence scale may be degenerate\n";
    }
}

int run(int argc, char** argv) {
    CLI::App app{"Out-of-distribution detectors for classifier activations"};
    app.require_subcommand(1);

    auto* fit = app.add_subcommand("fit", "Fit a detector on a training archive");
    std::string fit_config_path;
    std::string method;
    std::string train_path;
    std::string fit_out;
    double ridge = 0.0;
    double noise_magnitude = 0.0;
    std::vector<int> orders = oodguard::kDefaultOrders;
    double epsilon_div = 1e-12;
    double holdout_fraction = 0.2;
    double temperature = 1.0;
    fit->add_option("--config", fit_config_path, "JSON config; flags override its keys");
    auto* method_opt = fit->add_option("--method", method, "mahalanobis, gram, or energy");
    auto* train_opt = fit->add_option("--train", train_path, "training archive manifest");
    auto* fit_out_opt = fit->add_option("--out", fit_out, "model output directory");
    auto* ridge_opt = fit->add_option("--ridge", ridge, "covariance ridge (mahalanobis)");
    auto* noise_opt =
        fit->add_option("--noise-magnitude", noise_magnitude, "input perturbation magnitude");
    auto* orders_opt =
        fit->add_option("--orders", orders, "gram matrix orders")->delimiter(',');
    auto* eps_opt = fit->add_option("--epsilon-div", epsilon_div, "gram deviation guard");
    auto* holdout_opt = fit->add_option("--holdout-fraction", holdout_fraction,
                                        "gram normalization partition fraction");
    auto* temp_opt = fit->add_option("--temperature", temperature, "energy temperature");

    auto* score_cmd = app.add_subcommand("score", "Score an archive with a fitted model");
    std::string score_config_path;
    std::string model_dir;
    std::string data_path;
    std::string score_out;
    score_cmd->add_option("--config", score_config_path, "JSON config; flags override its keys");
    auto* model_opt = score_cmd->add_option("--model", model_dir, "model directory");
    auto* data_opt = score_cmd->add_option("--data", data_path, "archive manifest to score");
    auto* score_out_opt = score_cmd->add_option("--out", score_out, "output CSV path");

    auto* calibrate = app.add_subcommand("calibrate", "Refit the confidence calibration");
    std::string cal_config_path;
    std::string cal_model_dir;
    std::string cal_data_path;
    calibrate->add_option("--config", cal_config_path, "JSON config; flags override its keys");
    auto* cal_model_opt = calibrate->add_option("--model", cal_model_dir, "model directory");
    auto* cal_data_opt =
        calibrate->add_option("--data", cal_data_path, "in-distribution archive manifest");

    auto* evaluate_cmd = app.add_subcommand("evaluate", "Compare in vs OOD score CSVs");
    std::string eval_config_path;
    std::string in_csv;
    std::string ood_csv;
    std::string report_path;
    std::string hist_path;
    std::string eval_tag = "scores";
    int trials = 5;
    std::uint64_t seed = 0;
    int bins = 30;
    evaluate_cmd->add_option("--config", eval_config_path, "JSON config; flags override its keys");
    auto* in_opt = evaluate_cmd->add_option("--in", in_csv, "in-distribution score CSV");
    auto* ood_opt = evaluate_cmd->add_option("--ood", ood_csv, "out-of-distribution score CSV");
    auto* report_opt = evaluate_cmd->add_option("--report", report_path, "report JSON path");
    auto* hist_opt = evaluate_cmd->add_option("--histogram", hist_path, "histogram CSV path");
    auto* tag_opt = evaluate_cmd->add_option("--method", eval_tag, "method label for the report");
    auto* trials_opt = evaluate_cmd->add_option("--trials", trials, "bootstrap trials");
    auto* seed_opt = evaluate_cmd->add_option("--seed", seed, "bootstrap seed");
    auto* bins_opt = evaluate_cmd->add_option("--bins", bins, "histogram bins");

    auto* demo = app.add_subcommand("demo", "End-to-end synthetic comparison of all methods");
    std::string demo_out;
    std::uint64_t demo_seed = 0;
    int demo_trials = 5;
    demo->add_option("--out", demo_out, "output directory")->required();
    demo->add_option("--seed", demo_seed, "fixture and bootstrap seed");
    demo->add_option("--trials", demo_trials, "bootstrap trials per evaluation");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    if (app.got_subcommand(fit)) {
        const ConfigSource config(fit_config_path,
                                  {"method", "train", "out", "ridge", "noise_magnitude", "orders",
                                   "epsilon_div", "holdout_fraction", "temperature"});
        config.fill(method_opt, "method", method);
        config.fill(train_opt, "train", train_path);
        config.fill(fit_out_opt, "out", fit_out);
        config.fill(noise_opt, "noise_magnitude", noise_magnitude);
        config.fill(orders_opt, "orders", orders);
        config.fill(eps_opt, "epsilon_div", epsilon_div);
        config.fill(holdout_opt, "holdout_fraction", holdout_fraction);
        config.fill(temp_opt, "temperature", temperature);
        config.fill(ridge_opt, "ridge", ridge);
        if (method.empty()) raise(Errc::bad_config, "--method is required");
        if (train_path.empty()) raise(Errc::bad_config, "--train is required");
        if (fit_out.empty()) raise(Errc::bad_config, "--out is required");

        oodguard::FitOptions options;
        options.method = method;
        if (ridge_opt->count() > 0 || ridge != 0.0) options.ridge = ridge;
        options.noise_magnitude = noise_magnitude;
        options.orders = orders;
        options.epsilon_div = epsilon_div;
        options.holdout_fraction = holdout_fraction;
        options.temperature = temperature;

        const auto archive = oodguard::load_archive(train_path);
        const auto result = oodguard::fit_detector(archive, options);
        warn_small_calibration(result.calibration_samples);
        oodguard::save_detector(result.detector, fit_out);
        std::cout << "fitted " << method << " on " << archive.sample_count()
                  << " samples; model written to " << fit_out << "\n";
        return 0;
    }

    if (app.got_subcommand(score_cmd)) {
        const ConfigSource config(score_config_path, {"model", "data", "out"});
        config.fill(model_opt, "model", model_dir);
        config.fill(data_opt, "data", data_path);
        config.fill(score_out_opt, "out", score_out);
        if (model_dir.empty()) raise(Errc::bad_config, "--model is required");
        if (data_path.empty()) raise(Errc::bad_config, "--data is required");
        if (score_out.empty()) raise(Errc::bad_config, "--out is required");

        const auto detector = oodguard::load_detector(model_dir);
        const auto archive = oodguard::load_archive(data_path);
        const auto series = oodguard::score(detector, archive);
        oodguard::write_score_csv(score_out, detector, series);
        std::cout << "scored " << series.values.size() << " samples to " << score_out << "\n";
        return 0;
    }

    if (app.got_subcommand(calibrate)) {
        const ConfigSource config(cal_config_path, {"model", "data"});
        config.fill(cal_model_opt, "model", cal_model_dir);
        config.fill(cal_data_opt, "data", cal_data_path);
        if (cal_model_dir.empty()) raise(Errc::bad_config, "--model is required");
        if (cal_data_path.empty()) raise(Errc::bad_config, "--data is required");

        auto detector = oodguard::load_detector(cal_model_dir);
        const auto archive = oodguard::load_archive(cal_data_path);
        const auto series = oodguard::score(detector, archive);
        detector.calibration = oodguard::fit_calibration(series.values);
        warn_small_calibration(series.values.size());
        oodguard::save_calibration(detector.calibration,
                                   std::filesystem::path(cal_model_dir) / "calibration.json");
        std::cout << "calibrated on " << series.values.size() << " samples\n";
        return 0;
    }

    if (app.got_subcommand(evaluate_cmd)) {
        const ConfigSource config(eval_config_path, {"in", "ood", "report", "histogram", "method",
                                                     "trials", "seed", "bins"});
        config.fill(in_opt, "in", in_csv);
        config.fill(ood_opt, "ood", ood_csv);
        config.fill(report_opt, "report", report_path);
        config.fill(hist_opt, "histogram", hist_path);
        config.fill(tag_opt, "method", eval_tag);
        config.fill(trials_opt, "trials", trials);
        config.fill(seed_opt, "seed", seed);
        config.fill(bins_opt, "bins", bins);
        if (in_csv.empty()) raise(Errc::bad_config, "--in is required");
        if (ood_csv.empty()) raise(Errc::bad_config, "--ood is required");
        if (report_path.empty()) raise(Errc::bad_config, "--report is required");
        if (hist_path.empty()) raise(Errc::bad_config, "--histogram is required");

        oodguard::ScoreSeries in_scores{read_score_column(in_csv), eval_tag};
        oodguard::ScoreSeries ood_scores{read_score_column(ood_csv), eval_tag};
        const auto report = oodguard::evaluate(in_scores, ood_scores, trials, seed, bins);
        std::ofstream out(report_path);
        if (!out) raise(Errc::io_failure, "cannot write " + report_path);
        out << oodguard::report_to_json(report) << "\n";
        oodguard::write_histogram_csv(hist_path, report.histogram);
        char line[160];
        std::snprintf(line, sizeof(line),
                      "tnr_at_tpr95 %.2f +- %.2f | auroc %.4f +- %.4f | accuracy %.4f +- %.4f\n",
                      report.tnr_at_tpr95.mean, report.tnr_at_tpr95.sd, report.auroc.mean,
                      report.auroc.sd, report.detection_accuracy.mean,
                      report.detection_accuracy.sd);
        std::cout << line;
        return 0;
    }

    oodguard::DemoConfig config;
    config.seed = demo_seed;
    config.trials = demo_trials;
    config.out_dir = demo_out;
    const auto result = oodguard::run_demo(config);
    char line[160];
    std::snprintf(line, sizeof(line), "train accuracy %.3f\n", result.train_accuracy);
    std::cout << line;
    std::cout << "method       dataset  tnr_at_tpr95     auroc  accuracy\n";
    for (const auto& [name, comparison] : result.methods) {
        const auto row = [&](const char* dataset, const oodguard::EvalReport& report) {
            std::snprintf(line, sizeof(line), "%-12s %-8s %12.2f  %8.4f  %8.4f\n", name.c_str(),
                          dataset, report.tnr_at_tpr95.mean, report.auroc.mean,
                          report.detection_accuracy.mean);
            std::cout << line;
        };
        row("near", comparison.near);
        row("far", comparison.far);
    }
    std::cout << "comparison table written to " << (config.out_dir / "comparison.json").string()
              << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const oodguard::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        switch (e.kind()) {
        case oodguard::ErrorKind::usage: return 1;
        case oodguard::ErrorKind::data: return 2;
        case oodguard::ErrorKind::numeric: return 3;
        }
        return 3;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
