#include "oodguard/energy.hpp"

#include <cmath>
#include <fstream>
#include <vector>

#include <json.hpp>

#include "oodguard/errors.hpp"
#include "oodguard/numeric.hpp"

namespace oodguard {
namespace {

void check_temperature(double temperature) {
    if (!(temperature > 0.0)) raise(Errc::bad_config, "temperature must be > 0");
}

std::vector<double> archive_energies(const ActivationArchive& archive, double temperature) {
    const std::size_t n = archive.sample_count();
    const std::size_t k = archive.num_classes();
    std::vector<double> energies(n);
    std::vector<double> row(k);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) row[j] = archive.logits.at_f64(i * k + j);
        energies[i] = energy(row, temperature);
    }
    return energies;
}

}  // namespace

double energy(std::span<const double> logits, double temperature) {
    check_temperature(temperature);
    if (logits.empty()) raise(Errc::missing_logits, "empty logit vector");
    for (const double v : logits) {
        if (!std::isfinite(v)) raise(Errc::non_finite_logit, "logit is not finite");
    }
    return -temperature * log_sum_exp(logits, temperature);
}

EnergyConfig fit_threshold(const ActivationArchive& archive, double temperature) {
    check_temperature(temperature);
    if (archive.sample_count() == 0) raise(Errc::empty_archive, "no samples to fit on");
    EnergyConfig config;
    config.temperature = temperature;
    config.threshold = nearest_rank_percentile(archive_energies(archive, temperature), 95.0);
    return config;
}

ScoreSeries score(const EnergyConfig& config, const ActivationArchive& archive) {
    check_temperature(config.temperature);
    ScoreSeries series;
    series.source_tag = "energy";
    series.values = archive_energies(archive, config.temperature);
    for (double& v : series.values) v = -v;
    return series;
}

bool is_ood(const EnergyConfig& config, std::span<const double> logits) {
    return energy(logits, config.temperature) > config.threshold;
}

void save_energy(const EnergyConfig& config, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["method"] = "energy";
    manifest["temperature"] = config.temperature;
    manifest["threshold"] = config.threshold;
    std::ofstream out(dir / "manifest.json");
    if (!out) raise(Errc::io_failure, "cannot write " + (dir / "manifest.json").string());
    out << manifest.dump(2) << "\n";
}

EnergyConfig load_energy(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) raise(Errc::io_failure, "cannot open " + (dir / "manifest.json").string());
    nlohmann::json manifest = nlohmann::json::parse(in);
    if (manifest.at("method").get<std::string>() != "energy") {
        raise(Errc::bad_config, "manifest method is not energy");
    }
    EnergyConfig config;
    config.temperature = manifest.at("temperature").get<double>();
    config.threshold = manifest.at("threshold").get<double>();
    check_temperature(config.temperature);
    return config;
}

}  // namespace oodguard
