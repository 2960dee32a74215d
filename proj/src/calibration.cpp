#include "oodguard/calibration.hpp"

#include <algorithm>
#include <fstream>
#include <vector>

#include <json.hpp>

#include "oodguard/errors.hpp"
#include "oodguard/numeric.hpp"

namespace oodguard {

CalibrationMap fit_calibration(std::span<const double> scores) {
    if (scores.empty()) raise(Errc::empty_scores, "no scores to calibrate on");
    CalibrationMap map;
    map.tau = nearest_rank_percentile({scores.begin(), scores.end()}, 5.0);
    map.s_max = *std::max_element(scores.begin(), scores.end());
    map.denominator = std::max(map.s_max - map.tau, 1e-12);
    return map;
}

double confidence(const CalibrationMap& map, double score) {
    if (score >= map.tau) {
        return std::min(100.0, 90.0 + 10.0 * (score - map.tau) / map.denominator);
    }
    return std::max(0.0, 90.0 + 90.0 * (score - map.tau) / map.denominator);
}

void save_calibration(const CalibrationMap& map, const std::filesystem::path& path) {
    nlohmann::json doc;
    doc["tau"] = map.tau;
    doc["s_max"] = map.s_max;
    doc["denominator"] = map.denominator;
    std::ofstream out(path);
    if (!out) raise(Errc::io_failure, "cannot write " + path.string());
    out << doc.dump(2) << "\n";
}

CalibrationMap load_calibration(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) raise(Errc::io_failure, "cannot open " + path.string());
    nlohmann::json doc = nlohmann::json::parse(in);
    CalibrationMap map;
    map.tau = doc.at("tau").get<double>();
    map.s_max = doc.at("s_max").get<double>();
    map.denominator = doc.at("denominator").get<double>();
    return map;
}

}  // namespace oodguard
