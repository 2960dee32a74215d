#pragma once

#include <filesystem>
#include <span>

namespace oodguard {

// Maps canonical detector scores (higher = more in-distribution) onto a
// 0..100 confidence scale anchored so the 5th-percentile training score
// lands at 90.
struct CalibrationMap {
    double tau = 0.0;
    double s_max = 0.0;
    double denominator = 1.0;
};

CalibrationMap fit_calibration(std::span<const double> scores);

double confidence(const CalibrationMap& map, double score);

void save_calibration(const CalibrationMap& map, const std::filesystem::path& path);
CalibrationMap load_calibration(const std::filesystem::path& path);

}  // namespace oodguard
