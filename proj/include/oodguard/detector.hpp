#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "oodguard/archive.hpp"
#include "oodguard/calibration.hpp"
#include "oodguard/energy.hpp"
#include "oodguard/gram.hpp"
#include "oodguard/mahalanobis.hpp"
#include "oodguard/score_series.hpp"

namespace oodguard {

// A fitted detection method plus the confidence calibration that was fitted
// alongside it. Immutable once built; scoring is concurrency-safe.
struct Detector {
    std::variant<MahalanobisModel, GramProfile, EnergyConfig> model;
    CalibrationMap calibration;
};

std::string method_name(const Detector& detector);

ScoreSeries score(const Detector& detector, const ActivationArchive& data);

// OOD decision from a canonical score. Energy and gram apply their fitted
// thresholds (negated into canonical orientation); mahalanobis has no
// inherent threshold and falls back to the calibration threshold tau.
bool is_ood(const Detector& detector, double canonical_score);

struct FitOptions {
    std::string method;  // mahalanobis | gram | energy
    std::optional<double> ridge;
    double noise_magnitude = 0.0;
    std::vector<int> orders = kDefaultOrders;
    double epsilon_div = 1e-12;
    double holdout_fraction = 0.2;
    double temperature = 1.0;
};

struct FitResult {
    Detector detector;
    std::size_t calibration_samples = 0;
};

// Fits the chosen method on roughly 90% of the archive (every tenth sample is
// held out) and calibrates confidence on the held-out slice's canonical
// scores. Archives too small to split calibrate on the full archive.
FitResult fit_detector(const ActivationArchive& train, const FitOptions& options);

void save_detector(const Detector& detector, const std::filesystem::path& dir);
Detector load_detector(const std::filesystem::path& dir);

// CSV with header sample_index,canonical_score,confidence,is_ood; one row per
// sample in series order, deterministic bytes.
void write_score_csv(const std::filesystem::path& path, const Detector& detector,
                     const ScoreSeries& series);

}  // namespace oodguard
