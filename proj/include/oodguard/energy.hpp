#pragma once

#include <filesystem>
#include <span>

#include "oodguard/archive.hpp"
#include "oodguard/score_series.hpp"

namespace oodguard {

struct EnergyConfig {
    double temperature = 1.0;
    double threshold = 0.0;
};

// E(x) = -T * log sum_i exp(logit_i / T). Low energy means in-distribution.
double energy(std::span<const double> logits, double temperature = 1.0);

// Sets threshold to the 95th percentile of training energies, so roughly 5%
// of in-distribution samples land above it.
EnergyConfig fit_threshold(const ActivationArchive& archive, double temperature = 1.0);

// Canonical orientation: higher = more in-distribution, so scores are -E(x).
ScoreSeries score(const EnergyConfig& config, const ActivationArchive& archive);

bool is_ood(const EnergyConfig& config, std::span<const double> logits);

void save_energy(const EnergyConfig& config, const std::filesystem::path& dir);
EnergyConfig load_energy(const std::filesystem::path& dir);

}  // namespace oodguard
