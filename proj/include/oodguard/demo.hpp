#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "oodguard/metrics.hpp"

namespace oodguard {

// Synthetic end-to-end comparison: Gaussian-blob task, small trained net,
// all three detectors evaluated against near- and far-OOD samples.
struct DemoConfig {
    std::uint64_t seed = 0;
    std::filesystem::path out_dir;
    int trials = 5;

    int classes = 4;
    int dim = 2;
    double sigma = 1.0;
    double radius_sigmas = 20.0;  // ring radius; the far cluster sits at the center
    int train_per_class = 100;
    int test_per_class = 100;
    int ood_samples = 400;
    std::vector<int> hidden = {16, 16};
    int epochs = 40;
    double learning_rate = 0.01;
};

struct DetectorComparison {
    EvalReport near;
    EvalReport far;
};

struct DemoResult {
    double train_accuracy = 0.0;
    std::map<std::string, DetectorComparison> methods;
};

// Writes models, archives, score CSVs, per-pair reports, histograms, and the
// combined comparison.json under config.out_dir. Byte-identical for equal
// configs.
DemoResult run_demo(const DemoConfig& config);

}  // namespace oodguard
