#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "oodguard/score_series.hpp"

namespace oodguard {

// OOD samples are the negatives, in-distribution samples the positives. A
// sample counts as accepted (positive) when its score is >= the threshold.

// TNR (in %) at the largest threshold that still accepts >= 95% of the
// in-distribution scores.
double tnr_at_tpr95(std::span<const double> in_scores, std::span<const double> ood_scores);

// Mann-Whitney rank statistic with 0.5 credit for ties; identical to the
// trapezoidal area under the ROC curve.
double auroc(std::span<const double> in_scores, std::span<const double> ood_scores);

// Maximum over all thresholds of (TPR + TNR) / 2.
double detection_accuracy(std::span<const double> in_scores,
                          std::span<const double> ood_scores);

struct HistogramBin {
    double lo = 0.0;
    double hi = 0.0;
    std::size_t count_in = 0;
    std::size_t count_ood = 0;
};

// Shared equal-width bins spanning the pooled score range.
std::vector<HistogramBin> histogram_report(std::span<const double> in_scores,
                                           std::span<const double> ood_scores, int bins);

void write_histogram_csv(const std::filesystem::path& path,
                         const std::vector<HistogramBin>& bins);

struct MetricSummary {
    double mean = 0.0;
    double sd = 0.0;
};

struct EvalReport {
    std::string method;
    std::size_t n_in = 0;
    std::size_t n_ood = 0;
    MetricSummary tnr_at_tpr95;
    MetricSummary auroc;
    MetricSummary detection_accuracy;
    std::vector<HistogramBin> histogram;
};

// Bootstrap mean +- sd of each metric. Trial 0 evaluates the series as given
// (so trials=1 is the plain point estimate); trial i >= 1 resamples both
// series with replacement using seed + i.
EvalReport evaluate(const ScoreSeries& in_scores, const ScoreSeries& ood_scores, int trials,
                    std::uint64_t seed, int histogram_bins = 30);

std::string report_to_json(const EvalReport& report);

}  // namespace oodguard
