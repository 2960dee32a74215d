#include "oodguard/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "oodguard/errors.hpp"
#include "oodguard/rng.hpp"

namespace oodguard {
namespace {

void require_nonempty(std::span<const double> in_scores, std::span<const double> ood_scores) {
    if (in_scores.empty() || ood_scores.empty()) {
        raise(Errc::empty_series, "metrics need nonempty in- and OOD score series");
    }
}

std::size_t count_at_least(const std::vector<double>& sorted, double t) {
    return sorted.size() -
           static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), t) -
                                    sorted.begin());
}

std::size_t count_below(const std::vector<double>& sorted, double t) {
    return static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), t) -
                                    sorted.begin());
}

}  // namespace

double tnr_at_tpr95(std::span<const double> in_scores, std::span<const double> ood_scores) {
    require_nonempty(in_scores, ood_scores);
    std::vector<double> in_sorted(in_scores.begin(), in_scores.end());
    std::sort(in_sorted.begin(), in_sorted.end(), std::greater<>());
    // Largest t with |{in >= t}| / n >= 0.95 is the k-th largest in-score.
    const auto n = in_sorted.size();
    const auto k = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n)));
    const double threshold = in_sorted[std::clamp<std::size_t>(k, 1, n) - 1];

    std::size_t rejected = 0;
    for (double v : ood_scores) {
        if (v < threshold) ++rejected;
    }
    return 100.0 * static_cast<double>(rejected) / static_cast<double>(ood_scores.size());
}

double auroc(std::span<const double> in_scores, std::span<const double> ood_scores) {
    require_nonempty(in_scores, ood_scores);
    std::vector<double> ood_sorted(ood_scores.begin(), ood_scores.end());
    std::sort(ood_sorted.begin(), ood_sorted.end());
    double wins = 0.0;
    for (double v : in_scores) {
        const auto lo = std::lower_bound(ood_sorted.begin(), ood_sorted.end(), v);
        const auto hi = std::upper_bound(lo, ood_sorted.end(), v);
        wins += static_cast<double>(lo - ood_sorted.begin()) + 0.5 * static_cast<double>(hi - lo);
    }
    return wins / (static_cast<double>(in_scores.size()) * static_cast<double>(ood_scores.size()));
}

double detection_accuracy(std::span<const double> in_scores,
                          std::span<const double> ood_scores) {
    require_nonempty(in_scores, ood_scores);
    std::vector<double> in_sorted(in_scores.begin(), in_scores.end());
    std::vector<double> ood_sorted(ood_scores.begin(), ood_scores.end());
    std::sort(in_sorted.begin(), in_sorted.end());
    std::sort(ood_sorted.begin(), ood_sorted.end());

    std::vector<double> candidates;
    candidates.reserve(2 * (in_sorted.size() + ood_sorted.size()) + 2);
    std::merge(in_sorted.begin(), in_sorted.end(), ood_sorted.begin(), ood_sorted.end(),
               std::back_inserter(candidates));
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
    const std::size_t distinct = candidates.size();
    for (std::size_t i = 0; i + 1 < distinct; ++i) {
        candidates.push_back(0.5 * (candidates[i] + candidates[i + 1]));
    }
    candidates.push_back(candidates.empty() ? 1.0 : in_sorted.back() + ood_sorted.back() + 1.0);

    const auto n = static_cast<double>(in_sorted.size());
    const auto m = static_cast<double>(ood_sorted.size());
    double best = 0.0;
    for (double t : candidates) {
        const double tpr = static_cast<double>(count_at_least(in_sorted, t)) / n;
        const double tnr = static_cast<double>(count_below(ood_sorted, t)) / m;
        best = std::max(best, 0.5 * (tpr + tnr));
    }
    return best;
}

std::vector<HistogramBin> histogram_report(std::span<const double> in_scores,
                                           std::span<const double> ood_scores, int bins) {
    if (bins < 2) raise(Errc::bad_config, "histogram needs at least 2 bins");
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (double v : in_scores) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    for (double v : ood_scores) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (in_scores.empty() && ood_scores.empty()) {
        lo = 0.0;
        hi = 1.0;
    }
    if (lo == hi) {
        lo -= 0.5;
        hi += 0.5;
    }
    const double width = (hi - lo) / bins;
    std::vector<HistogramBin> out(static_cast<std::size_t>(bins));
    for (int b = 0; b < bins; ++b) {
        out[static_cast<std::size_t>(b)].lo = lo + b * width;
        out[static_cast<std::size_t>(b)].hi = lo + (b + 1) * width;
    }
    auto bin_index = [&](double v) {
        const auto raw = static_cast<long>(std::floor((v - lo) / width));
        return static_cast<std::size_t>(std::clamp<long>(raw, 0, bins - 1));
    };
    for (double v : in_scores) ++out[bin_index(v)].count_in;
    for (double v : ood_scores) ++out[bin_index(v)].count_ood;
    return out;
}

void write_histogram_csv(const std::filesystem::path& path,
                         const std::vector<HistogramBin>& bins) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) raise(Errc::io_failure, "cannot write " + path.string());
    out << "bin_lo,bin_hi,count_in,count_ood\n";
    char line[128];
    for (const auto& bin : bins) {
        std::snprintf(line, sizeof(line), "%.17g,%.17g,%zu,%zu\n", bin.lo, bin.hi, bin.count_in,
                      bin.count_ood);
        out << line;
    }
}

EvalReport evaluate(const ScoreSeries& in_scores, const ScoreSeries& ood_scores, int trials,
                    std::uint64_t seed, int histogram_bins) {
    if (trials < 1) raise(Errc::bad_config, "trials must be >= 1");
    if (in_scores.values.empty() || ood_scores.values.empty()) {
        raise(Errc::empty_series, "evaluate needs nonempty score series");
    }

    std::vector<double> tnr_values, auroc_values, acc_values;
    for (int trial = 0; trial < trials; ++trial) {
        std::vector<double> in_trial;
        std::vector<double> ood_trial;
        if (trial == 0) {
            in_trial = in_scores.values;
            ood_trial = ood_scores.values;
        } else {
            Rng rng(seed + static_cast<std::uint64_t>(trial));
            in_trial.reserve(in_scores.values.size());
            for (std::size_t i = 0; i < in_scores.values.size(); ++i) {
                in_trial.push_back(in_scores.values[rng.index(in_scores.values.size())]);
            }
            ood_trial.reserve(ood_scores.values.size());
            for (std::size_t i = 0; i < ood_scores.values.size(); ++i) {
                ood_trial.push_back(ood_scores.values[rng.index(ood_scores.values.size())]);
            }
        }
        tnr_values.push_back(tnr_at_tpr95(in_trial, ood_trial));
        auroc_values.push_back(auroc(in_trial, ood_trial));
        acc_values.push_back(detection_accuracy(in_trial, ood_trial));
    }

    auto summarize = [](const std::vector<double>& v) {
        MetricSummary s;
        for (double x : v) s.mean += x;
        s.mean /= static_cast<double>(v.size());
        double var = 0.0;
        for (double x : v) var += (x - s.mean) * (x - s.mean);
        s.sd = std::sqrt(var / static_cast<double>(v.size()));
        return s;
    };

    EvalReport report;
    report.method = in_scores.source_tag.empty() ? ood_scores.source_tag : in_scores.source_tag;
    report.n_in = in_scores.values.size();
    report.n_ood = ood_scores.values.size();
    report.tnr_at_tpr95 = summarize(tnr_values);
    report.auroc = summarize(auroc_values);
    report.detection_accuracy = summarize(acc_values);
    report.histogram = histogram_report(in_scores.values, ood_scores.values, histogram_bins);
    return report;
}

std::string report_to_json(const EvalReport& report) {
    nlohmann::json doc;
    doc["method"] = report.method;
    doc["n_in"] = report.n_in;
    doc["n_ood"] = report.n_ood;
    doc["tnr_at_tpr95"] = {{"mean", report.tnr_at_tpr95.mean}, {"sd", report.tnr_at_tpr95.sd}};
    doc["auroc"] = {{"mean", report.auroc.mean}, {"sd", report.auroc.sd}};
    doc["detection_accuracy"] = {{"mean", report.detection_accuracy.mean},
                                 {"sd", report.detection_accuracy.sd}};
    return doc.dump(2);
}

}  // namespace oodguard
