#pragma once

#include <string>
#include <vector>

namespace oodguard {

// Per-sample detector scores in canonical orientation: higher means more
// in-distribution. Gram deviations and energies are negated at this boundary
// so one calibration and one metric suite serve all detectors.
struct ScoreSeries {
    std::vector<double> values;  // archive sample order
    std::string source_tag;
};

}  // namespace oodguard
