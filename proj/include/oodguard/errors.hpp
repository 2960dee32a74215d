#pragma once

#include <stdexcept>
#include <string>

namespace oodguard {

// Error taxonomy. `data` errors are bad inputs (archives, manifests, shapes);
// `numeric` errors are failures of the math (singular covariance etc.);
// `usage` errors are bad invocations. The CLI maps these to exit codes.
enum class Errc {
    malformed_header,
    unsupported_dtype,
    size_mismatch,
    inconsistent_sample_count,
    missing_logits,
    missing_labels,
    label_out_of_range,
    empty_class,
    empty_predicted_class,
    empty_archive,
    empty_scores,
    empty_series,
    dimension_mismatch,
    layer_mismatch,
    non_finite_logit,
    bad_config,
    io_failure,
    singular_covariance,
};

enum class ErrorKind { usage, data, numeric };

constexpr ErrorKind kind_of(Errc code) {
    switch (code) {
    case Errc::singular_covariance: return ErrorKind::numeric;
    case Errc::bad_config: return ErrorKind::usage;
    default: return ErrorKind::data;
    }
}

constexpr const char* name_of(Errc code) {
    switch (code) {
    case Errc::malformed_header: return "MalformedHeader";
    case Errc::unsupported_dtype: return "UnsupportedDtype";
    case Errc::size_mismatch: return "SizeMismatch";
    case Errc::inconsistent_sample_count: return "InconsistentSampleCount";
    case Errc::missing_logits: return "MissingLogits";
    case Errc::missing_labels: return "MissingLabels";
    case Errc::label_out_of_range: return "LabelOutOfRange";
    case Errc::empty_class: return "EmptyClass";
    case Errc::empty_predicted_class: return "EmptyPredictedClass";
    case Errc::empty_archive: return "EmptyArchive";
    case Errc::empty_scores: return "EmptyScores";
    case Errc::empty_series: return "EmptySeries";
    case Errc::dimension_mismatch: return "DimensionMismatch";
    case Errc::layer_mismatch: return "LayerMismatch";
    case Errc::non_finite_logit: return "NonFiniteLogit";
    case Errc::bad_config: return "BadConfig";
    case Errc::io_failure: return "IoFailure";
    case Errc::singular_covariance: return "SingularCovariance";
    }
    return "UnknownError";
}

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& detail)
        : std::runtime_error(std::string(name_of(code)) + ": " + detail), code_(code) {}

    Errc code() const noexcept { return code_; }
    ErrorKind kind() const noexcept { return kind_of(code_); }

private:
    Errc code_;
};

[[noreturn]] inline void raise(Errc code, const std::string& detail) {
    throw Error(code, detail);
}

}  // namespace oodguard
