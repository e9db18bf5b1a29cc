#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace malimg {

enum class ErrorKind {
    EmptyInput,
    NotAligned,
    MissingFile,
    UnknownFamily,
    FamilyTooSmall,
    BadSpec,
    BadConfig,
    ShapeMismatch,
    BatchMismatch,
    NonFinite,
    StructuralMismatch,
    EmptyCorpus,
    TooFewRows,
    DegenerateLabels,
    EmptyReference,
    ExternalToolFailure,
    Io,
};

std::string_view to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

    // Validation failures (bad arguments, bad config) as opposed to runtime failures.
    bool is_validation() const noexcept {
        return kind_ == ErrorKind::BadSpec || kind_ == ErrorKind::BadConfig;
    }

private:
    ErrorKind kind_;
};

}  // namespace malimg
