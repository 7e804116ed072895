#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace infrank {

/// Error families. The CLI maps each one to a distinct exit code.
enum class ErrorKind {
    kInvalidArgument = 2,
    kIo = 3,
    kMalformedRow = 4,
    kDimensionMismatch = 5,
    kLabelOutOfRange = 6,
    kMissingTrueLabel = 7,
    kInsufficientData = 8,
    kNumerical = 9,
    kEmptyCleanSet = 10,
    kMixedBagLabels = 11,
    kConfig = 12,
};

constexpr std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::kInvalidArgument: return "invalid argument";
        case ErrorKind::kIo: return "io error";
        case ErrorKind::kMalformedRow: return "malformed row";
        case ErrorKind::kDimensionMismatch: return "dimension mismatch";
        case ErrorKind::kLabelOutOfRange: return "label out of range";
        case ErrorKind::kMissingTrueLabel: return "missing true label";
        case ErrorKind::kInsufficientData: return "insufficient data";
        case ErrorKind::kNumerical: return "numerical breakdown";
        case ErrorKind::kEmptyCleanSet: return "empty clean set";
        case ErrorKind::kMixedBagLabels: return "mixed bag labels";
        case ErrorKind::kConfig: return "config error";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }
    int exit_code() const noexcept { return static_cast<int>(kind_); }

private:
    ErrorKind kind_;
};

inline void require(bool cond, ErrorKind kind, const std::string& what) {
    if (!cond) throw Error(kind, what);
}

}  // namespace infrank
