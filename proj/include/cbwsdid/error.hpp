#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cbwsdid {

/// Failure classes map onto process exit codes: input problems are the
/// caller's to fix (2), estimation problems are properties of the data (1).
enum class ErrorKind { Input, Estimation };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message, std::vector<std::string> details = {})
        : std::runtime_error(message), kind_(kind), details_(std::move(details)) {}

    ErrorKind kind() const noexcept { return kind_; }

    /// Offending items (unit ids, row numbers, frame keys) for structured reporting.
    const std::vector<std::string>& details() const noexcept { return details_; }

private:
    ErrorKind kind_;
    std::vector<std::string> details_;
};

class InputError : public Error {
public:
    explicit InputError(const std::string& message, std::vector<std::string> details = {})
        : Error(ErrorKind::Input, message, std::move(details)) {}
};

class EstimationError : public Error {
public:
    explicit EstimationError(const std::string& message, std::vector<std::string> details = {})
        : Error(ErrorKind::Estimation, message, std::move(details)) {}
};

}  // namespace cbwsdid
