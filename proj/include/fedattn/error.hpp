#pragma once

#include <stdexcept>
#include <string>

namespace fedattn {

// Error taxonomy mirrored by the C API status codes and the CLI exit codes.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// A softmax row with every entry masked has no valid distribution.
struct DegenerateRowError : NumericError {
    explicit DegenerateRowError(const std::string& what) : NumericError(what) {}
};

struct ScheduleError : ConfigError {
    explicit ScheduleError(const std::string& what) : ConfigError(what) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace fedattn
