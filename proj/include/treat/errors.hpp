#pragma once

#include <stdexcept>
#include <string>

namespace treat {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid configuration or usage (CLI exit code 1).
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

/// Bad input data: files, formats, schemas, mismatched widths (CLI exit code 2).
class DataError : public Error {
public:
    explicit DataError(const std::string& msg) : Error(msg) {}
};

/// Tensor dimension mismatch.
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

/// Contract violation on values (labels outside {0,1}, non-scalar loss, ...).
class ValueError : public Error {
public:
    explicit ValueError(const std::string& msg) : Error(msg) {}
};

/// Numeric failure: NaN gradients, non-convergence (CLI exit code 3).
class NumericError : public Error {
public:
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

}  // namespace treat
