#pragma once

#include <stdexcept>
#include <string>

namespace bprr {

/// Base class of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid configuration or argument values (CLI exit code 2).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed, missing or inconsistent input data (CLI exit code 3).
class DataError : public Error {
public:
    using Error::Error;
};

/// Numerical failure: non-SPD matrices, singular systems (CLI exit code 4).
class NumericalError : public Error {
public:
    using Error::Error;
};

/// Dimension mismatch between model components.
class DimensionError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

}  // namespace bprr
