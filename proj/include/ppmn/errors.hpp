#pragma once

#include <stdexcept>
#include <string>

namespace ppmn {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shapes of operands disagree.
struct DimensionError : Error {
    using Error::Error;
};

// A configuration value is invalid (groups not dividing C, S > P, ...).
struct ConfigError : Error {
    using Error::Error;
};

struct BoundsError : Error {
    using Error::Error;
};

// API misuse: non-scalar backward, empty inputs where one is required.
struct UsageError : Error {
    using Error::Error;
};

// NaN or Inf produced by a forward op or found in a gradient.
struct NumericError : Error {
    using Error::Error;
};

// Malformed or inconsistent tensor bundle.
struct FormatError : Error {
    using Error::Error;
};

struct GenerationError : Error {
    using Error::Error;
};

}  // namespace ppmn
