#pragma once

#include <stdexcept>
#include <string>

namespace mirau {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Incompatible tensor extents or ranks.
struct ShapeError : Error {
    using Error::Error;
};

// Invalid configuration values (groups, heads, fractions, ...).
struct ConfigError : Error {
    using Error::Error;
};

// Unreadable files, malformed datasets or checkpoints.
struct DataError : Error {
    using Error::Error;
};

// An operation produced NaN/Inf; training state is no longer trustworthy.
struct NumericError : Error {
    using Error::Error;
};

}  // namespace mirau
