#pragma once

#include <stdexcept>
#include <string>

namespace pfc {

// Error taxonomy. The CLI maps these onto distinct exit codes.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Incompatible matrix/vector dimensions.
struct ShapeError : Error {
    using Error::Error;
};

// A caller violated a documented precondition.
struct ContractError : Error {
    using Error::Error;
};

// A request exceeds what a buffer or population can supply
// (e.g. more positives than the sample buffer can hold).
struct CapacityError : Error {
    using Error::Error;
};

// Bad configuration file or flag value.
struct ConfigError : Error {
    using Error::Error;
};

// Unreadable, missing, or version-mismatched data file.
struct DataError : Error {
    using Error::Error;
};

// NaN/Inf surfaced during computation.
struct NumericalError : Error {
    using Error::Error;
};

namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int config = 2;
inline constexpr int data = 3;
inline constexpr int numerical = 4;
} // namespace exit_code

} // namespace pfc
