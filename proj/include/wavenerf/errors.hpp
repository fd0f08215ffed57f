#pragma once

#include <stdexcept>
#include <string>

namespace wavenerf {

// Base class for all recoverable errors raised by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or extent mismatch between operands.
struct DimensionError : Error {
    using Error::Error;
};

// A caller violated an operation precondition (non-scalar loss, unsorted
// depths, mismatched optimizer state, ...).
struct ContractError : Error {
    using Error::Error;
};

// Degenerate camera geometry (singular intrinsics, invalid rotation).
struct GeometryError : Error {
    using Error::Error;
};

// File or stream level failure; message carries the path.
struct IoError : Error {
    using Error::Error;
};

// Invalid configuration document or scene spec.
struct ConfigError : Error {
    using Error::Error;
};

}  // namespace wavenerf
