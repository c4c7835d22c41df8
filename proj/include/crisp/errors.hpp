#pragma once

#include <stdexcept>
#include <string>

namespace crisp {

// Base for all workbench errors. Subtypes exist so callers (and the C API)
// can map failures to stable categories.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Operand dimensions incompatible with the operation.
struct ShapeError : Error {
    using Error::Error;
};

// Numerically degenerate input: zero rows, vanishing norms, zero variance.
struct DegenerateError : Error {
    using Error::Error;
};

// Parameter outside its documented range.
struct ParamError : Error {
    using Error::Error;
};

// A stated pre/postcondition was violated (non-scalar loss, negative
// component, missing ledger entry, ...).
struct ContractError : Error {
    using Error::Error;
};

// Configuration file problems; message carries file:line:col when known.
struct ConfigError : Error {
    using Error::Error;
};

// Filesystem and serialization failures.
struct IoError : Error {
    using Error::Error;
};

}  // namespace crisp
