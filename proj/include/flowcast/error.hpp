#pragma once

#include <stdexcept>
#include <string>

namespace flowcast {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dimension or rank mismatch between tensors.
struct ShapeError : Error {
    using Error::Error;
};

// Contract violation on values (bad index, degenerate mask, non-scalar loss, ...).
struct ValueError : Error {
    using Error::Error;
};

// Failure to read or parse a dataset directory or checkpoint.
struct IoError : Error {
    using Error::Error;
};

// Invalid run configuration.
struct ConfigError : Error {
    using Error::Error;
};

// Raised by the masked loss when a batch contains no valid target; the
// training loop catches it and moves on to the next batch.
struct SkipBatch : Error {
    using Error::Error;
};

// Regression fit cannot be computed (too few points or zero variance).
struct FitError : Error {
    using Error::Error;
};

}  // namespace flowcast
