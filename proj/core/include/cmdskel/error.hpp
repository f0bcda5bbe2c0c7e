// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace cmdskel {

// Base class for everything thrown by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shapes or file schemas do not line up.
struct ShapeError : Error {
    using Error::Error;
};

// A parameter is out of range or an input is degenerate (e.g. zero-norm vector).
struct ValueError : Error {
    using Error::Error;
};

// A mathematical domain violation, e.g. log of zero where mass is present.
struct NumericError : Error {
    using Error::Error;
};

// An API contract was violated (empty bank, non-scalar loss, missing labels, ...).
struct UsageError : Error {
    using Error::Error;
};

// Malformed input file; message carries the offending line number.
struct ParseError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

}  // namespace cmdskel
