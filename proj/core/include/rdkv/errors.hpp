#pragma once

#include <stdexcept>
#include <string>

namespace rdkv {

// Malformed container bytes, bad magic, size disagreements.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite inputs, degenerate distributions, non-convergence.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace rdkv
