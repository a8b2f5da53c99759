#pragma once

#include <stdexcept>
#include <string>

namespace cilforge {

// Invalid configuration or plan (CLI exit code 2).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed input to an operation: wrong shapes, out-of-range labels, NaNs.
struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Operation called in a state where it is not defined.
struct StateError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Parameter initialization failed (e.g. imprinting a class with no samples).
struct InitializationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Training aborted mid-run (non-finite loss and similar). CLI exit code 3.
struct RuntimeAbort : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace cilforge
