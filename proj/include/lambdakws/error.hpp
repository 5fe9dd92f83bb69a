// Error hierarchy shared by all lambdakws modules.
#pragma once

#include <stdexcept>
#include <string>

namespace lambdakws {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shapes or axes do not line up.
struct DimensionError : Error {
    using Error::Error;
};

// Invalid layer / policy / run configuration, detected at construction time.
struct ConfigError : Error {
    using Error::Error;
};

// Non-finite values or other numeric breakdown at run time.
struct NumericError : Error {
    using Error::Error;
};

// API used out of order (e.g. backward called twice on the same graph).
struct StateError : Error {
    using Error::Error;
};

// Precondition of an operation violated by its arguments.
struct ContractError : Error {
    using Error::Error;
};

// Malformed input bytes (WAV headers, checkpoints, archives).
struct DecodeError : Error {
    using Error::Error;
};

// Filesystem / dataset ingestion problems.
struct IoError : Error {
    using Error::Error;
};

}  // namespace lambdakws
