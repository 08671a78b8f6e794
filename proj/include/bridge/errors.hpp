#pragma once

#include <stdexcept>
#include <string>

namespace bridge {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape disagreement between operands.
struct ShapeError : Error {
    using Error::Error;
};

// NaN/Inf produced or consumed by a numerical op.
struct NumericalError : Error {
    using Error::Error;
};

// An operation's precondition was violated by the caller.
struct ContractError : Error {
    using Error::Error;
};

// A runtime guarantee that should hold by construction was observed broken.
struct ContractViolation : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct VocabError : Error {
    using Error::Error;
};

// Sequence with no valid (unmasked) positions.
struct DegenerateInputError : Error {
    using Error::Error;
};

// Zero-norm row fed to a normalizer.
struct DegenerateEmbeddingError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

struct VersionError : Error {
    using Error::Error;
};

struct ChecksumError : Error {
    using Error::Error;
};

}  // namespace bridge
