#pragma once

#include <stdexcept>
#include <string>

namespace vlp {

// Error taxonomy. The numeric core throws DimensionError/DomainError;
// the higher modules map their failure modes onto the rest.

struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DomainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A sampled crop covers no patch centers; callers resample.
struct DegenerateCropError : DomainError {
    using DomainError::DomainError;
};

// A caller violated an API precondition (non-scalar loss, empty batch, ...).
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Frozen state mutated, fingerprint mismatch, corrupt checkpoint.
struct IntegrityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace vlp
