#pragma once

#include <stdexcept>
#include <string>

namespace gazemoe {

// Shape or extent disagreement between operands.
class DimensionError : public std::invalid_argument {
public:
    explicit DimensionError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Caller broke an API contract (non-scalar loss, index out of range, empty split, ...).
class ContractError : public std::logic_error {
public:
    explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

// Non-finite values where finite input is required.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Mathematically degenerate input (zero vector to a normalizer, collapsed prediction).
class DegenerateInputError : public std::runtime_error {
public:
    explicit DegenerateInputError(const std::string& msg) : std::runtime_error(msg) {}
};

// Optimizer saw a NaN/Inf gradient; message names the offending parameter.
class TrainingDivergenceError : public std::runtime_error {
public:
    explicit TrainingDivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad or unknown configuration key/value.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Corrupt, truncated or wrong-version checkpoint/dataset file.
class IntegrityError : public std::runtime_error {
public:
    explicit IntegrityError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace gazemoe
