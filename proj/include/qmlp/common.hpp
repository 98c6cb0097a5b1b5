#pragma once

#include <stdexcept>
#include <string>

namespace qmlp {

// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor dimension / shape mismatch.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Violated precondition of an operation.
class ContractError : public Error {
public:
    using Error::Error;
};

// Input that is structurally valid but statistically unusable
// (empty reduction axis, batch of one for batch statistics, ...).
class DegenerateInputError : public ContractError {
public:
    using ContractError::ContractError;
};

// Non-finite values where finite arithmetic is required.
class NumericError : public Error {
public:
    using Error::Error;
};

// Invalid or unsupported configuration value.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Malformed text input (config files); carries a line number in the message.
class ParseError : public Error {
public:
    using Error::Error;
};

// Malformed binary input (checkpoint / IDX containers).
class FormatError : public Error {
public:
    using Error::Error;
};

// Two inputs that must agree do not (image/label counts, checkpoint names).
class ConsistencyError : public Error {
public:
    using Error::Error;
};

} // namespace qmlp
