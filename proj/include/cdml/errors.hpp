#pragma once

#include <stdexcept>
#include <string>

namespace cdml {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Shape or axis mismatch between operands.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Input outside the mathematical domain of an operation (log/sqrt of a negative).
class NumericDomainError : public Error {
public:
    using Error::Error;
};

/// A documented precondition was violated by the caller.
class ContractError : public Error {
public:
    using Error::Error;
};

/// Input is degenerate for the requested operation (e.g. normalizing a zero vector).
class DegenerateInputError : public Error {
public:
    using Error::Error;
};

/// Too few samples to estimate the requested statistic.
class InsufficientSamplesError : public Error {
public:
    using Error::Error;
};

/// Malformed file contents; message carries line or byte offset.
class ParseError : public Error {
public:
    using Error::Error;
};

/// Non-finite value appeared where training requires finite arithmetic.
class NumericalError : public Error {
public:
    using Error::Error;
};

/// Filesystem failure; message carries the offending path.
class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace cdml
