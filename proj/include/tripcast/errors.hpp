#pragma once

#include <stdexcept>
#include <string>

namespace tripcast {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid configuration (bad key, failed cross-field constraint, missing file).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed input data: parse failures, duplicate records, inconsistent frames.
class DataError : public Error {
public:
    using Error::Error;
};

/// An operation was called with an argument outside its contract.
class DomainError : public Error {
public:
    using Error::Error;
};

/// A dataset split could not be constructed.
class SplitError : public Error {
public:
    using Error::Error;
};

/// Corrupt, truncated, or mismatched checkpoint file.
class CheckpointError : public Error {
public:
    using Error::Error;
};

/// Non-finite value encountered in the numeric pipeline.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Filesystem failure.
class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace tripcast
