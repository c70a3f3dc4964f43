#pragma once

#include <stdexcept>
#include <string>

namespace ltuning {

// Base for everything this library throws.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape / dimension violations.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Token id outside the vocabulary.
class VocabError : public Error {
public:
    using Error::Error;
};

// Bad ingestion input (malformed line, unknown label, missing column).
class DataError : public Error {
public:
    using Error::Error;
};

// Filesystem-level failures (open/read/write).
class IoError : public Error {
public:
    using Error::Error;
};

// Invalid run configuration (odd batch size, zero steps, K < 2, ...).
class ConfigError : public Error {
public:
    using Error::Error;
};

// Training failures: missing gradients, diverged loss.
class TrainError : public Error {
public:
    using Error::Error;
};

// Weight-file format problems. Each condition is a distinct subclass so
// callers can tell a corrupted payload from an unsupported container.
class WeightFormatError : public Error {
public:
    using Error::Error;
};

class BadMagicError : public WeightFormatError {
public:
    using WeightFormatError::WeightFormatError;
};

class VersionMismatchError : public WeightFormatError {
public:
    using WeightFormatError::WeightFormatError;
};

class TruncatedFileError : public WeightFormatError {
public:
    using WeightFormatError::WeightFormatError;
};

class ChecksumError : public WeightFormatError {
public:
    using WeightFormatError::WeightFormatError;
};

}  // namespace ltuning
