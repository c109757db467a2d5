#pragma once

#include <stdexcept>
#include <string>

namespace relkd {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or an invalid reshape.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A caller violated a documented precondition.
class ContractError : public Error {
public:
    using Error::Error;
};

/// NaN or Inf observed at an op boundary, or a non-finite loss.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Softmax row with no unmasked entry.
class DegenerateRowError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Malformed checkpoint, CSV, or trace file.
class FormatError : public Error {
public:
    using Error::Error;
};

/// The host misbehaved, e.g. a monotonic clock went backwards.
class EnvironmentError : public Error {
public:
    using Error::Error;
};

/// A benchmark measurement could not be completed (e.g. too few power samples).
class MeasurementError : public Error {
public:
    using Error::Error;
};

}  // namespace relkd
