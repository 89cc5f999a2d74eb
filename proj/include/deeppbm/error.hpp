#pragma once

#include <stdexcept>
#include <string>

namespace deeppbm {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& what) : Error("shape mismatch: " + what) {}
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Malformed file contents (checkpoints, images).
class FormatError : public Error {
public:
    using Error::Error;
};

/// NaN or infinity where a finite value is required.
class NumericError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace deeppbm
