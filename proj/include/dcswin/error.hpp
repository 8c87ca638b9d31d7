#pragma once

#include <stdexcept>

namespace dcswin {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Thrown when operand shapes violate an op's contract.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Thrown when a forward op produces NaN/Inf from finite inputs, or when
/// non-finite values reach a place that requires finite ones.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration: unknown key, unparsable value or violated bound.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Training produced a non-finite loss, gradient or activation.
class DivergenceError : public Error {
public:
    using Error::Error;
};

}  // namespace dcswin
