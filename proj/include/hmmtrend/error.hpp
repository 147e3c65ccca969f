#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace hmmtrend {

// Base for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidParameter : public Error {
public:
    using Error::Error;
};

class InvalidInput : public Error {
public:
    using Error::Error;
};

// Total likelihood mass at time index t collapsed to zero.
class DegenerateLikelihood : public Error {
public:
    explicit DegenerateLikelihood(std::size_t t)
        : Error("degenerate likelihood at t=" + std::to_string(t)), t_(t) {}

    std::size_t time_index() const noexcept { return t_; }

private:
    std::size_t t_;
};

class InsufficientData : public Error {
public:
    using Error::Error;
};

class FitError : public Error {
public:
    using Error::Error;
};

class SamplerFailure : public Error {
public:
    using Error::Error;
};

class BridgeFailure : public Error {
public:
    using Error::Error;
};

class OutOfSession : public InvalidInput {
public:
    using InvalidInput::InvalidInput;
};

class DegenerateSpline : public FitError {
public:
    using FitError::FitError;
};

// Malformed input file; carries the 1-based line number.
class ParseError : public Error {
public:
    ParseError(std::size_t line, const std::string& what)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

}  // namespace hmmtrend
