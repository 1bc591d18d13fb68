#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace vatt {

// Base class for all library errors. Subclasses map onto the CLI exit-code
// contract: input/contract/config problems exit 2, numeric failures exit 3.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shape or extent disagreement between operands.
class DimensionError : public Error {
public:
    using Error::Error;
};

// A precondition of an operation was violated by the caller.
class ContractError : public Error {
public:
    using Error::Error;
};

// Invalid configuration value (bad reduction ratio, lo >= hi, ...).
class ConfigError : public Error {
public:
    using Error::Error;
};

// NaN/Inf appeared where only finite values are allowed.
class NumericError : public Error {
public:
    using Error::Error;
};

// File could not be opened, read, or written.
class IoError : public Error {
public:
    using Error::Error;
};

// Malformed input file. Carries the byte offset where parsing stopped.
class ParseError : public Error {
public:
    ParseError(const std::string& msg, std::size_t byte_offset)
        : Error(msg + " (byte offset " + std::to_string(byte_offset) + ")"),
          offset_(byte_offset) {}

    std::size_t byte_offset() const noexcept { return offset_; }

private:
    std::size_t offset_ = 0;
};

}  // namespace vatt
