#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace jointsparse {

// Every error raised by the library derives from Error so callers can catch
// one type; the leaf types let the CLI map failures to distinct exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class UnsupportedError : public Error {
public:
    using Error::Error;
};

class ConstructionError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
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

class FormatError : public Error {
public:
    using Error::Error;
};

class BadMagicError : public FormatError {
public:
    using FormatError::FormatError;
};

class TruncatedError : public FormatError {
public:
    using FormatError::FormatError;
};

class CountMismatchError : public FormatError {
public:
    using FormatError::FormatError;
};

class CrcError : public FormatError {
public:
    using FormatError::FormatError;
};

// Corrupt LZW stream; position is the bit offset of the offending code.
class DecodeError : public FormatError {
public:
    DecodeError(const std::string& what, std::size_t bit_position)
        : FormatError(what + " at bit " + std::to_string(bit_position)), position_(bit_position) {}

    std::size_t position() const noexcept { return position_; }

private:
    std::size_t position_;
};

}  // namespace jointsparse
