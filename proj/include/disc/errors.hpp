#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace disc {

// Exit-code categories used by the CLI: 2 config, 3 data, 4 numeric.
class Error : public std::runtime_error {
public:
    Error(std::string msg, int exit_code)
        : std::runtime_error(std::move(msg)), exit_code_(exit_code) {}
    int exit_code() const { return exit_code_; }

private:
    int exit_code_;
};

class ConfigError : public Error {
public:
    explicit ConfigError(std::string msg) : Error(std::move(msg), 2) {}
};

class DataError : public Error {
public:
    explicit DataError(std::string msg) : Error(std::move(msg), 3) {}
};

class NumericError : public Error {
public:
    explicit NumericError(std::string msg) : Error(std::move(msg), 4) {}
};

class ShapeError : public DataError {
public:
    explicit ShapeError(std::string msg) : DataError(std::move(msg)) {}
};

class LabelError : public DataError {
public:
    explicit LabelError(std::string msg) : DataError(std::move(msg)) {}
};

class DegenerateBatchError : public DataError {
public:
    explicit DegenerateBatchError(std::string msg) : DataError(std::move(msg)) {}
};

class StructureError : public DataError {
public:
    explicit StructureError(std::string msg) : DataError(std::move(msg)) {}
};

class WrongModelError : public DataError {
public:
    explicit WrongModelError(std::string msg) : DataError(std::move(msg)) {}
};

class ProtocolError : public DataError {
public:
    explicit ProtocolError(std::string msg) : DataError(std::move(msg)) {}
};

class InsufficientDataError : public DataError {
public:
    explicit InsufficientDataError(std::string msg) : DataError(std::move(msg)) {}
};

// Carries the byte offset at which a malformed file was rejected.
class FormatError : public DataError {
public:
    FormatError(std::string msg, std::uint64_t byte_offset)
        : DataError(msg + " (at byte offset " + std::to_string(byte_offset) + ")"),
          byte_offset_(byte_offset) {}
    std::uint64_t byte_offset() const { return byte_offset_; }

private:
    std::uint64_t byte_offset_;
};

}  // namespace disc
