#pragma once

#include <stdexcept>
#include <string>

namespace echokv {

// Error taxonomy mirrors the CLI exit codes:
//   config/dimension/input/usage -> 2, io -> 3, numeric/training -> 4
enum class ErrorKind {
    config,
    dimension,
    input,
    usage,
    io,
    numeric,
};

class Error : public std::runtime_error {
  public:
    Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}

    ErrorKind kind() const { return kind_; }

    int exit_code() const {
        switch (kind_) {
            case ErrorKind::config:
            case ErrorKind::dimension:
            case ErrorKind::input:
            case ErrorKind::usage: return 2;
            case ErrorKind::io: return 3;
            case ErrorKind::numeric: return 4;
        }
        return 1;
    }

  private:
    ErrorKind kind_;
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(ErrorKind::config, msg) {}
};
struct DimensionError : Error {
    explicit DimensionError(const std::string& msg) : Error(ErrorKind::dimension, msg) {}
};
struct InputError : Error {
    explicit InputError(const std::string& msg) : Error(ErrorKind::input, msg) {}
};
struct UsageError : Error {
    explicit UsageError(const std::string& msg) : Error(ErrorKind::usage, msg) {}
};
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(ErrorKind::io, msg) {}
};
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(ErrorKind::numeric, msg) {}
};
struct TrainingError : Error {
    explicit TrainingError(const std::string& msg) : Error(ErrorKind::numeric, msg) {}
};

} // namespace echokv
