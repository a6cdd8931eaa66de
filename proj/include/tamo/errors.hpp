#pragma once

#include <stdexcept>
#include <string>

namespace tamo {

// Error taxonomy mirrored by the CLI exit codes:
//   2 config, 3 data/format, 4 provider/transport, 5 training divergence.
class Error : public std::runtime_error {
public:
    Error(int exit_code, std::string kind, const std::string& msg)
        : std::runtime_error(msg), exit_code_(exit_code), kind_(std::move(kind)) {}
    int exit_code() const noexcept { return exit_code_; }
    const std::string& kind() const noexcept { return kind_; }

private:
    int exit_code_;
    std::string kind_;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(2, "config", msg) {}
};

// Violated call contract (bad shapes, out-of-range indices, empty inputs).
class ContractError : public Error {
public:
    explicit ContractError(const std::string& msg) : Error(2, "contract", msg) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& msg) : Error(3, "data", msg) {}
};

class TransportError : public Error {
public:
    explicit TransportError(const std::string& msg) : Error(4, "transport", msg) {}
};

class DivergenceError : public Error {
public:
    explicit DivergenceError(const std::string& msg) : Error(5, "divergence", msg) {}
};

}  // namespace tamo
