#pragma once

#include <stdexcept>
#include <string>

namespace refreshkv {

// Invalid hyperparameters or dimension relations. Surfaced before any compute.
class ConfigError : public std::invalid_argument {
public:
    explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

// A caller broke an operation's precondition, or an engine invariant failed.
class ContractViolation : public std::logic_error {
public:
    explicit ContractViolation(const std::string& what) : std::logic_error(what) {}
};

class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace refreshkv
