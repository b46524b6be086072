#pragma once

#include <stdexcept>
#include <string>

namespace ppp {

// Every error raised by the library carries a stable class name so the CLI
// can report it and map it onto an exit code.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(what), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

/// A caller broke a documented precondition (shape, layer id, identity mix).
class ContractViolation : public Error {
public:
    explicit ContractViolation(const std::string& what) : Error("ContractViolation", what) {}
};

/// Invalid hyperparameter or config file content.
class ConfigurationError : public Error {
public:
    explicit ConfigurationError(const std::string& what) : Error("ConfigurationError", what) {}
};

class InsufficientEnrollment : public Error {
public:
    explicit InsufficientEnrollment(const std::string& what)
        : Error("InsufficientEnrollment", what) {}
};

/// Missing, truncated or otherwise unreadable input file.
class IngestionError : public Error {
public:
    explicit IngestionError(const std::string& what) : Error("IngestionError", what) {}
};

/// The pruned network disagrees with the masked full network.
class PruningDefect : public Error {
public:
    explicit PruningDefect(const std::string& what) : Error("PruningDefect", what) {}
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
public:
    explicit DivergenceError(const std::string& what) : Error("DivergenceError", what) {}
};

inline void expects(bool cond, const std::string& what) {
    if (!cond) throw ContractViolation(what);
}

} // namespace ppp
