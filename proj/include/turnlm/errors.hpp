#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace turnlm {

/// Malformed input file. `line()` is 1-based, 0 when not line-oriented.
class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, std::size_t line = 0)
        : std::runtime_error(line ? "line " + std::to_string(line) + ": " + what : what),
          line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// A conversation that cannot be brought into user-first alternating form.
class NormalizationError : public std::runtime_error {
public:
    NormalizationError(const std::string& conversation_id, const std::string& what)
        : std::runtime_error("conversation '" + conversation_id + "': " + what),
          id_(conversation_id) {}

    const std::string& conversation_id() const noexcept { return id_; }

private:
    std::string id_;
};

/// Non-finite value encountered in model math or the optimizer.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Input violates an operation's precondition.
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Sequence does not fit into the model's position table.
class CapacityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace turnlm
