#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cgdm {

// Shapes that cannot be combined by the requested operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A caller violated a precondition (bad label, non-scalar backward, stale state...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Input outside the mathematical domain of an operation (log of 0, sqrt of -1).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cgdm
