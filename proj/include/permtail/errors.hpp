#pragma once

#include <stdexcept>
#include <string>

namespace permtail {

/// Invalid distribution or fit parameters (e.g. sigma <= 0).
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// An operation was called outside its domain (bad argument value).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// An optimizer or root finder did not converge within its budget.
class EstimationError : public std::runtime_error {
 public:
  EstimationError(const std::string& method, const std::string& what)
      : std::runtime_error(method + ": " + what), method_(method) {}
  const std::string& method() const { return method_; }

 private:
  std::string method_;
};

/// Invalid or inconsistent configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A method/option pairing that is not defined (e.g. MOM with a support
/// constraint).
class UnsupportedCombination : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Malformed input data; carries a 1-based line/column position when known.
class DataError : public std::runtime_error {
 public:
  DataError(const std::string& what, std::size_t line = 0, std::size_t column = 0)
      : std::runtime_error(format(what, line, column)), line_(line), column_(column) {}
  std::size_t line() const { return line_; }
  std::size_t column() const { return column_; }

 private:
  static std::string format(const std::string& what, std::size_t line, std::size_t column) {
    if (line == 0) return what;
    std::string s = what + " (line " + std::to_string(line);
    if (column != 0) s += ", column " + std::to_string(column);
    return s + ")";
  }
  std::size_t line_;
  std::size_t column_;
};

}  // namespace permtail
