#pragma once

#include <stdexcept>
#include <string>

namespace hpgee2 {

// Base for every error raised by the library. The message always starts with
// "<module>::<operation>: " so diagnostics can be traced to their source.
class Error : public std::runtime_error {
 public:
  Error(std::string module, std::string operation, const std::string& detail)
      : std::runtime_error(module + "::" + operation + ": " + detail),
        module_(std::move(module)),
        operation_(std::move(operation)) {}

  const std::string& module() const noexcept { return module_; }
  const std::string& operation() const noexcept { return operation_; }

 private:
  std::string module_;
  std::string operation_;
};

// A value left the domain where the probability algebra is defined.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Singular or badly conditioned matrix.
class LinearAlgebraError : public Error {
 public:
  using Error::Error;
};

// Malformed data (pair lists, dimensions, missing pairs).
class StructuralError : public Error {
 public:
  using Error::Error;
};

// Caller broke a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Input file problems; carries file and 1-based line.
class ParseError : public Error {
 public:
  ParseError(std::string operation, std::string file, long line, const std::string& detail)
      : Error("cli-io", std::move(operation),
              file + ":" + std::to_string(line) + ": " + detail),
        file_(std::move(file)),
        line_(line) {}

  const std::string& file() const noexcept { return file_; }
  long line() const noexcept { return line_; }

 private:
  std::string file_;
  long line_;
};

}  // namespace hpgee2
