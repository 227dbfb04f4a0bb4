#pragma once

#include <stdexcept>
#include <string>

namespace raymoe {

/// Invalid configuration or shape mismatch. Maps to CLI exit code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed, truncated, or unsupported input file. Maps to exit code 2.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Structured parse failure of a versioned artifact (topology/model files).
class ParseError : public DataError {
 public:
  ParseError(std::string section, const std::string& what)
      : DataError(section.empty() ? what : section + ": " + what),
        section_(std::move(section)) {}

  const std::string& section() const noexcept { return section_; }

 private:
  std::string section_;
};

/// Non-finite loss, failed gradient check. Maps to exit code 3.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace raymoe
