#pragma once

#include <stdexcept>
#include <string>

namespace crowdstat {

// Malformed or inconsistent input files. CLI exit code 2.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A statistical precondition does not hold (constant variable, uncovered
// strata, too few exchangeable units, ...). CLI exit code 3.
class StatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Simulation config does not match its schema. CLI exit code 4.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& what)
      : std::runtime_error(field + ": " + what), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

}  // namespace crowdstat
