#pragma once

#include <stdexcept>
#include <string>

namespace modalseg {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or arguments.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Tensor or image dimensions that do not fit together.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Malformed file contents: bad magic, truncation, CRC mismatch.
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// A loss or value went non-finite. `component` names the offending quantity.
class NumericError : public Error {
 public:
  NumericError(std::string component, const std::string& what)
      : Error(component + ": " + what), component_(std::move(component)) {}

  const std::string& component() const noexcept { return component_; }

 private:
  std::string component_;
};

}  // namespace modalseg
