#pragma once

#include <stdexcept>
#include <string>

namespace p2mam {

// Every error raised by the library derives from Error. The CLI maps each
// subclass to a distinct process exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid arguments, flags, or configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Files that cannot be opened, read, or written.
class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed input data, shape mismatches, checkpoint/flag mismatches, and
// data sets that become empty after filtering.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Non-finite values appearing in losses, gradients, or parameters.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace p2mam
