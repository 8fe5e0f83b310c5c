#pragma once

#include <stdexcept>
#include <string>

namespace stemnet {

// Base for everything this library throws. The CLI maps ConfigError to
// exit code 2 (usage/config) and every other Error to exit code 1.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor extents inconsistent with an operation's contract.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Invalid configuration (bad hyperparameter, non-integer output extent, ...).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Malformed file contents (bad magic, unsupported datatype, truncation).
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& msg) : Error(msg) {}
};

// Structurally valid file with a version this build does not understand.
class VersionError : public Error {
 public:
  explicit VersionError(const std::string& msg) : Error(msg) {}
};

// A tensor required by the checkpoint schema is absent.
class MissingTensorError : public Error {
 public:
  explicit MissingTensorError(const std::string& msg) : Error(msg) {}
};

// Value-level violations (label code out of range, non-finite input, ...).
class ValueError : public Error {
 public:
  explicit ValueError(const std::string& msg) : Error(msg) {}
};

// Filesystem-level failure (cannot open/read/write).
class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error(msg) {}
};

}  // namespace stemnet
