// Copyright 2026 The lidar-ptq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace lptq {

/// Base of every error raised by the library. `code()` is the process exit
/// status the CLI reports for it.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, int code = 3)
      : std::runtime_error(what), code_(code) {}
  int code() const noexcept { return code_; }

 private:
  int code_;
};

/// Bad user-facing configuration: unknown keys, malformed values, missing
/// files named by the config.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what, 2) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(what) {}
};

/// Invalid quantization parameters or out-of-domain numeric input.
class ParamError : public Error {
 public:
  explicit ParamError(const std::string& what) : Error(what) {}
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error(what) {}
};

}  // namespace lptq
