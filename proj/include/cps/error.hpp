// Copyright 2026 The CPS Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>

namespace cps {

/// Failure categories. The CLI maps each one to a distinct exit code.
enum class ErrorKind {
  structural = 10,  // shapes or layouts that do not chain
  numeric = 11,     // non-finite values
  input = 12,       // caller-supplied data out of contract
  state = 13,       // operation invalid for the current registry state
  format = 14,      // malformed files
  saturation = 15,  // pruning emptied a layer
  config = 16,
};

const char* to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class StructuralError : public Error {
 public:
  explicit StructuralError(const std::string& what) : Error(ErrorKind::structural, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

class InputError : public Error {
 public:
  explicit InputError(const std::string& what) : Error(ErrorKind::input, what) {}
};

class StateError : public Error {
 public:
  explicit StateError(const std::string& what) : Error(ErrorKind::state, what) {}
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error(ErrorKind::format, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

/// Thrown when pruning removes every connection of a layer.
class SaturationError : public Error {
 public:
  SaturationError(int layer, const std::string& what)
      : Error(ErrorKind::saturation, what), layer_(layer) {}

  int layer() const noexcept { return layer_; }

 private:
  int layer_;
};

inline const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::structural: return "structural";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::input: return "input";
    case ErrorKind::state: return "state";
    case ErrorKind::format: return "format";
    case ErrorKind::saturation: return "saturation";
    case ErrorKind::config: return "config";
  }
  return "unknown";
}

}  // namespace cps
