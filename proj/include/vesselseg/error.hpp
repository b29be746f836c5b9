/*
 *  Copyright 2026 The vesselseg Authors
 *
 *  Licensed under the Apache License, Version 2.0 (the "License");
 *  you may not use this file except in compliance with the License.
 *  You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 *  Unless required by applicable law or agreed to in writing, software
 *  distributed under the License is distributed on an "AS IS" BASIS,
 *  WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 *  See the License for the specific language governing permissions and
 *  limitations under the License.
 */

#pragma once

#include <stdexcept>
#include <string>

namespace vesselseg {

/// Error categories shared by the C++ core and the C API. The numeric values
/// double as CLI exit codes, so they must stay stable.
enum class ErrorCode : int {
  internal = 1,
  config = 2,
  data = 3,
  numeric = 4,
  argument = 5,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Sized-input / shape contract violations.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(ErrorCode::argument, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorCode::config, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorCode::data, what) {}
};

/// A metric that is not defined for its inputs (empty mask, singular
/// covariance, single-class truth).
class MetricUndefined : public DataError {
 public:
  explicit MetricUndefined(const std::string& what) : DataError("metric undefined: " + what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorCode::numeric, what) {}
};

class ArgumentError : public Error {
 public:
  explicit ArgumentError(const std::string& what) : Error(ErrorCode::argument, what) {}
};

}  // namespace vesselseg
