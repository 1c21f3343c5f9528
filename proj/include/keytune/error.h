// Copyright 2026 The keytune Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef KEYTUNE_ERROR_H_
#define KEYTUNE_ERROR_H_

#include <stdexcept>
#include <string>

namespace keytune {

// Error categories. The numeric values double as process exit codes.
enum class ErrorKind {
  kUsage = 1,
  kData = 2,
  kDivergence = 3,
  kEvaluation = 4,
  kJudge = 5,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const { return kind_; }
  int exit_code() const { return static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
};

inline Error UsageError(const std::string& m) { return Error(ErrorKind::kUsage, m); }
inline Error DataError(const std::string& m) { return Error(ErrorKind::kData, m); }
inline Error DivergenceError(const std::string& m) {
  return Error(ErrorKind::kDivergence, m);
}
inline Error EvaluationError(const std::string& m) {
  return Error(ErrorKind::kEvaluation, m);
}
inline Error JudgeError(const std::string& m) { return Error(ErrorKind::kJudge, m); }

}  // namespace keytune

#endif  // KEYTUNE_ERROR_H_
