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

#ifndef KEYTUNE_RESOURCES_H_
#define KEYTUNE_RESOURCES_H_

#include <string_view>

// Text resources compiled into the library from resources/*.txt.
namespace keytune::resources {

// System instruction prepended to every training and evaluation prompt.
std::string_view SystemInstructionV1();

// Judge template with {question}, {answer1} and {answer2} placeholders.
std::string_view JudgePromptV1();

}  // namespace keytune::resources

#endif  // KEYTUNE_RESOURCES_H_
