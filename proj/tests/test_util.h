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


// Small fixtures shared by the unit tests.

#ifndef KEYTUNE_TESTS_TEST_UTIL_H_
#define KEYTUNE_TESTS_TEST_UTIL_H_

#include <filesystem>
#include <random>
#include <string>

#include "keytune/corpus.h"
#include "keytune/model.h"

namespace keytune::testing {

inline ModelConfig TinyConfig(int n_layers = 2, int d_model = 16, int n_heads = 2) {
  ModelConfig c;
  c.n_layers = n_layers;
  c.d_model = d_model;
  c.n_heads = n_heads;
  c.d_ff = 4 * d_model;
  c.vocab_size = Vocabulary::Default().size();
  c.max_seq_len = 128;
  c.init_seed = 3;
  return c;
}

inline TaggedExample SmallExample(std::string prompt = "What is 2+3?", std::string thinking = "2+3=5",
                                  std::string answer = "5") {
  return Reconstruct({std::move(prompt), std::move(thinking), std::move(answer)},
                     Vocabulary::Default());
}

// Moves the last prompt token to the front of the targets and sets the
// boundary on it, so that the answer-only mask covers the original
// response exactly while every prediction sees the same context.
inline TaggedExample ShiftBoundaryToResponseStart(const TaggedExample& ex) {
  TaggedExample out = ex;
  out.target_ids.insert(out.target_ids.begin(), out.prompt_ids.back());
  out.prompt_ids.pop_back();
  out.boundary_t = 0;
  return out;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("keytune_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace keytune::testing

#endif  // KEYTUNE_TESTS_TEST_UTIL_H_
