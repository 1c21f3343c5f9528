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

#ifndef KEYTUNE_CORPUS_H_
#define KEYTUNE_CORPUS_H_

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace keytune {

inline constexpr std::string_view kThinkingOpen = "<Thinking>";
inline constexpr std::string_view kThinkingClose = "</Thinking>";
inline constexpr std::string_view kAnswerOpen = "<Answer>";
inline constexpr std::string_view kAnswerClose = "</Answer>";

// One prompt / reasoning / final-answer triple as it appears in a dataset.
struct RawExample {
  std::string prompt;
  std::string thinking;  // may be empty
  std::string answer;    // non-empty

  bool operator==(const RawExample&) const = default;
};

// Throws DataError if the answer is empty or either response segment
// contains one of the four tag literals.
void ValidateRawExample(const RawExample& example);

using TokenId = std::int32_t;
using TokenIds = std::vector<TokenId>;

// Character-level vocabulary over printable ASCII plus newline, with seven
// atomic special tokens. Special tokens can only be emitted by
// Reconstruct(); Tokenize() always spells "<Answer>" as eight characters.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kThinkingOpenId = 3;
  static constexpr TokenId kThinkingCloseId = 4;
  static constexpr TokenId kAnswerOpenId = 5;
  static constexpr TokenId kAnswerCloseId = 6;
  static constexpr int kSpecialCount = 7;

  Vocabulary();

  // Shared immutable instance.
  static const Vocabulary& Default();

  int size() const { return static_cast<int>(id_to_token_.size()); }

  // Throws DataError naming the offending byte offset for symbols outside
  // the alphabet.
  TokenIds Tokenize(std::string_view text) const;

  // Tags render as their literals; PAD, BOS and EOS render as nothing.
  std::string Detokenize(std::span<const TokenId> ids) const;

  // Display name of a single token ("<eos>", "<Answer>", "a", ...).
  const std::string& TokenName(TokenId id) const;
  std::optional<TokenId> Lookup(std::string_view token_name) const;

  bool IsSpecial(TokenId id) const { return id >= 0 && id < kSpecialCount; }
  bool IsTag(TokenId id) const {
    return id >= kThinkingOpenId && id <= kAnswerCloseId;
  }

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, TokenId> token_to_id_;
  std::array<TokenId, 256> char_to_id_;
};

// Tokenized example with explicit span structure:
//   prompt_ids          = BOS, prompt characters
//   target_ids          = <Thinking> think </Thinking> <Answer> answer </Answer> EOS
//   untagged_target_ids = think answer EOS
// boundary_t indexes the </Thinking> token inside target_ids.
struct TaggedExample {
  TokenIds prompt_ids;
  TokenIds target_ids;
  std::size_t boundary_t = 0;
  TokenIds untagged_target_ids;

  // Number of answer tokens, excluding tags and EOS.
  std::size_t answer_length() const { return target_ids.size() - boundary_t - 4; }
};

TaggedExample Reconstruct(const RawExample& example, const Vocabulary& vocab);

enum class TaskKind { kAddition, kSubtraction, kMultipleChoice };

std::string_view TaskKindName(TaskKind kind);
TaskKind ParseTaskKind(std::string_view name);

struct SyntheticTaskSpec {
  TaskKind kind = TaskKind::kAddition;
  // Operands carry between min_digits and max_digits digits. A one-digit
  // range includes zero.
  int min_digits = 2;
  int max_digits = 2;
  std::size_t train_count = 5000;
  std::size_t eval_count = 500;
  std::uint64_t seed = 7;
};

struct SplitCorpus {
  std::vector<RawExample> train;
  std::vector<RawExample> eval;
};

// Number of distinct prompts the spec can produce.
std::uint64_t CorpusCapacity(const SyntheticTaskSpec& spec);

// Deterministic in spec.seed. Train and eval prompts are disjoint. Throws
// DataError when train_count + eval_count exceeds CorpusCapacity(spec).
SplitCorpus GenerateCorpus(const SyntheticTaskSpec& spec);

// Wraps a bare question in the system instruction and chat framing.
std::string FormatPrompt(std::string_view question);
// Inverse of FormatPrompt; returns the prompt unchanged if not framed.
std::string QuestionFromPrompt(std::string_view prompt);

// JSON-lines dataset I/O with fields "prompt", "thinking", "answer".
std::vector<RawExample> LoadDataset(const std::filesystem::path& path);
void SaveDataset(const std::filesystem::path& path,
                 std::span<const RawExample> examples);

}  // namespace keytune

#endif  // KEYTUNE_CORPUS_H_
