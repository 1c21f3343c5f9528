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

#ifndef KEYTUNE_EVAL_H_
#define KEYTUNE_EVAL_H_

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "keytune/corpus.h"
#include "keytune/model.h"
#include "keytune/training.h"

namespace keytune {

enum class DecodingMode { kGreedy, kSampled };

struct GenerationSettings {
  int max_new_tokens = 128;
  DecodingMode mode = DecodingMode::kGreedy;
  double temperature = 1.0;  // sampled mode only
  std::uint64_t seed = 0;    // sampled mode only

  void Validate() const;
};

// Keys/values for a token prefix shared by many prompts.
struct PrefixCache {
  TokenIds ids;
  std::shared_ptr<const KeyValueCache> cache;
};

PrefixCache BuildPrefixCache(const ModelParams& params, std::span<const TokenId> prefix);

// Autoregressive continuation of `prompt_ids`. Stops after EOS (which is
// included in the output), after max_new_tokens, or when the context is
// full. `prefix`, when given, must be a proper prefix of the prompt.
// Throws EvaluationError if the prompt leaves no room for a new token.
TokenIds Generate(const ModelParams& params, std::span<const TokenId> prompt_ids,
                  const GenerationSettings& settings, const PrefixCache* prefix = nullptr);

// True iff the text is exactly
//   <Thinking>A</Thinking><Answer>B</Answer>
// optionally followed by whitespace or "<eos>" markers, where A and B
// contain no tag literal.
bool CheckFormat(std::string_view text);

// Trimmed content of the first <Answer>...</Answer> span; absent when the
// span is missing or empty. Text with no tag literal at all falls back to
// its last non-empty line.
std::optional<std::string> ExtractAnswer(std::string_view text);

// Equality after trimming, collapsing whitespace runs, ASCII case folding
// and stripping leading zeros from integer numerals.
bool LocalMatch(std::string_view predicted, std::string_view gold);
std::string NormalizeAnswer(std::string_view text);

enum class JudgeSource { kLocalMatch, kExternalJudge, kLocalMatchDowngraded };
std::string_view JudgeSourceName(JudgeSource source);

struct Judgment {
  std::size_t index = 0;
  std::string output_text;
  std::optional<std::string> predicted;
  std::string gold;
  bool correct = false;
  bool format_ok = false;
  JudgeSource source = JudgeSource::kLocalMatch;
  bool local_correct = false;
  std::optional<bool> judge_same;
  std::string error;
};

struct MatchQuery {
  std::size_t index = 0;
  std::string question;
  std::string predicted;
  std::string gold;
};

struct MatchOutcome {
  bool correct = false;
  JudgeSource source = JudgeSource::kLocalMatch;
  std::optional<bool> judge_same;
};

class AnswerMatcher {
 public:
  virtual ~AnswerMatcher() = default;
  virtual std::string_view name() const = 0;
  // One outcome per query, in query order.
  virtual std::vector<MatchOutcome> MatchAll(std::span<const MatchQuery> queries) = 0;
};

class LocalMatcher : public AnswerMatcher {
 public:
  std::string_view name() const override { return "local"; }
  std::vector<MatchOutcome> MatchAll(std::span<const MatchQuery> queries) override;
};

struct EvalOptions {
  double alpha = 0.7;
  TargetForm form = TargetForm::kTagged;  // targets used for the answer-level NLL
  int nll_batch_size = 32;
};

struct EvalReport {
  std::size_t n = 0;
  double acc = 0.0;
  double fmt = 0.0;
  double alpha = 0.7;
  double score = 0.0;
  // Teacher-forced mean answer-span NLL over the examples that fit the
  // context; NaN (null in JSON) if none do.
  double answer_nll = 0.0;
  std::string matcher;
  std::vector<Judgment> judgments;
};

double CompositeScore(double acc, double fmt, double alpha);

// 100 * (score - baseline) / baseline. Throws UsageError unless baseline > 0.
double RelativeImprovement(double score, double baseline);
// Two decimals with explicit sign, e.g. "+10.05%".
std::string FormatImprovement(double percent);

EvalReport Evaluate(const ModelParams& params, std::span<const RawExample> eval_set,
                    const Vocabulary& vocab, const GenerationSettings& settings,
                    const EvalOptions& options, AnswerMatcher& matcher);

// Aggregates as JSON (no per-example data, no timings) and per-example
// judgments as CSV.
std::string ReportJson(const EvalReport& report);
void WriteReportJson(const std::filesystem::path& path, const EvalReport& report);
void WriteJudgmentsCsv(const std::filesystem::path& path, const EvalReport& report);
// Aggregates only; judgments are left empty.
EvalReport ReadReportJson(const std::filesystem::path& path);

}  // namespace keytune

#endif  // KEYTUNE_EVAL_H_
