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

#ifndef KEYTUNE_JUDGE_H_
#define KEYTUNE_JUDGE_H_

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "keytune/error.h"
#include "keytune/eval.h"

namespace keytune {

struct JudgeConfig {
  std::string endpoint_url;  // e.g. https://host/v1/chat/completions
  std::string model;
  std::string api_key_env = "KEYTUNE_JUDGE_API_KEY";
  double timeout_seconds = 30.0;
  int max_retries = 3;
  double temperature = 0.0;
  int max_in_flight = 4;
  double initial_backoff_seconds = 0.5;

  void Validate() const;
};

// The semantic-equivalence judging template with the three fields
// substituted in a single pass. Throws UsageError if any field is empty.
std::string RenderJudgePrompt(std::string_view question, std::string_view answer1,
                              std::string_view answer2);

// Leading alphabetic word of the reply, case-insensitive: "yes" -> true,
// "no" -> false, anything else -> nullopt.
std::optional<bool> ParseVerdict(std::string_view reply);

// Request body for a single-turn chat completion.
std::string ChatRequestBody(const JudgeConfig& config, std::string_view prompt);
// Content of choices[0].message.content. Throws JudgeError if absent.
std::string ChatReplyContent(std::string_view response_body);

// Raised by transports for failures worth retrying.
class TransportError : public Error {
 public:
  explicit TransportError(const std::string& m) : Error(ErrorKind::kJudge, m) {}
};

class JudgeTransport {
 public:
  virtual ~JudgeTransport() = default;
  // Returns the assistant reply text for `prompt`.
  virtual std::string Complete(const JudgeConfig& config, const std::string& prompt) = 0;
};

// Chat-completion endpoint over HTTP(S). The API key is read from the
// configured environment variable at construction; a missing key throws
// JudgeError.
class HttpJudgeTransport : public JudgeTransport {
 public:
  explicit HttpJudgeTransport(const JudgeConfig& config);
  std::string Complete(const JudgeConfig& config, const std::string& prompt) override;

 private:
  std::string api_key_;
};

// Canned replies for offline runs. The fixture file holds one JSON object
// per line: {"prompt_sha256": "<hex>" | "*", "replies": ["...", ...]}.
// Successive calls for a prompt consume its replies in order, repeating the
// last one; "*" applies to prompts without their own entry. The reply
// "!transport-error" simulates a network failure.
class FixtureJudgeTransport : public JudgeTransport {
 public:
  explicit FixtureJudgeTransport(const std::filesystem::path& path);
  explicit FixtureJudgeTransport(std::map<std::string, std::vector<std::string>> replies);
  std::string Complete(const JudgeConfig& config, const std::string& prompt) override;
  int calls() const;

 private:
  mutable std::mutex mu_;
  std::map<std::string, std::vector<std::string>> replies_;
  std::map<std::string, std::size_t> cursor_;
  int calls_ = 0;
};

struct JudgeVerdict {
  bool same = false;
  std::string raw_reply;
  double latency_seconds = 0.0;
  int attempts = 0;
};

// Retries transport failures and unparseable replies with exponential
// backoff, up to max_retries extra attempts; then throws JudgeError.
class JudgeClient {
 public:
  JudgeClient(JudgeConfig config, std::unique_ptr<JudgeTransport> transport);
  JudgeVerdict Judge(std::string_view question, std::string_view answer1,
                     std::string_view answer2);
  const JudgeConfig& config() const { return config_; }

 private:
  JudgeConfig config_;
  std::unique_ptr<JudgeTransport> transport_;
};

// Matcher that asks the judge whether the model output (Response 1) and the
// gold answer (Response 2) agree. Failed judgments fall back to LocalMatch
// and are marked kLocalMatchDowngraded. Every request is appended to the
// audit log (JSON lines) in query order.
class JudgeMatcher : public AnswerMatcher {
 public:
  JudgeMatcher(JudgeClient& client, std::filesystem::path audit_log);
  std::string_view name() const override { return "judge"; }
  std::vector<MatchOutcome> MatchAll(std::span<const MatchQuery> queries) override;

 private:
  JudgeClient& client_;
  std::filesystem::path audit_log_;
};

}  // namespace keytune

#endif  // KEYTUNE_JUDGE_H_
