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

#include "keytune/judge.h"

#include <atomic>
#include <cctype>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "keytune/error.h"
#include "keytune/hashing.h"
#include "keytune/resources.h"

namespace keytune {
namespace {

constexpr std::string_view kTransportErrorReply = "!transport-error";

struct ParsedUrl {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

ParsedUrl SplitUrl(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw UsageError("judge endpoint must be an absolute URL");
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

}  // namespace

void JudgeConfig::Validate() const {
  if (!(timeout_seconds > 0.0)) throw UsageError("judge timeout must be > 0");
  if (max_retries < 0) throw UsageError("judge retries must be >= 0");
  if (max_in_flight < 1) throw UsageError("judge max in-flight requests must be >= 1");
}

std::string RenderJudgePrompt(std::string_view question, std::string_view answer1,
                              std::string_view answer2) {
  if (question.empty() || answer1.empty() || answer2.empty()) {
    throw UsageError("judge prompt fields must be non-empty");
  }
  const std::string_view tpl = resources::JudgePromptV1();
  const std::pair<std::string_view, std::string_view> fields[] = {
      {"{question}", question}, {"{answer1}", answer1}, {"{answer2}", answer2}};
  std::string out;
  out.reserve(tpl.size() + question.size() + answer1.size() + answer2.size());
  std::size_t i = 0;
  while (i < tpl.size()) {
    bool replaced = false;
    if (tpl[i] == '{') {
      for (const auto& [key, value] : fields) {
        if (tpl.substr(i, key.size()) == key) {
          out += value;
          i += key.size();
          replaced = true;
          break;
        }
      }
    }
    if (!replaced) out += tpl[i++];
  }
  return out;
}

std::optional<bool> ParseVerdict(std::string_view reply) {
  std::size_t i = 0;
  while (i < reply.size() && std::isspace(static_cast<unsigned char>(reply[i]))) ++i;
  std::string word;
  while (i < reply.size() && std::isalpha(static_cast<unsigned char>(reply[i]))) {
    word += static_cast<char>(std::tolower(static_cast<unsigned char>(reply[i])));
    ++i;
  }
  if (word == "yes") return true;
  if (word == "no") return false;
  return std::nullopt;
}

std::string ChatRequestBody(const JudgeConfig& config, std::string_view prompt) {
  nlohmann::ordered_json body;
  body["model"] = config.model;
  body["messages"] = nlohmann::json::array({{{"role", "user"}, {"content", std::string(prompt)}}});
  body["temperature"] = config.temperature;
  return body.dump();
}

std::string ChatReplyContent(std::string_view response_body) {
  try {
    const auto j = nlohmann::json::parse(response_body);
    return j.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw TransportError(std::string("malformed chat-completion response: ") + e.what());
  }
}

HttpJudgeTransport::HttpJudgeTransport(const JudgeConfig& config) {
  const char* key = std::getenv(config.api_key_env.c_str());
  if (key == nullptr || *key == '\0') {
    throw JudgeError("missing API key: environment variable " + config.api_key_env + " is unset");
  }
  api_key_ = key;
}

std::string HttpJudgeTransport::Complete(const JudgeConfig& config, const std::string& prompt) {
  const ParsedUrl url = SplitUrl(config.endpoint_url);
  httplib::Client client(url.origin);
  const auto timeout = std::chrono::duration<double>(config.timeout_seconds);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout - secs);
  client.set_connection_timeout(secs.count(), usecs.count());
  client.set_read_timeout(secs.count(), usecs.count());
  client.set_write_timeout(secs.count(), usecs.count());
  httplib::Headers headers = {{"Authorization", "Bearer " + api_key_}};
  auto res = client.Post(url.path, headers, ChatRequestBody(config, prompt), "application/json");
  if (!res) throw TransportError("judge request failed: " + httplib::to_string(res.error()));
  if (res->status != 200) {
    throw TransportError("judge endpoint returned HTTP " + std::to_string(res->status));
  }
  return ChatReplyContent(res->body);
}

FixtureJudgeTransport::FixtureJudgeTransport(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw JudgeError("cannot read judge fixture " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      replies_[j.at("prompt_sha256").get<std::string>()] =
          j.at("replies").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw JudgeError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

FixtureJudgeTransport::FixtureJudgeTransport(std::map<std::string, std::vector<std::string>> replies)
    : replies_(std::move(replies)) {}

std::string FixtureJudgeTransport::Complete(const JudgeConfig&, const std::string& prompt) {
  std::lock_guard<std::mutex> lock(mu_);
  ++calls_;
  std::string key = Sha256Hex(prompt);
  if (!replies_.count(key)) key = "*";
  auto it = replies_.find(key);
  if (it == replies_.end() || it->second.empty()) {
    throw TransportError("no fixture reply for prompt " + Sha256Hex(prompt));
  }
  std::size_t& cursor = cursor_[Sha256Hex(prompt)];
  const std::string& reply = it->second[std::min(cursor, it->second.size() - 1)];
  ++cursor;
  if (reply == kTransportErrorReply) throw TransportError("simulated transport failure");
  return reply;
}

int FixtureJudgeTransport::calls() const {
  std::lock_guard<std::mutex> lock(mu_);
  return calls_;
}

JudgeClient::JudgeClient(JudgeConfig config, std::unique_ptr<JudgeTransport> transport)
    : config_(std::move(config)), transport_(std::move(transport)) {
  config_.Validate();
  if (!transport_) throw UsageError("judge client needs a transport");
}

JudgeVerdict JudgeClient::Judge(std::string_view question, std::string_view answer1,
                                std::string_view answer2) {
  const std::string prompt = RenderJudgePrompt(question, answer1, answer2);
  const auto start = std::chrono::steady_clock::now();
  std::string last_problem;
  std::string last_reply;
  for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
    if (attempt > 0 && config_.initial_backoff_seconds > 0.0) {
      std::this_thread::sleep_for(std::chrono::duration<double>(
          config_.initial_backoff_seconds * static_cast<double>(1 << (attempt - 1))));
    }
    try {
      last_reply = transport_->Complete(config_, prompt);
    } catch (const TransportError& e) {
      last_problem = e.what();
      continue;
    }
    if (const auto same = ParseVerdict(last_reply)) {
      JudgeVerdict v;
      v.same = *same;
      v.raw_reply = last_reply;
      v.attempts = attempt + 1;
      v.latency_seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      return v;
    }
    last_problem = "unparseable verdict: \"" + last_reply + "\"";
  }
  throw JudgeError("judge failed after " + std::to_string(config_.max_retries + 1) +
                   " attempts: " + last_problem);
}

JudgeMatcher::JudgeMatcher(JudgeClient& client, std::filesystem::path audit_log)
    : client_(client), audit_log_(std::move(audit_log)) {}

std::vector<MatchOutcome> JudgeMatcher::MatchAll(std::span<const MatchQuery> queries) {
  struct Slot {
    MatchOutcome outcome;
    std::optional<JudgeVerdict> verdict;
    std::string error;
  };
  std::vector<Slot> slots(queries.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < queries.size(); i = next++) {
      const MatchQuery& q = queries[i];
      Slot& s = slots[i];
      try {
        s.verdict = client_.Judge(q.question, q.predicted, q.gold);
        s.outcome = {s.verdict->same, JudgeSource::kExternalJudge, s.verdict->same};
      } catch (const Error& e) {
        s.error = e.what();
        s.outcome = {LocalMatch(q.predicted, q.gold), JudgeSource::kLocalMatchDowngraded,
                     std::nullopt};
      }
    }
  };
  const int threads =
      static_cast<int>(std::min<std::size_t>(client_.config().max_in_flight, queries.size()));
  std::vector<std::thread> pool;
  for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (std::thread& t : pool) t.join();

  if (!audit_log_.empty()) {
    std::ofstream audit(audit_log_, std::ios::app);
    if (!audit) throw JudgeError("cannot append to audit log " + audit_log_.string());
    for (std::size_t i = 0; i < queries.size(); ++i) {
      const Slot& s = slots[i];
      nlohmann::ordered_json rec;
      rec["index"] = queries[i].index;
      rec["prompt_sha256"] =
          Sha256Hex(RenderJudgePrompt(queries[i].question, queries[i].predicted, queries[i].gold));
      rec["predicted"] = queries[i].predicted;
      rec["gold"] = queries[i].gold;
      rec["source"] = JudgeSourceName(s.outcome.source);
      rec["correct"] = s.outcome.correct;
      if (s.verdict) {
        rec["verdict"] = s.verdict->same ? "yes" : "no";
        rec["raw_reply"] = s.verdict->raw_reply;
        rec["attempts"] = s.verdict->attempts;
        rec["latency_ms"] = s.verdict->latency_seconds * 1e3;
      } else {
        rec["verdict"] = nullptr;
        rec["error"] = s.error;
      }
      audit << rec.dump() << '\n';
    }
  }
  std::vector<MatchOutcome> out;
  out.reserve(slots.size());
  for (const Slot& s : slots) out.push_back(s.outcome);
  return out;
}

}  // namespace keytune
