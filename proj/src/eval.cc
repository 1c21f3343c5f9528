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

#include "keytune/eval.h"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include "json.hpp"
#include "keytune/error.h"

namespace keytune {
namespace {

constexpr std::string_view kEosMarker = "<eos>";
constexpr std::string_view kWhitespace = " \t\r\n";

bool ContainsTag(std::string_view s) {
  for (std::string_view tag : {kThinkingOpen, kThinkingClose, kAnswerOpen, kAnswerClose}) {
    if (s.find(tag) != std::string_view::npos) return true;
  }
  return false;
}

std::string_view Trim(std::string_view s) {
  const auto begin = s.find_first_not_of(kWhitespace);
  if (begin == std::string_view::npos) return {};
  const auto end = s.find_last_not_of(kWhitespace);
  return s.substr(begin, end - begin + 1);
}

TokenId PickToken(const Matrix& logits_row, const GenerationSettings& settings,
                  std::mt19937_64& rng) {
  Eigen::Index best = 0;
  if (settings.mode == DecodingMode::kGreedy) {
    logits_row.row(0).maxCoeff(&best);
    return static_cast<TokenId>(best);
  }
  const Eigen::RowVectorXd scaled = logits_row.row(0) / settings.temperature;
  const double mx = scaled.maxCoeff();
  const Eigen::RowVectorXd w = (scaled.array() - mx).exp();
  std::discrete_distribution<int> pick(w.data(), w.data() + w.size());
  return static_cast<TokenId>(pick(rng));
}

std::string CsvField(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

std::size_t CommonPrefix(const TokenIds& a, const TokenIds& b) {
  std::size_t i = 0;
  while (i < a.size() && i < b.size() && a[i] == b[i]) ++i;
  return i;
}

}  // namespace

void GenerationSettings::Validate() const {
  if (max_new_tokens < 1) throw UsageError("max new tokens must be >= 1");
  if (mode == DecodingMode::kSampled && !(temperature > 0.0)) {
    throw UsageError("sampling temperature must be > 0");
  }
}

PrefixCache BuildPrefixCache(const ModelParams& params, std::span<const TokenId> prefix) {
  PrefixCache out;
  out.ids.assign(prefix.begin(), prefix.end());
  if (!prefix.empty()) out.cache = ExtendCache(Forward(params, prefix, nullptr, false));
  return out;
}

TokenIds Generate(const ModelParams& params, std::span<const TokenId> prompt_ids,
                  const GenerationSettings& settings, const PrefixCache* prefix) {
  settings.Validate();
  const int max_len = params.config.max_seq_len;
  if (prompt_ids.empty()) throw EvaluationError("empty prompt");
  if (static_cast<int>(prompt_ids.size()) >= max_len) {
    throw EvaluationError("prompt of " + std::to_string(prompt_ids.size()) +
                          " tokens leaves no room in a context of " + std::to_string(max_len));
  }
  std::shared_ptr<const KeyValueCache> cache;
  std::size_t skip = 0;
  if (prefix && prefix->cache) {
    if (prefix->ids.size() >= prompt_ids.size() ||
        !std::equal(prefix->ids.begin(), prefix->ids.end(), prompt_ids.begin())) {
      throw UsageError("prefix cache is not a proper prefix of the prompt");
    }
    cache = prefix->cache;
    skip = prefix->ids.size();
  }
  std::mt19937_64 rng(settings.seed);
  ForwardTrace trace = Forward(params, prompt_ids.subspan(skip), cache);
  TokenIds out;
  for (int i = 0; i < settings.max_new_tokens; ++i) {
    const TokenId next = PickToken(trace.logits.bottomRows(1), settings, rng);
    out.push_back(next);
    if (next == Vocabulary::kEos) break;
    if (i + 1 == settings.max_new_tokens) break;
    // Prompt and continuation together never exceed the context.
    if (prompt_ids.size() + out.size() >= static_cast<std::size_t>(max_len)) break;
    cache = ExtendCache(trace);
    const TokenId step[1] = {next};
    trace = Forward(params, step, cache);
  }
  return out;
}

bool CheckFormat(std::string_view text) {
  // Strip trailing whitespace and end-of-sequence markers.
  for (;;) {
    const auto end = text.find_last_not_of(kWhitespace);
    text = end == std::string_view::npos ? std::string_view{} : text.substr(0, end + 1);
    if (!text.ends_with(kEosMarker)) break;
    text.remove_suffix(kEosMarker.size());
  }
  if (!text.starts_with(kThinkingOpen)) return false;
  text.remove_prefix(kThinkingOpen.size());

  const auto close_think = text.find(kThinkingClose);
  if (close_think == std::string_view::npos || ContainsTag(text.substr(0, close_think))) {
    return false;
  }
  text.remove_prefix(close_think + kThinkingClose.size());
  if (!text.starts_with(kAnswerOpen)) return false;
  text.remove_prefix(kAnswerOpen.size());

  const auto close_answer = text.find(kAnswerClose);
  if (close_answer == std::string_view::npos || ContainsTag(text.substr(0, close_answer))) {
    return false;
  }
  return close_answer + kAnswerClose.size() == text.size();
}

std::optional<std::string> ExtractAnswer(std::string_view text) {
  if (!ContainsTag(text)) {
    std::optional<std::string> last;
    std::size_t start = 0;
    while (start <= text.size()) {
      auto nl = text.find('\n', start);
      if (nl == std::string_view::npos) nl = text.size();
      const std::string_view line = Trim(text.substr(start, nl - start));
      if (!line.empty()) last = std::string(line);
      start = nl + 1;
    }
    return last;
  }
  const auto open = text.find(kAnswerOpen);
  if (open == std::string_view::npos) return std::nullopt;
  const auto body = open + kAnswerOpen.size();
  const auto close = text.find(kAnswerClose, body);
  if (close == std::string_view::npos) return std::nullopt;
  const std::string_view answer = Trim(text.substr(body, close - body));
  if (answer.empty()) return std::nullopt;
  return std::string(answer);
}

std::string NormalizeAnswer(std::string_view text) {
  std::string collapsed;
  bool pending_space = false;
  for (char c : Trim(text)) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending_space = true;
      continue;
    }
    if (pending_space) collapsed += ' ';
    pending_space = false;
    collapsed += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  // Integer numerals: optional sign, then digits.
  std::size_t digits_from = (!collapsed.empty() && (collapsed[0] == '-' || collapsed[0] == '+')) ? 1 : 0;
  const bool numeral = collapsed.size() > digits_from &&
                       std::all_of(collapsed.begin() + digits_from, collapsed.end(),
                                   [](char c) { return std::isdigit(static_cast<unsigned char>(c)); });
  if (numeral) {
    std::size_t first = collapsed.find_first_not_of('0', digits_from);
    if (first == std::string::npos) first = collapsed.size() - 1;
    collapsed = collapsed.substr(0, digits_from) + collapsed.substr(first);
  }
  return collapsed;
}

bool LocalMatch(std::string_view predicted, std::string_view gold) {
  return NormalizeAnswer(predicted) == NormalizeAnswer(gold);
}

std::string_view JudgeSourceName(JudgeSource source) {
  switch (source) {
    case JudgeSource::kLocalMatch: return "local-match";
    case JudgeSource::kExternalJudge: return "external-judge";
    case JudgeSource::kLocalMatchDowngraded: return "local-match-downgraded";
  }
  return "unknown";
}

std::vector<MatchOutcome> LocalMatcher::MatchAll(std::span<const MatchQuery> queries) {
  std::vector<MatchOutcome> out;
  out.reserve(queries.size());
  for (const MatchQuery& q : queries) {
    out.push_back({LocalMatch(q.predicted, q.gold), JudgeSource::kLocalMatch, std::nullopt});
  }
  return out;
}

double CompositeScore(double acc, double fmt, double alpha) {
  return alpha * acc + (1.0 - alpha) * fmt;
}

double RelativeImprovement(double score, double baseline) {
  if (!(baseline > 0.0)) throw UsageError("relative improvement needs a positive baseline");
  return 100.0 * (score - baseline) / baseline;
}

std::string FormatImprovement(double percent) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%+.2f%%", percent);
  return buf;
}

EvalReport Evaluate(const ModelParams& params, std::span<const RawExample> eval_set,
                    const Vocabulary& vocab, const GenerationSettings& settings,
                    const EvalOptions& options, AnswerMatcher& matcher) {
  if (eval_set.empty()) throw EvaluationError("evaluation set is empty");
  if (!(options.alpha >= 0.0 && options.alpha <= 1.0)) {
    throw UsageError("alpha must lie in [0, 1]");
  }
  settings.Validate();

  std::vector<TaggedExample> tagged;
  tagged.reserve(eval_set.size());
  for (const RawExample& ex : eval_set) tagged.push_back(Reconstruct(ex, vocab));

  // Prompts share the system instruction; run it once.
  std::size_t shared = tagged[0].prompt_ids.size() - 1;
  for (const TaggedExample& t : tagged) {
    shared = std::min({shared, CommonPrefix(tagged[0].prompt_ids, t.prompt_ids),
                       t.prompt_ids.size() - 1});
  }
  const PrefixCache prefix = BuildPrefixCache(
      params, std::span<const TokenId>(tagged[0].prompt_ids).first(shared));

  EvalReport report;
  report.n = eval_set.size();
  report.alpha = options.alpha;
  report.matcher = std::string(matcher.name());
  report.judgments.resize(report.n);
  std::vector<MatchQuery> queries;
  for (std::size_t i = 0; i < report.n; ++i) {
    Judgment& j = report.judgments[i];
    j.index = i;
    j.gold = eval_set[i].answer;
    try {
      GenerationSettings per_example = settings;
      per_example.seed = settings.seed + i;
      const TokenIds out = Generate(params, tagged[i].prompt_ids, per_example,
                                    shared > 0 ? &prefix : nullptr);
      j.output_text = vocab.Detokenize(out);
      j.format_ok = CheckFormat(j.output_text);
      j.predicted = ExtractAnswer(j.output_text);
    } catch (const Error& e) {
      j.error = e.what();
      j.format_ok = false;
      j.predicted.reset();
    }
    if (j.predicted) {
      j.local_correct = LocalMatch(*j.predicted, j.gold);
      queries.push_back({i, QuestionFromPrompt(eval_set[i].prompt), *j.predicted, j.gold});
    }
  }

  const std::vector<MatchOutcome> outcomes = matcher.MatchAll(queries);
  if (outcomes.size() != queries.size()) {
    throw EvaluationError("matcher returned the wrong number of outcomes");
  }
  for (std::size_t q = 0; q < queries.size(); ++q) {
    Judgment& j = report.judgments[queries[q].index];
    j.correct = outcomes[q].correct;
    j.source = outcomes[q].source;
    j.judge_same = outcomes[q].judge_same;
  }

  std::size_t correct = 0, formatted = 0;
  for (const Judgment& j : report.judgments) {
    correct += j.correct ? 1 : 0;
    formatted += j.format_ok ? 1 : 0;
  }
  report.acc = static_cast<double>(correct) / static_cast<double>(report.n);
  report.fmt = static_cast<double>(formatted) / static_cast<double>(report.n);
  report.score = CompositeScore(report.acc, report.fmt, report.alpha);
  // Teacher-forced answer NLL over the examples whose full sequence fits.
  std::vector<TaggedExample> scored;
  for (const TaggedExample& t : tagged) {
    if (t.prompt_ids.size() + Targets(t, options.form).size() <=
        static_cast<std::size_t>(params.config.max_seq_len)) {
      scored.push_back(t);
    }
  }
  report.answer_nll = scored.empty()
                          ? std::numeric_limits<double>::quiet_NaN()
                          : MeanAnswerNll(params, scored, options.form, options.nll_batch_size);
  return report;
}

std::string ReportJson(const EvalReport& report) {
  std::size_t correct = 0, formatted = 0;
  for (const Judgment& j : report.judgments) {
    correct += j.correct ? 1 : 0;
    formatted += j.format_ok ? 1 : 0;
  }
  nlohmann::ordered_json j;
  j["n"] = report.n;
  j["correct"] = correct;
  j["format_ok"] = formatted;
  j["acc"] = report.acc;
  j["fmt"] = report.fmt;
  j["alpha"] = report.alpha;
  j["score"] = report.score;
  j["answer_nll"] = report.answer_nll;
  j["matcher"] = report.matcher;
  return j.dump(2) + "\n";
}

void WriteReportJson(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw EvaluationError("cannot write " + path.string());
  out << ReportJson(report);
}

void WriteJudgmentsCsv(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw EvaluationError("cannot write " + path.string());
  out << "index,correct,format_ok,source,local_correct,judge_same,predicted,gold,error,output\n";
  for (const Judgment& j : report.judgments) {
    out << j.index << ',' << (j.correct ? 1 : 0) << ',' << (j.format_ok ? 1 : 0) << ','
        << JudgeSourceName(j.source) << ',' << (j.local_correct ? 1 : 0) << ','
        << (j.judge_same ? (*j.judge_same ? "1" : "0") : "") << ','
        << CsvField(j.predicted.value_or("")) << ',' << CsvField(j.gold) << ','
        << CsvField(j.error) << ',' << CsvField(j.output_text) << '\n';
  }
}

EvalReport ReadReportJson(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw EvaluationError("cannot read " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
    EvalReport r;
    r.n = j.at("n").get<std::size_t>();
    r.acc = j.at("acc").get<double>();
    r.fmt = j.at("fmt").get<double>();
    r.alpha = j.at("alpha").get<double>();
    r.score = j.at("score").get<double>();
    const auto& nll = j.at("answer_nll");
    r.answer_nll = nll.is_null() ? std::numeric_limits<double>::quiet_NaN() : nll.get<double>();
    r.matcher = j.at("matcher").get<std::string>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw EvaluationError("malformed report " + path.string() + ": " + e.what());
  }
}

}  // namespace keytune
