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


#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <gtest/gtest.h>

#include "json.hpp"
#include "keytune/error.h"
#include "keytune/eval.h"
#include "keytune/training.h"
#include "test_util.h"

namespace keytune {
namespace {

using testing::TinyConfig;

const std::vector<RawExample>& Memorized() {
  static const std::vector<RawExample> ex = {
      {"What is 27+38?", "7+8=15 write 5 carry 1.\n2+3+1=6 write 6.\n", "65"},
      {"What is 41+12?", "1+2=3 write 3.\n4+1=5 write 5.\n", "53"}};
  return ex;
}

// Trained once per strategy; two examples, overfit.
const ModelParams& MemorizedModel(Strategy strategy) {
  static std::map<Strategy, ModelParams> cache;
  auto it = cache.find(strategy);
  if (it == cache.end()) {
    std::vector<TaggedExample> data;
    for (const RawExample& r : Memorized()) data.push_back(Reconstruct(r, Vocabulary::Default()));
    Hyperparams h;
    h.learning_rate = 3e-3;
    h.epochs = 300;
    h.batch_size = 2;
    h.weight_decay = 0.0;
    it = cache.emplace(strategy, RunStrategy({strategy, h, h}, data, TinyConfig(2, 32, 2)).params)
             .first;
  }
  return it->second;
}

struct FormatCase {
  std::string text;
  bool valid;
  std::string name;
};

std::vector<FormatCase> LoadFormatCases() {
  std::ifstream in(std::string(KEYTUNE_TEST_DATA_DIR) + "/format_cases.jsonl");
  std::vector<FormatCase> out;
  std::string line;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    out.push_back({j.at("text"), j.at("valid"), j.at("case")});
  }
  return out;
}

TEST(CheckFormat, Examples) {
  EXPECT_TRUE(CheckFormat("<Thinking>x</Thinking><Answer>y</Answer>"));
  EXPECT_FALSE(CheckFormat("y"));
  EXPECT_FALSE(CheckFormat("<Answer>y</Answer><Thinking>x</Thinking>"));
}

TEST(CheckFormat, FixtureSuite) {
  const auto cases = LoadFormatCases();
  ASSERT_GE(cases.size(), 30u);
  for (const FormatCase& c : cases) EXPECT_EQ(CheckFormat(c.text), c.valid) << c.name;
}

TEST(ExtractAnswer, Examples) {
  EXPECT_EQ(ExtractAnswer("<Thinking>work</Thinking><Answer> 42 </Answer>"), "42");
  EXPECT_EQ(ExtractAnswer("no tags here"), "no tags here");
  EXPECT_EQ(ExtractAnswer("<Answer></Answer>"), std::nullopt);
  EXPECT_EQ(ExtractAnswer("<Answer>  </Answer>"), std::nullopt);
  EXPECT_EQ(ExtractAnswer("steps\n2+3=5\n\n5\n  \n"), "5");
  EXPECT_EQ(ExtractAnswer("<Thinking>x</Thinking>"), std::nullopt);
  EXPECT_EQ(ExtractAnswer("<Answer>7"), std::nullopt);
  EXPECT_EQ(ExtractAnswer("<Answer>1</Answer><Answer>2</Answer>"), "1");
  EXPECT_EQ(ExtractAnswer(""), std::nullopt);
}

TEST(LocalMatch, Examples) {
  EXPECT_TRUE(LocalMatch("007", "7"));
  EXPECT_TRUE(LocalMatch("B", "b"));
  EXPECT_FALSE(LocalMatch("13", "31"));
  EXPECT_TRUE(LocalMatch("  the   answer ", "The Answer"));
  EXPECT_TRUE(LocalMatch("-007", "-7"));
  EXPECT_TRUE(LocalMatch("0", "000"));
  EXPECT_FALSE(LocalMatch("0.50", "0.5"));
  EXPECT_FALSE(LocalMatch("", "1"));
  EXPECT_EQ(NormalizeAnswer(" 0042 "), "42");
}

TEST(Score, PaperValues) {
  auto four = [](double x) { return std::round(x * 1e4) / 1e4; };
  EXPECT_EQ(four(CompositeScore(0.8309, 1.0000, 0.7)), 0.8816);
  EXPECT_EQ(four(CompositeScore(0.7589, 0.9977, 0.7)), 0.8305);
  EXPECT_EQ(CompositeScore(1.0, 1.0, 0.7), 1.0);
  EXPECT_EQ(CompositeScore(0.0, 0.0, 0.7), 0.0);
  EXPECT_EQ(CompositeScore(0.25, 0.75, 1.0), 0.25);
  EXPECT_EQ(CompositeScore(0.25, 0.75, 0.0), 0.75);
}

TEST(RelativeImprovement, PaperValues) {
  EXPECT_EQ(FormatImprovement(RelativeImprovement(0.8441, 0.7670)), "+10.05%");
  EXPECT_NEAR(RelativeImprovement(0.8048, 0.7586), 6.07, 0.05);
  EXPECT_EQ(FormatImprovement(RelativeImprovement(0.6, 0.6)), "+0.00%");
  EXPECT_EQ(FormatImprovement(RelativeImprovement(0.5, 1.0)), "-50.00%");
  EXPECT_THROW(RelativeImprovement(0.5, 0.0), Error);
}

TEST(Generate, MaxNewTokensAndDeterminism) {
  const ModelParams p = InitParams(TinyConfig());
  const TokenIds prompt = {Vocabulary::kBos, 20, 21};
  GenerationSettings s;
  s.max_new_tokens = 1;
  EXPECT_EQ(Generate(p, prompt, s).size(), 1u);
  s.max_new_tokens = 20;
  const TokenIds a = Generate(p, prompt, s);
  EXPECT_EQ(a, Generate(p, prompt, s));
  EXPECT_LE(a.size(), 20u);
  s.mode = DecodingMode::kSampled;
  s.seed = 4;
  EXPECT_EQ(Generate(p, prompt, s), Generate(p, prompt, s));
}

TEST(Generate, PromptTooLong) {
  const ModelParams p = InitParams(TinyConfig());
  const TokenIds prompt(p.config.max_seq_len, 20);
  try {
    Generate(p, prompt, GenerationSettings{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kEvaluation);
  }
}

TEST(Generate, StopsAtContextEnd) {
  ModelConfig c = TinyConfig();
  c.max_seq_len = 10;
  const ModelParams p = InitParams(c);
  GenerationSettings s;
  s.max_new_tokens = 50;
  const TokenIds out = Generate(p, TokenIds{1, 20, 21, 22}, s);
  EXPECT_EQ(out.size(), 6u);
}

TEST(Generate, PrefixCacheGivesSameOutput) {
  const ModelParams& p = MemorizedModel(Strategy::kSftTag);
  const TaggedExample ex = Reconstruct(Memorized()[0], Vocabulary::Default());
  const PrefixCache prefix =
      BuildPrefixCache(p, std::span<const TokenId>(ex.prompt_ids).first(5));
  GenerationSettings s;
  EXPECT_EQ(Generate(p, ex.prompt_ids, s, &prefix), Generate(p, ex.prompt_ids, s));
  const PrefixCache whole = BuildPrefixCache(p, ex.prompt_ids);
  EXPECT_THROW(Generate(p, ex.prompt_ids, s, &whole), Error);
}

TEST(Generate, MemorizedModelReproducesTarget) {
  const ModelParams& p = MemorizedModel(Strategy::kSftTag);
  for (const RawExample& r : Memorized()) {
    const TaggedExample ex = Reconstruct(r, Vocabulary::Default());
    EXPECT_EQ(Generate(p, ex.prompt_ids, GenerationSettings{}), ex.target_ids);
  }
}

class CountingMatcher : public AnswerMatcher {
 public:
  std::string_view name() const override { return "counting"; }
  std::vector<MatchOutcome> MatchAll(std::span<const MatchQuery> queries) override {
    seen.assign(queries.begin(), queries.end());
    return LocalMatcher().MatchAll(queries);
  }
  std::vector<MatchQuery> seen;
};

TEST(Evaluate, MemorizedTaggedModel) {
  LocalMatcher matcher;
  const EvalReport r = Evaluate(MemorizedModel(Strategy::kSftTag), Memorized(),
                                Vocabulary::Default(), GenerationSettings{}, EvalOptions{},
                                matcher);
  EXPECT_EQ(r.n, 2u);
  EXPECT_EQ(r.acc, 1.0);
  EXPECT_EQ(r.fmt, 1.0);
  EXPECT_EQ(r.score, 1.0);
  EXPECT_LT(r.answer_nll, 0.05);
  EXPECT_EQ(r.matcher, "local");
  ASSERT_EQ(r.judgments.size(), 2u);
  EXPECT_EQ(r.judgments[1].predicted, "53");
  EXPECT_EQ(r.judgments[1].gold, "53");
  EXPECT_EQ(r.judgments[1].source, JudgeSource::kLocalMatch);
}

TEST(Evaluate, UntaggedOutputsUseLastLine) {
  LocalMatcher matcher;
  EvalOptions o;
  o.form = TargetForm::kUntagged;
  const EvalReport r = Evaluate(MemorizedModel(Strategy::kSft), Memorized(), Vocabulary::Default(),
                                GenerationSettings{}, o, matcher);
  EXPECT_EQ(r.acc, 1.0);
  EXPECT_EQ(r.fmt, 0.0);
  EXPECT_NEAR(r.score, 0.7, 1e-15);
}

TEST(Evaluate, AlphaAndAggregation) {
  const ModelParams p = InitParams(TinyConfig());
  SyntheticTaskSpec spec;
  spec.train_count = 1;
  spec.eval_count = 6;
  std::vector<RawExample> eval;
  for (const auto& r : GenerateCorpus(spec).eval) eval.push_back({QuestionFromPrompt(r.prompt), r.thinking, r.answer});
  eval.push_back(Memorized()[0]);
  GenerationSettings s;
  s.max_new_tokens = 24;
  for (double alpha : {0.0, 0.7, 1.0}) {
    CountingMatcher matcher;
    EvalOptions o;
    o.alpha = alpha;
    const EvalReport r = Evaluate(p, eval, Vocabulary::Default(), s, o, matcher);
    std::size_t correct = 0, formatted = 0, predicted = 0;
    for (const Judgment& j : r.judgments) {
      correct += j.correct;
      formatted += j.format_ok;
      predicted += j.predicted.has_value();
    }
    EXPECT_EQ(r.acc, static_cast<double>(correct) / 7.0);
    EXPECT_EQ(r.fmt, static_cast<double>(formatted) / 7.0);
    EXPECT_EQ(r.score, CompositeScore(r.acc, r.fmt, alpha));
    EXPECT_EQ(matcher.seen.size(), predicted);
    EXPECT_GT(r.answer_nll, 0.0);
  }
}

TEST(Evaluate, ErrorsAreRecordedPerExample) {
  ModelConfig c = TinyConfig();
  c.max_seq_len = 40;
  const ModelParams p = InitParams(c);
  const std::vector<RawExample> eval = {
      {"short", "a", "1"}, {std::string(60, 'x'), "a", "1"}};
  LocalMatcher matcher;
  GenerationSettings s;
  s.max_new_tokens = 4;
  const EvalReport r = Evaluate(p, eval, Vocabulary::Default(), s, EvalOptions{}, matcher);
  ASSERT_EQ(r.judgments.size(), 2u);
  EXPECT_TRUE(r.judgments[0].error.empty());
  EXPECT_FALSE(r.judgments[1].error.empty());
  EXPECT_FALSE(r.judgments[1].correct);
  EXPECT_FALSE(r.judgments[1].format_ok);
}

TEST(Evaluate, RejectsBadInput) {
  const ModelParams p = InitParams(TinyConfig());
  LocalMatcher matcher;
  EXPECT_THROW(Evaluate(p, {}, Vocabulary::Default(), GenerationSettings{}, EvalOptions{}, matcher),
               Error);
  EvalOptions o;
  o.alpha = 1.5;
  EXPECT_THROW(Evaluate(p, Memorized(), Vocabulary::Default(), GenerationSettings{}, o, matcher),
               Error);
}

TEST(Report, JsonAndCsv) {
  EvalReport r;
  r.n = 2;
  r.acc = 0.5;
  r.fmt = 1.0;
  r.alpha = 0.7;
  r.score = CompositeScore(0.5, 1.0, 0.7);
  r.answer_nll = 0.25;
  r.matcher = "local";
  Judgment a;
  a.index = 0;
  a.output_text = "<Thinking>x, \"y\"</Thinking><Answer>1</Answer>";
  a.predicted = "1";
  a.gold = "1";
  a.correct = a.format_ok = a.local_correct = true;
  Judgment b = a;
  b.index = 1;
  b.gold = "2";
  b.correct = b.local_correct = false;
  r.judgments = {a, b};

  const auto j = nlohmann::json::parse(ReportJson(r));
  EXPECT_EQ(j.at("n"), 2);
  EXPECT_EQ(j.at("acc"), 0.5);
  EXPECT_EQ(j.at("score"), r.score);
  EXPECT_FALSE(j.contains("judgments"));
  EXPECT_EQ(ReportJson(r), ReportJson(r));

  testing::TempDir dir("report");
  WriteReportJson(dir.path() / "r.json", r);
  const EvalReport back = ReadReportJson(dir.path() / "r.json");
  EXPECT_EQ(back.acc, r.acc);
  EXPECT_EQ(back.score, r.score);
  EXPECT_EQ(back.matcher, "local");

  WriteJudgmentsCsv(dir.path() / "j.csv", r);
  std::ifstream in(dir.path() / "j.csv");
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(header, "index,correct,format_ok,source,local_correct,judge_same,predicted,gold,error,output");
  EXPECT_NE(row.find("\"<Thinking>x, \"\"y\"\"</Thinking><Answer>1</Answer>\""), std::string::npos)
      << row;
}

}  // namespace
}  // namespace keytune
