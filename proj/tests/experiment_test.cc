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


#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "json.hpp"
#include "keytune/error.h"
#include "keytune/experiment.h"
#include "keytune/hashing.h"
#include "test_util.h"

namespace keytune {
namespace {

namespace fs = std::filesystem;

constexpr const char* kTinyConfig = R"(# small enough to train in a second
task.train_count = 48
task.eval_count = 8
model.n_layers = 1
model.d_model = 16
model.n_heads = 2
model.d_ff = 32
train.epochs = 1
train.batch_size = 8
train.monitor_count = 4
eval.max_new_tokens = 24
)";

ExperimentConfig Tiny(const fs::path& out) {
  ExperimentConfig c = ParseConfig(kTinyConfig);
  c.output_dir = out;
  return c;
}

std::string Slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), {});
}

nlohmann::json ReadJson(const fs::path& p) { return nlohmann::json::parse(Slurp(p)); }

// Minimal RFC 4180 reader, independent of the writer.
std::vector<std::vector<std::string>> ParseCsv(const std::string& text) {
  std::vector<std::vector<std::string>> rows(1, std::vector<std::string>(1));
  bool quoted = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (quoted) {
      if (ch == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        rows.back().back() += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        rows.back().back() += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      rows.back().emplace_back();
    } else if (ch == '\n') {
      rows.emplace_back(1);
    } else {
      rows.back().back() += ch;
    }
  }
  if (rows.back().size() == 1 && rows.back()[0].empty()) rows.pop_back();
  return rows;
}

int RunCli(const std::string& args) {
  const std::string cmd = std::string(KEYTUNE_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Config, ParsesKeysAndComments) {
  const ExperimentConfig c = ParseConfig(
      "task.kind = subtraction  # trailing comment\n"
      "\n"
      "train.strategies = SFT, SFTKey-Tag\n"
      "run.seeds = 4,5,6\n"
      "eval.alpha = 0.5\n");
  EXPECT_EQ(c.task.kind, TaskKind::kSubtraction);
  EXPECT_EQ(c.strategies, (std::vector<Strategy>{Strategy::kSft, Strategy::kSftKeyTag}));
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{4, 5, 6}));
  EXPECT_EQ(c.alpha, 0.5);
}

TEST(Config, ErrorsNameTheLine) {
  for (const char* bad : {"task.kind = addition\nbogus.key = 1\n",
                          "task.kind = addition\nmodel.d_model = sixteen\n",
                          "task.kind = addition\nno equals sign\n"}) {
    try {
      ParseConfig(bad);
      FAIL() << bad;
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::kUsage);
      EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
    }
  }
  ExperimentConfig c;
  EXPECT_THROW(ApplyOverride(c, "train.strategies=Key-Tags"), Error);
  EXPECT_THROW(ApplyOverride(c, "train.lr"), Error);
  EXPECT_THROW(ApplyOverride(c, "eval.decoding=beam"), Error);
}

TEST(Config, CanonicalFormRoundTrips) {
  ExperimentConfig c = ParseConfig(kTinyConfig);
  ApplyOverride(c, "train.stage2.lr=1e-4");
  ApplyOverride(c, "run.seeds=1,2");
  const ExperimentConfig again = ParseConfig(CanonicalConfig(c));
  EXPECT_EQ(CanonicalConfig(again), CanonicalConfig(c));
  EXPECT_EQ(ConfigHash(again), ConfigHash(c));
  EXPECT_EQ(ConfigHash(c).size(), 16u);
}

TEST(Config, HashTracksTrainingSettingsOnly) {
  const ExperimentConfig a = ParseConfig(kTinyConfig);
  for (const char* same : {"run.output_dir=/elsewhere", "run.seeds=5,6", "eval.alpha=0.5",
                           "eval.matcher=judge", "judge.model=m", "train.strategies=SFT"}) {
    ExperimentConfig b = a;
    ApplyOverride(b, same);
    EXPECT_EQ(ConfigHash(a), ConfigHash(b)) << same;
  }
  for (const char* different : {"train.lr=5e-4", "train.stage2.epochs=2", "model.d_model=32",
                                "task.seed=8", "train.monitor_count=5"}) {
    ExperimentConfig b = a;
    ApplyOverride(b, different);
    EXPECT_NE(ConfigHash(a), ConfigHash(b)) << different;
  }
}

TEST(Pipeline, GenDataIsIdempotent) {
  testing::TempDir dir("exp");
  const ExperimentConfig c = Tiny(dir.path());
  const DataFiles first = CmdGenData(c);
  const std::string train_hash = Sha256File(first.train);
  const std::string eval_hash = Sha256File(first.eval);
  const DataFiles second = CmdGenData(c);
  EXPECT_EQ(Sha256File(second.train), train_hash);
  EXPECT_EQ(Sha256File(second.eval), eval_hash);
  EXPECT_EQ(first.train_count, 48u);
  EXPECT_EQ(first.eval_count, 8u);
  EXPECT_EQ(first.collisions, 0u);
  EXPECT_EQ(LoadDataset(first.train).size(), 48u);
  EXPECT_TRUE(fs::exists(ExperimentDir(c) / "config.txt"));
}

TEST(Pipeline, TrainWithoutDataFails) {
  testing::TempDir dir("exp");
  try {
    CmdTrain(Tiny(dir.path()), Strategy::kSft, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kData);
  }
}

TEST(Pipeline, TwoStageManifest) {
  testing::TempDir dir("exp");
  const ExperimentConfig c = Tiny(dir.path());
  CmdGenData(c);
  const fs::path manifest = CmdTrain(c, Strategy::kSftKeyTag, 1);
  const nlohmann::json m = ReadJson(manifest);
  EXPECT_EQ(m.at("status"), "complete");
  EXPECT_EQ(m.at("strategy"), "SFTKey-Tag");
  EXPECT_EQ(m.at("config_hash"), ConfigHash(c));
  ASSERT_EQ(m.at("checkpoints").size(), 2u);
  EXPECT_EQ(m.at("checkpoints")[0].at("path"), "stage1.ckpt");
  EXPECT_EQ(m.at("checkpoints")[1].at("path"), "stage2.ckpt");
  EXPECT_EQ(m.at("final_checkpoint"), "stage2.ckpt");
  std::string problem;
  EXPECT_TRUE(VerifyManifest(manifest, &problem)) << problem;

  // Both stages appear in the log, each restarting its step counter.
  const auto log = ParseCsv(Slurp(manifest.parent_path() / "train_log.csv"));
  std::set<std::string> stages;
  for (std::size_t r = 1; r < log.size(); ++r) stages.insert(log[r][0]);
  EXPECT_EQ(stages, (std::set<std::string>{"1", "2"}));
}

TEST(Pipeline, RerunIsByteIdentical) {
  testing::TempDir dir("exp");
  const ExperimentConfig c = Tiny(dir.path());
  CmdGenData(c);
  const fs::path manifest = CmdTrain(c, Strategy::kKeyTag, 3);
  const fs::path ckpt = manifest.parent_path() / "stage1.ckpt";
  const std::string first = Sha256File(ckpt);
  const std::string log = Sha256File(manifest.parent_path() / "train_log.csv");
  CmdTrain(c, Strategy::kKeyTag, 3);
  EXPECT_EQ(Sha256File(ckpt), first);
  EXPECT_EQ(Sha256File(manifest.parent_path() / "train_log.csv"), log);
  // A different seed gives a different model.
  const fs::path other = CmdTrain(c, Strategy::kKeyTag, 4);
  EXPECT_NE(Sha256File(other.parent_path() / "stage1.ckpt"), first);
}

TEST(Pipeline, TamperedFileFailsVerification) {
  testing::TempDir dir("exp");
  const ExperimentConfig c = Tiny(dir.path());
  CmdGenData(c);
  const fs::path manifest = CmdTrain(c, Strategy::kSft, 1);
  ASSERT_TRUE(VerifyManifest(manifest));
  std::ofstream(manifest.parent_path() / "train_log.csv", std::ios::app) << "1,0,1,0,0,0\n";
  std::string problem;
  EXPECT_FALSE(VerifyManifest(manifest, &problem));
  EXPECT_NE(problem.find("train_log.csv"), std::string::npos) << problem;
}

TEST(Pipeline, EvalReportMatchesPerExampleCsv) {
  testing::TempDir dir("exp");
  ExperimentConfig c = Tiny(dir.path());
  CmdGenData(c);
  CmdTrain(c, Strategy::kSftTag, 1);
  for (const double alpha : {0.0, 0.7, 1.0}) {
    c.alpha = alpha;
    const EvalReport r = CmdEval(c, Strategy::kSftTag, 1);
    const fs::path run = RunDir(c, Strategy::kSftTag, 1);
    const auto rows = ParseCsv(Slurp(run / "judgments.csv"));
    ASSERT_EQ(rows.size(), 9u);
    EXPECT_EQ(rows[0][0], "index");
    double correct = 0, formatted = 0;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      ASSERT_EQ(rows[i].size(), 10u);
      correct += std::stod(rows[i][1]);
      formatted += std::stod(rows[i][2]);
    }
    const double acc = correct / 8.0, fmt = formatted / 8.0;
    EXPECT_DOUBLE_EQ(r.acc, acc);
    EXPECT_DOUBLE_EQ(r.fmt, fmt);
    EXPECT_NEAR(r.score, alpha * acc + (1.0 - alpha) * fmt, 1e-15);
    const nlohmann::json j = ReadJson(run / "eval_report.json");
    EXPECT_EQ(j.at("alpha").get<double>(), alpha);
    EXPECT_EQ(j.at("n").get<int>(), 8);
  }
  const nlohmann::json m = ReadJson(RunDir(c, Strategy::kSftTag, 1) / "manifest.json");
  EXPECT_TRUE(m.contains("eval_reports"));
}

TEST(Pipeline, EvalWithJudgeFixture) {
  testing::TempDir dir("exp");
  ExperimentConfig c = Tiny(dir.path());
  CmdGenData(c);
  CmdTrain(c, Strategy::kSftTag, 1);
  const fs::path fixture = dir.path() / "fixture.jsonl";
  std::ofstream(fixture) << R"({"prompt_sha256":"*","replies":["yes"]})" << "\n";
  c.matcher = "judge";
  c.judge_fixture = fixture.string();
  const EvalReport r = CmdEval(c, Strategy::kSftTag, 1);
  EXPECT_EQ(r.matcher, "judge");
  std::size_t answered = 0;
  for (const Judgment& j : r.judgments) {
    if (!j.predicted) continue;
    ++answered;
    EXPECT_TRUE(j.correct);
    EXPECT_EQ(j.source, JudgeSource::kExternalJudge);
  }
  EXPECT_DOUBLE_EQ(r.acc, static_cast<double>(answered) / 8.0);
  std::ifstream audit(RunDir(c, Strategy::kSftTag, 1) / "judge_audit.jsonl");
  std::size_t lines = 0;
  for (std::string line; std::getline(audit, line);) ++lines;
  EXPECT_EQ(lines, answered);
}

TEST(Pipeline, MissingCheckpointIsAnEvaluationError) {
  testing::TempDir dir("exp");
  const ExperimentConfig c = Tiny(dir.path());
  CmdGenData(c);
  try {
    CmdEval(c, Strategy::kSft, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kEvaluation);
  }
  try {
    CmdEval(c, Strategy::kSft, 1, dir.path() / "nope.ckpt");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kEvaluation);
  }
}

TEST(Pipeline, ReportOverAllStrategies) {
  testing::TempDir dir("exp");
  ExperimentConfig c = Tiny(dir.path());
  c.seeds = {1, 2};
  CmdGenData(c);
  for (Strategy s : c.strategies) {
    for (std::uint64_t seed : c.seeds) {
      CmdTrain(c, s, seed);
      CmdEval(c, s, seed);
    }
  }
  const auto manifests = FindManifests(ExperimentDir(c));
  EXPECT_EQ(manifests.size(), 8u);
  const ReportFiles rep = CmdReport(manifests, dir.path() / "report");
  EXPECT_EQ(rep.runs_used, 8u);
  const auto table = ParseCsv(Slurp(rep.table_csv));
  ASSERT_EQ(table.size(), 5u);
  EXPECT_EQ(table[0], (std::vector<std::string>{"strategy", "seeds", "acc", "fmt", "score",
                                                 "answer_nll", "improvement_vs_sft"}));
  std::set<std::string> names;
  for (std::size_t r = 1; r < table.size(); ++r) {
    names.insert(table[r][0]);
    EXPECT_EQ(table[r][1], "2");
    const double acc = std::stod(table[r][2]), fmt = std::stod(table[r][3]);
    EXPECT_NEAR(std::stod(table[r][4]), 0.7 * acc + 0.3 * fmt, 1e-4);
  }
  EXPECT_EQ(names, (std::set<std::string>{"SFT", "SFT-Tag", "Key-Tag", "SFTKey-Tag"}));
  EXPECT_FALSE(rep.table_text.empty());

  // One curve per strategy with consecutive steps.
  const auto curves = ParseCsv(Slurp(rep.curves_csv));
  EXPECT_EQ(curves[0], (std::vector<std::string>{"strategy", "step", "stage", "loss_answer"}));
  std::map<std::string, long> last_step;
  for (std::size_t r = 1; r < curves.size(); ++r) {
    const long step = std::stol(curves[r][1]);
    auto [it, fresh] = last_step.emplace(curves[r][0], step);
    if (fresh) {
      EXPECT_EQ(step, 0);
    } else {
      EXPECT_EQ(step, it->second + 1);
      it->second = step;
    }
    EXPECT_TRUE(std::isfinite(std::stod(curves[r][3])));
  }
  EXPECT_EQ(last_step.size(), 4u);
}

TEST(Pipeline, ReportWithoutBaselineOrRuns) {
  testing::TempDir dir("exp");
  ExperimentConfig c = Tiny(dir.path());
  EXPECT_THROW(CmdReport({}, dir.path() / "report"), Error);
  CmdGenData(c);
  CmdTrain(c, Strategy::kKeyTag, 1);
  CmdEval(c, Strategy::kKeyTag, 1);
  const ReportFiles rep = CmdReport(FindManifests(ExperimentDir(c)), dir.path() / "report");
  const auto table = ParseCsv(Slurp(rep.table_csv));
  ASSERT_EQ(table.size(), 2u);
  EXPECT_EQ(table[1][6], "n/a");
}

TEST(Cli, ExitCodesFollowErrorKinds) {
  testing::TempDir dir("cli");
  const fs::path cfg = dir.path() / "c.txt";
  std::ofstream(cfg) << kTinyConfig << "run.output_dir = " << (dir.path() / "out").string()
                     << "\n";
  const std::string c = "-c " + cfg.string();
  EXPECT_EQ(RunCli("train " + c + " --strategy Bogus"), 1);
  EXPECT_EQ(RunCli("train " + c + " -s model.d_model=x"), 1);
  EXPECT_EQ(RunCli("no-such-command"), 1);
  EXPECT_EQ(RunCli("train " + c + " --strategy SFT"), 2);  // no data yet
  EXPECT_EQ(RunCli("gen-data " + c), 0);
  EXPECT_EQ(RunCli("train " + c + " --strategy SFT --seed 1"), 0);
  EXPECT_EQ(RunCli("eval " + c + " --strategy SFT --seed 1"), 0);
  EXPECT_EQ(RunCli("report " + c), 0);
  EXPECT_EQ(RunCli("eval " + c + " --strategy SFT-Tag --seed 1"), 4);  // never trained
}

}  // namespace
}  // namespace keytune
