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

#ifndef KEYTUNE_EXPERIMENT_H_
#define KEYTUNE_EXPERIMENT_H_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "keytune/corpus.h"
#include "keytune/eval.h"
#include "keytune/judge.h"
#include "keytune/model.h"
#include "keytune/training.h"

namespace keytune {

struct ExperimentConfig {
  SyntheticTaskSpec task;
  ModelConfig model;  // vocab_size and init_seed are filled in per run
  std::vector<Strategy> strategies = {Strategy::kSft, Strategy::kSftTag, Strategy::kKeyTag,
                                      Strategy::kSftKeyTag};
  Hyperparams stage1;
  Hyperparams stage2;
  int monitor_count = 100;  // held-out examples scored after every epoch
  GenerationSettings generation;
  double alpha = 0.7;
  std::string matcher = "local";  // "local" or "judge"
  JudgeConfig judge;
  std::string judge_fixture;  // canned replies instead of a live endpoint
  std::size_t eval_limit = 0;  // 0 evaluates the whole eval split
  std::vector<std::uint64_t> seeds = {1};
  std::filesystem::path output_dir = "runs";

  void Validate() const;
};

// Key-value settings, one "key = value" per line, '#' starts a comment.
// Unknown keys and malformed values throw UsageError.
void ApplySetting(ExperimentConfig& config, std::string_view key, std::string_view value);
void ApplyOverride(ExperimentConfig& config, std::string_view assignment);
ExperimentConfig ParseConfig(std::string_view text);
ExperimentConfig LoadConfig(const std::filesystem::path& path);

// Sorted "key = value" lines covering every setting.
std::string CanonicalConfig(const ExperimentConfig& config);
// First 16 hex digits of the SHA-256 of the task.*, model.* and train.*
// lines of CanonicalConfig(), excluding train.strategies. Runs of one
// experiment share ExperimentDir().
std::string ConfigHash(const ExperimentConfig& config);

std::filesystem::path ExperimentDir(const ExperimentConfig& config);
std::filesystem::path DataDir(const ExperimentConfig& config);
std::filesystem::path RunDir(const ExperimentConfig& config, Strategy strategy,
                             std::uint64_t seed);

// Model configuration of one run: vocabulary-sized, seeded by the run seed.
ModelConfig RunModelConfig(const ExperimentConfig& config, std::uint64_t seed);
TrainPlan RunPlan(const ExperimentConfig& config, Strategy strategy, std::uint64_t seed);

struct DataFiles {
  std::filesystem::path train;
  std::filesystem::path eval;
  std::size_t train_count = 0;
  std::size_t eval_count = 0;
  std::size_t collisions = 0;  // eval prompts that also occur in train
};

// Writes data/train.jsonl and data/eval.jsonl under the experiment dir.
DataFiles CmdGenData(const ExperimentConfig& config);

// Trains one strategy/seed. Writes per-stage checkpoints with JSON sidecars,
// train_log.csv, snapshots.csv and manifest.json into RunDir(). A failed
// run leaves a manifest with status "incomplete". Returns the manifest path.
std::filesystem::path CmdTrain(const ExperimentConfig& config, Strategy strategy,
                               std::uint64_t seed);

// Evaluates a checkpoint (the run's final one by default) on the eval split,
// writing eval_report.json and judgments.csv into RunDir().
EvalReport CmdEval(const ExperimentConfig& config, Strategy strategy, std::uint64_t seed,
                   const std::optional<std::filesystem::path>& checkpoint = std::nullopt);

struct ReportFiles {
  std::filesystem::path table_csv;
  std::filesystem::path table_txt;
  std::filesystem::path curves_csv;
  std::string table_text;
  std::size_t runs_used = 0;
};

// Strategy x metric table (means over seeds) with relative Score
// improvement over SFT, and a long-format answer-loss curve CSV with one
// series per strategy. Throws DataError if no manifest is complete.
ReportFiles CmdReport(const std::vector<std::filesystem::path>& manifests,
                      const std::filesystem::path& out_dir);

// All manifests under an experiment directory.
std::vector<std::filesystem::path> FindManifests(const std::filesystem::path& experiment_dir);

// Checks that a completed manifest's files exist and match their hashes.
bool VerifyManifest(const std::filesystem::path& manifest, std::string* problem = nullptr);

// Sends one rendered judging request and prints nothing; used by the
// judge-test subcommand.
JudgeVerdict JudgeOnce(const ExperimentConfig& config, std::string_view question,
                       std::string_view answer1, std::string_view answer2);

}  // namespace keytune

#endif  // KEYTUNE_EXPERIMENT_H_
