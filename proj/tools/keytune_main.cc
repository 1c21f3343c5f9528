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


// keytune command line: gen-data, train, eval, report, judge-test.

#include <cstdio>
#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "keytune/error.h"
#include "keytune/experiment.h"

namespace {

using keytune::ExperimentConfig;

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
};

void AddCommon(CLI::App* cmd, Common& common) {
  cmd->add_option("-c,--config", common.config_path, "key = value config file");
  cmd->add_option("-s,--set", common.overrides, "override a setting, key=value")
      ->allow_extra_args(false);
}

ExperimentConfig BuildConfig(const Common& common) {
  ExperimentConfig config =
      common.config_path.empty() ? ExperimentConfig{} : keytune::LoadConfig(common.config_path);
  for (const std::string& o : common.overrides) keytune::ApplyOverride(config, o);
  config.Validate();
  return config;
}

std::vector<keytune::Strategy> SelectedStrategies(const ExperimentConfig& config,
                                                  const std::string& name) {
  if (name.empty()) return config.strategies;
  return {keytune::ParseStrategy(name)};
}

std::vector<std::uint64_t> SelectedSeeds(const ExperimentConfig& config,
                                         const std::optional<std::uint64_t>& seed) {
  if (seed) return {*seed};
  return config.seeds;
}

void PrintReport(keytune::Strategy s, std::uint64_t seed, const keytune::EvalReport& r) {
  std::printf("%-11s seed %-4llu acc %.4f fmt %.4f score %.4f answer_nll %.4f (%s)\n",
              std::string(keytune::StrategyName(s)).c_str(),
              static_cast<unsigned long long>(seed), r.acc, r.fmt, r.score, r.answer_nll,
              r.matcher.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"keytune: tagged fine-tuning experiments on synthetic reasoning tasks"};
  app.set_version_flag("--version", std::string(KEYTUNE_VERSION));
  app.require_subcommand(1);

  Common common;
  std::string strategy;
  std::optional<std::uint64_t> seed;
  std::string checkpoint;
  std::string report_dir;
  std::string question, answer1, answer2;

  auto* gen = app.add_subcommand("gen-data", "generate train and eval splits");
  AddCommon(gen, common);

  auto* train = app.add_subcommand("train", "train one or more strategies");
  AddCommon(train, common);
  train->add_option("--strategy", strategy, "SFT, SFT-Tag, Key-Tag or SFTKey-Tag");
  train->add_option("--seed", seed, "run seed (default: every configured seed)");

  auto* eval = app.add_subcommand("eval", "evaluate trained checkpoints");
  AddCommon(eval, common);
  eval->add_option("--strategy", strategy, "SFT, SFT-Tag, Key-Tag or SFTKey-Tag");
  eval->add_option("--seed", seed, "run seed (default: every configured seed)");
  eval->add_option("--checkpoint", checkpoint, "checkpoint to evaluate instead of the final one");

  auto* report = app.add_subcommand("report", "aggregate completed runs into tables");
  AddCommon(report, common);
  report->add_option("--out", report_dir, "output directory (default: <experiment>/report)");

  auto* judge = app.add_subcommand("judge-test", "send one judging request");
  AddCommon(judge, common);
  judge->add_option("--question", question)->required();
  judge->add_option("--answer1", answer1, "model answer")->required();
  judge->add_option("--answer2", answer2, "reference answer")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(keytune::ErrorKind::kUsage);
  }

  try {
    const ExperimentConfig config = BuildConfig(common);
    if (*gen) {
      const keytune::DataFiles files = keytune::CmdGenData(config);
      std::printf("wrote %zu train and %zu eval examples to %s (%zu overlapping prompts)\n",
                  files.train_count, files.eval_count, files.train.parent_path().c_str(),
                  files.collisions);
    } else if (*train) {
      if (!checkpoint.empty()) throw keytune::UsageError("--checkpoint applies to eval only");
      for (auto s : SelectedStrategies(config, strategy)) {
        for (auto sd : SelectedSeeds(config, seed)) {
          const auto manifest = keytune::CmdTrain(config, s, sd);
          std::printf("trained %s seed %llu: %s\n", std::string(keytune::StrategyName(s)).c_str(),
                      static_cast<unsigned long long>(sd), manifest.c_str());
        }
      }
    } else if (*eval) {
      std::optional<std::filesystem::path> ckpt;
      if (!checkpoint.empty()) ckpt = checkpoint;
      const auto strategies = SelectedStrategies(config, strategy);
      const auto seeds = SelectedSeeds(config, seed);
      if (ckpt && strategies.size() * seeds.size() != 1) {
        throw keytune::UsageError("--checkpoint needs a single --strategy and --seed");
      }
      for (auto s : strategies) {
        for (auto sd : seeds) PrintReport(s, sd, keytune::CmdEval(config, s, sd, ckpt));
      }
    } else if (*report) {
      const auto dir = keytune::ExperimentDir(config);
      const auto files = keytune::CmdReport(keytune::FindManifests(dir),
                                            report_dir.empty() ? dir / "report" : std::filesystem::path(report_dir));
      std::fputs(files.table_text.c_str(), stdout);
      std::printf("wrote %s, %s and %s\n", files.table_csv.c_str(), files.table_txt.c_str(),
                  files.curves_csv.c_str());
    } else if (*judge) {
      const auto verdict = keytune::JudgeOnce(config, question, answer1, answer2);
      std::printf("%s (attempts %d, %.3f s)\nraw reply: %s\n", verdict.same ? "same" : "different",
                  verdict.attempts, verdict.latency_seconds, verdict.raw_reply.c_str());
    }
  } catch (const keytune::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.exit_code();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return static_cast<int>(keytune::ErrorKind::kData);
  }
  return 0;
}
