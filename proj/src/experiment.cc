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

#include "keytune/experiment.h"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "keytune/error.h"
#include "keytune/hashing.h"

namespace keytune {
namespace fs = std::filesystem;
namespace {

using Json = nlohmann::ordered_json;

std::string_view TrimView(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T ParseNumber(std::string_view key, std::string_view value) {
  T out{};
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw UsageError("invalid value \"" + std::string(value) + "\" for " + std::string(key));
  }
  return out;
}

std::vector<std::string_view> SplitList(std::string_view value) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (start <= value.size()) {
    auto comma = value.find(',', start);
    if (comma == std::string_view::npos) comma = value.size();
    const auto item = TrimView(value.substr(start, comma - start));
    if (!item.empty()) out.push_back(item);
    start = comma + 1;
  }
  return out;
}

std::string Num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct Field {
  std::string_view key;
  std::function<void(ExperimentConfig&, std::string_view)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define KT_INT_FIELD(KEY, EXPR)                                                       \
  Field {                                                                             \
    KEY, [](ExperimentConfig& c, std::string_view v) { c.EXPR = ParseNumber<std::decay_t<decltype(c.EXPR)>>(KEY, v); }, \
        [](const ExperimentConfig& c) { return std::to_string(c.EXPR); }              \
  }
#define KT_DOUBLE_FIELD(KEY, EXPR)                                                   \
  Field {                                                                            \
    KEY, [](ExperimentConfig& c, std::string_view v) { c.EXPR = ParseNumber<double>(KEY, v); }, \
        [](const ExperimentConfig& c) { return Num(c.EXPR); }                        \
  }
#define KT_STRING_FIELD(KEY, EXPR)                                                   \
  Field {                                                                            \
    KEY, [](ExperimentConfig& c, std::string_view v) { c.EXPR = std::string(v); },    \
        [](const ExperimentConfig& c) { return std::string(c.EXPR); }                \
  }

const std::vector<Field>& Fields() {
  static const std::vector<Field> fields = {
      Field{"task.kind",
            [](ExperimentConfig& c, std::string_view v) { c.task.kind = ParseTaskKind(v); },
            [](const ExperimentConfig& c) { return std::string(TaskKindName(c.task.kind)); }},
      KT_INT_FIELD("task.min_digits", task.min_digits),
      KT_INT_FIELD("task.max_digits", task.max_digits),
      KT_INT_FIELD("task.train_count", task.train_count),
      KT_INT_FIELD("task.eval_count", task.eval_count),
      KT_INT_FIELD("task.seed", task.seed),
      KT_INT_FIELD("model.n_layers", model.n_layers),
      KT_INT_FIELD("model.d_model", model.d_model),
      KT_INT_FIELD("model.n_heads", model.n_heads),
      KT_INT_FIELD("model.d_ff", model.d_ff),
      KT_INT_FIELD("model.max_seq_len", model.max_seq_len),
      Field{"train.strategies",
            [](ExperimentConfig& c, std::string_view v) {
              c.strategies.clear();
              for (auto s : SplitList(v)) c.strategies.push_back(ParseStrategy(s));
            },
            [](const ExperimentConfig& c) {
              std::string out;
              for (Strategy s : c.strategies) {
                if (!out.empty()) out += ',';
                out += StrategyName(s);
              }
              return out;
            }},
      KT_DOUBLE_FIELD("train.lr", stage1.learning_rate),
      KT_DOUBLE_FIELD("train.warmup_fraction", stage1.warmup_fraction),
      KT_DOUBLE_FIELD("train.weight_decay", stage1.weight_decay),
      KT_INT_FIELD("train.epochs", stage1.epochs),
      KT_INT_FIELD("train.batch_size", stage1.batch_size),
      KT_DOUBLE_FIELD("train.clip_norm", stage1.clip_norm),
      KT_DOUBLE_FIELD("train.stage2.lr", stage2.learning_rate),
      KT_DOUBLE_FIELD("train.stage2.warmup_fraction", stage2.warmup_fraction),
      KT_DOUBLE_FIELD("train.stage2.weight_decay", stage2.weight_decay),
      KT_INT_FIELD("train.stage2.epochs", stage2.epochs),
      KT_INT_FIELD("train.stage2.batch_size", stage2.batch_size),
      KT_DOUBLE_FIELD("train.stage2.clip_norm", stage2.clip_norm),
      KT_INT_FIELD("train.monitor_count", monitor_count),
      KT_INT_FIELD("eval.max_new_tokens", generation.max_new_tokens),
      Field{"eval.decoding",
            [](ExperimentConfig& c, std::string_view v) {
              if (v == "greedy") {
                c.generation.mode = DecodingMode::kGreedy;
              } else if (v == "sampled") {
                c.generation.mode = DecodingMode::kSampled;
              } else {
                throw UsageError("eval.decoding must be greedy or sampled");
              }
            },
            [](const ExperimentConfig& c) {
              return std::string(c.generation.mode == DecodingMode::kGreedy ? "greedy"
                                                                            : "sampled");
            }},
      KT_DOUBLE_FIELD("eval.temperature", generation.temperature),
      KT_INT_FIELD("eval.sample_seed", generation.seed),
      KT_DOUBLE_FIELD("eval.alpha", alpha),
      KT_STRING_FIELD("eval.matcher", matcher),
      KT_INT_FIELD("eval.limit", eval_limit),
      KT_STRING_FIELD("judge.endpoint", judge.endpoint_url),
      KT_STRING_FIELD("judge.model", judge.model),
      KT_STRING_FIELD("judge.api_key_env", judge.api_key_env),
      KT_DOUBLE_FIELD("judge.timeout", judge.timeout_seconds),
      KT_INT_FIELD("judge.max_retries", judge.max_retries),
      KT_DOUBLE_FIELD("judge.temperature", judge.temperature),
      KT_INT_FIELD("judge.max_in_flight", judge.max_in_flight),
      KT_DOUBLE_FIELD("judge.backoff", judge.initial_backoff_seconds),
      KT_STRING_FIELD("judge.fixture", judge_fixture),
      Field{"run.seeds",
            [](ExperimentConfig& c, std::string_view v) {
              c.seeds.clear();
              for (auto s : SplitList(v)) c.seeds.push_back(ParseNumber<std::uint64_t>("run.seeds", s));
            },
            [](const ExperimentConfig& c) {
              std::string out;
              for (auto s : c.seeds) {
                if (!out.empty()) out += ',';
                out += std::to_string(s);
              }
              return out;
            }},
      Field{"run.output_dir",
            [](ExperimentConfig& c, std::string_view v) { c.output_dir = fs::path(std::string(v)); },
            [](const ExperimentConfig& c) { return c.output_dir.string(); }},
  };
  return fields;
}

#undef KT_INT_FIELD
#undef KT_DOUBLE_FIELD
#undef KT_STRING_FIELD

Json ReadJson(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void WriteJson(const fs::path& path, const Json& j) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

Json FileEntry(const fs::path& dir, const std::string& name) {
  return Json{{"path", name}, {"sha256", Sha256File(dir / name)}};
}

std::vector<TaggedExample> ReconstructAll(const std::vector<RawExample>& raw) {
  std::vector<TaggedExample> out;
  out.reserve(raw.size());
  for (const RawExample& ex : raw) out.push_back(Reconstruct(ex, Vocabulary::Default()));
  return out;
}

void RequireData(const ExperimentConfig& config) {
  for (const char* name : {"train.jsonl", "eval.jsonl"}) {
    if (!fs::exists(DataDir(config) / name)) {
      throw DataError("missing dataset " + (DataDir(config) / name).string() +
                      "; run gen-data first");
    }
  }
}

std::vector<RawExample> EvalSplit(const ExperimentConfig& config) {
  std::vector<RawExample> eval = LoadDataset(DataDir(config) / "eval.jsonl");
  if (config.eval_limit > 0 && eval.size() > config.eval_limit) eval.resize(config.eval_limit);
  return eval;
}

std::unique_ptr<JudgeTransport> MakeTransport(const ExperimentConfig& config) {
  if (!config.judge_fixture.empty()) {
    return std::make_unique<FixtureJudgeTransport>(fs::path(config.judge_fixture));
  }
  if (config.judge.endpoint_url.empty()) {
    throw UsageError("judge.endpoint or judge.fixture must be set to use the judge");
  }
  return std::make_unique<HttpJudgeTransport>(config.judge);
}

// Walks a manifest and checks every {"path", "sha256"} entry.
bool VerifyEntries(const Json& j, const fs::path& dir, std::string* problem) {
  if (j.is_object()) {
    if (j.contains("path") && j.contains("sha256")) {
      const fs::path p = dir / j["path"].get<std::string>();
      if (!fs::exists(p)) {
        if (problem) *problem = "missing file " + p.string();
        return false;
      }
      if (Sha256File(p) != j["sha256"].get<std::string>()) {
        if (problem) *problem = "hash mismatch for " + p.string();
        return false;
      }
    }
    for (const auto& [k, v] : j.items()) {
      if (!VerifyEntries(v, dir, problem)) return false;
    }
  } else if (j.is_array()) {
    for (const auto& v : j) {
      if (!VerifyEntries(v, dir, problem)) return false;
    }
  }
  return true;
}

// loss_answer column of a train_log.csv, in row order.
std::vector<std::pair<int, double>> ReadAnswerCurve(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<std::pair<int, double>> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string_view> cols;
    std::string_view rest = line;
    for (;;) {
      const auto comma = rest.find(',');
      cols.push_back(rest.substr(0, comma));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (cols.size() != 6) throw DataError("malformed train log row in " + path.string());
    out.emplace_back(ParseNumber<int>("stage", cols[0]), std::stod(std::string(cols[5])));
  }
  return out;
}

}  // namespace

void ExperimentConfig::Validate() const {
  if (strategies.empty()) throw UsageError("at least one strategy is required");
  if (seeds.empty()) throw UsageError("at least one seed is required");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw UsageError("eval.alpha must lie in [0, 1]");
  if (matcher != "local" && matcher != "judge") {
    throw UsageError("eval.matcher must be local or judge");
  }
  if (monitor_count < 0) throw UsageError("train.monitor_count must be >= 0");
  stage1.Validate();
  stage2.Validate();
  generation.Validate();
  judge.Validate();
  ModelConfig m = model;
  m.vocab_size = Vocabulary::Default().size();
  m.Validate();
}

void ApplySetting(ExperimentConfig& config, std::string_view key, std::string_view value) {
  for (const Field& f : Fields()) {
    if (f.key == key) {
      f.set(config, TrimView(value));
      return;
    }
  }
  throw UsageError("unknown setting \"" + std::string(key) + "\"");
}

void ApplyOverride(ExperimentConfig& config, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw UsageError("expected key=value, got \"" + std::string(assignment) + "\"");
  }
  ApplySetting(config, TrimView(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

ExperimentConfig ParseConfig(std::string_view text) {
  ExperimentConfig config;
  std::size_t line_no = 0, start = 0;
  while (start < text.size()) {
    auto nl = text.find('\n', start);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(start, nl - start);
    start = nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = TrimView(line);
    if (line.empty()) continue;
    try {
      ApplyOverride(config, line);
    } catch (const Error& e) {
      throw UsageError("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return config;
}

ExperimentConfig LoadConfig(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return ParseConfig(buf.str());
}

std::string CanonicalConfig(const ExperimentConfig& config) {
  std::map<std::string_view, std::string> sorted;
  for (const Field& f : Fields()) sorted[f.key] = f.get(config);
  std::string out;
  for (const auto& [k, v] : sorted) {
    out += k;
    out += " = ";
    out += v;
    out += '\n';
  }
  return out;
}

std::string ConfigHash(const ExperimentConfig& config) {
  // Only settings that change data or checkpoints. Which strategies and
  // seeds run, how they are evaluated and where outputs go leave the
  // experiment directory in place.
  std::istringstream lines(CanonicalConfig(config));
  std::string kept;
  for (std::string line; std::getline(lines, line);) {
    const bool trained = line.starts_with("task.") || line.starts_with("model.") ||
                         line.starts_with("train.");
    if (trained && !line.starts_with("train.strategies")) kept += line + "\n";
  }
  return Sha256Hex(kept).substr(0, 16);
}

fs::path ExperimentDir(const ExperimentConfig& config) {
  return config.output_dir / ConfigHash(config);
}

fs::path DataDir(const ExperimentConfig& config) { return ExperimentDir(config) / "data"; }

fs::path RunDir(const ExperimentConfig& config, Strategy strategy, std::uint64_t seed) {
  return ExperimentDir(config) / std::string(StrategyName(strategy)) / std::to_string(seed);
}

ModelConfig RunModelConfig(const ExperimentConfig& config, std::uint64_t seed) {
  ModelConfig m = config.model;
  m.vocab_size = Vocabulary::Default().size();
  m.init_seed = seed;
  return m;
}

TrainPlan RunPlan(const ExperimentConfig& config, Strategy strategy, std::uint64_t seed) {
  TrainPlan plan{strategy, config.stage1, config.stage2};
  plan.stage1.seed = seed;
  plan.stage2.seed = seed;
  return plan;
}

DataFiles CmdGenData(const ExperimentConfig& config) {
  config.Validate();
  const SplitCorpus corpus = GenerateCorpus(config.task);
  const fs::path dir = DataDir(config);
  fs::create_directories(dir);
  {
    std::ofstream cfg(ExperimentDir(config) / "config.txt", std::ios::binary | std::ios::trunc);
    cfg << CanonicalConfig(config);
  }
  DataFiles files{dir / "train.jsonl", dir / "eval.jsonl", corpus.train.size(),
                  corpus.eval.size(), 0};
  SaveDataset(files.train, corpus.train);
  SaveDataset(files.eval, corpus.eval);
  std::set<std::string> train_prompts;
  for (const RawExample& ex : corpus.train) train_prompts.insert(ex.prompt);
  for (const RawExample& ex : corpus.eval) files.collisions += train_prompts.count(ex.prompt);
  return files;
}

fs::path CmdTrain(const ExperimentConfig& config, Strategy strategy, std::uint64_t seed) {
  config.Validate();
  RequireData(config);
  const fs::path dir = RunDir(config, strategy, seed);
  fs::create_directories(dir);
  const fs::path manifest_path = dir / "manifest.json";

  Json manifest;
  manifest["config_hash"] = ConfigHash(config);
  manifest["code_version"] = KEYTUNE_VERSION;
  manifest["strategy"] = StrategyName(strategy);
  manifest["seed"] = seed;
  manifest["status"] = "incomplete";
  manifest["checkpoints"] = Json::array();
  WriteJson(manifest_path, manifest);

  try {
    const auto train = ReconstructAll(LoadDataset(DataDir(config) / "train.jsonl"));
    std::vector<TaggedExample> monitor_set;
    if (config.monitor_count > 0) {
      auto eval = EvalSplit(config);
      if (eval.size() > static_cast<std::size_t>(config.monitor_count)) {
        eval.resize(config.monitor_count);
      }
      monitor_set = ReconstructAll(eval);
    }
    const StageMonitor monitor{monitor_set, TargetForm::kTagged, config.stage1.batch_size};

    StageHooks hooks;
    hooks.on_stage_end = [&](const StageSpec& stage, const ModelParams& params) {
      const std::string name = "stage" + std::to_string(stage.index) + ".ckpt";
      SaveCheckpoint(dir / name, params);
      Json meta;
      meta["strategy"] = StrategyName(strategy);
      meta["stage"] = stage.index;
      meta["mask"] = stage.scope == MaskScope::kAnswerOnly ? "answer-only" : "full-response";
      meta["targets"] = stage.form == TargetForm::kTagged ? "tagged" : "untagged";
      meta["epochs"] = stage.hyper.epochs;
      meta["learning_rate"] = stage.hyper.learning_rate;
      meta["seed"] = stage.hyper.seed;
      meta["checkpoint_sha256"] = Sha256File(dir / name);
      WriteJson(dir / (name + ".json"), meta);
      Json entry = FileEntry(dir, name);
      entry["stage"] = stage.index;
      entry["metadata"] = FileEntry(dir, name + ".json");
      manifest["checkpoints"].push_back(entry);
      manifest["final_checkpoint"] = name;
      WriteJson(manifest_path, manifest);
    };

    const auto start = std::chrono::steady_clock::now();
    const StrategyResult result =
        RunStrategy(RunPlan(config, strategy, seed), train, RunModelConfig(config, seed),
                    &hooks, monitor_set.empty() ? nullptr : &monitor);
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.log.WriteCsv(dir / "train_log.csv");
    result.log.WriteSnapshotsCsv(dir / "snapshots.csv");
    manifest["train_log"] = FileEntry(dir, "train_log.csv");
    manifest["snapshots"] = FileEntry(dir, "snapshots.csv");
    manifest["durations"]["train_seconds"] = seconds;
    manifest["status"] = "complete";
    manifest.erase("error");
    WriteJson(manifest_path, manifest);
  } catch (const Error& e) {
    manifest["status"] = "incomplete";
    manifest["error"] = e.what();
    WriteJson(manifest_path, manifest);
    throw;
  }
  return manifest_path;
}

EvalReport CmdEval(const ExperimentConfig& config, Strategy strategy, std::uint64_t seed,
                   const std::optional<fs::path>& checkpoint) {
  config.Validate();
  RequireData(config);
  const fs::path dir = RunDir(config, strategy, seed);
  const fs::path manifest_path = dir / "manifest.json";
  std::optional<Json> manifest;
  if (fs::exists(manifest_path)) manifest = ReadJson(manifest_path);

  fs::path ckpt;
  if (checkpoint) {
    ckpt = *checkpoint;
  } else if (manifest && manifest->contains("final_checkpoint")) {
    ckpt = dir / (*manifest)["final_checkpoint"].get<std::string>();
  }
  if (ckpt.empty() || !fs::exists(ckpt)) {
    throw EvaluationError("missing checkpoint" + (ckpt.empty() ? std::string(" for ") +
                                                                     dir.string()
                                                               : ": " + ckpt.string()));
  }
  const ModelParams params = LoadCheckpoint(ckpt);
  const std::vector<RawExample> eval = EvalSplit(config);
  const EvalOptions options{config.alpha,
                            strategy == Strategy::kSft ? TargetForm::kUntagged
                                                       : TargetForm::kTagged,
                            config.stage1.batch_size};

  fs::create_directories(dir);
  const auto start = std::chrono::steady_clock::now();
  EvalReport report;
  if (config.matcher == "judge") {
    JudgeClient client(config.judge, MakeTransport(config));
    const fs::path audit = dir / "judge_audit.jsonl";
    fs::remove(audit);
    JudgeMatcher matcher(client, audit);
    report = Evaluate(params, eval, Vocabulary::Default(), config.generation, options, matcher);
  } else {
    LocalMatcher matcher;
    report = Evaluate(params, eval, Vocabulary::Default(), config.generation, options, matcher);
  }
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  WriteReportJson(dir / "eval_report.json", report);
  WriteJudgmentsCsv(dir / "judgments.csv", report);

  if (manifest) {
    Json entry;
    entry["checkpoint"] = fs::relative(ckpt, dir).string();
    entry["report"] = FileEntry(dir, "eval_report.json");
    entry["judgments"] = FileEntry(dir, "judgments.csv");
    (*manifest)["eval_reports"] = Json::array({entry});
    (*manifest)["durations"]["eval_seconds"] = seconds;
    WriteJson(manifest_path, *manifest);
  }
  return report;
}

std::vector<fs::path> FindManifests(const fs::path& experiment_dir) {
  std::vector<fs::path> out;
  if (!fs::exists(experiment_dir)) return out;
  for (const auto& entry : fs::recursive_directory_iterator(experiment_dir)) {
    if (entry.is_regular_file() && entry.path().filename() == "manifest.json") {
      out.push_back(entry.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

bool VerifyManifest(const fs::path& manifest, std::string* problem) {
  const Json j = ReadJson(manifest);
  if (j.value("status", "") != "complete") {
    if (problem) *problem = "run is not complete";
    return false;
  }
  return VerifyEntries(j, manifest.parent_path(), problem);
}

ReportFiles CmdReport(const std::vector<fs::path>& manifests, const fs::path& out_dir) {
  struct Accum {
    std::vector<EvalReport> reports;
    std::vector<std::vector<std::pair<int, double>>> curves;
  };
  std::map<Strategy, Accum> by_strategy;
  std::size_t used = 0;
  for (const fs::path& path : manifests) {
    const Json j = ReadJson(path);
    if (j.value("status", "") != "complete" || !j.contains("eval_reports") ||
        j["eval_reports"].empty()) {
      continue;
    }
    const fs::path dir = path.parent_path();
    const Strategy s = ParseStrategy(j["strategy"].get<std::string>());
    Accum& acc = by_strategy[s];
    acc.reports.push_back(
        ReadReportJson(dir / j["eval_reports"][0]["report"]["path"].get<std::string>()));
    acc.curves.push_back(ReadAnswerCurve(dir / j["train_log"]["path"].get<std::string>()));
    ++used;
  }
  if (used == 0) throw DataError("no completed runs with evaluation reports");

  fs::create_directories(out_dir);
  ReportFiles files{out_dir / "table.csv", out_dir / "table.txt", out_dir / "curves.csv", {},
                    used};

  struct Row {
    Strategy strategy;
    std::size_t seeds;
    double acc, fmt, score, nll;
  };
  std::vector<Row> rows;
  for (const auto& [s, acc] : by_strategy) {
    Row r{s, acc.reports.size(), 0, 0, 0, 0};
    for (const EvalReport& rep : acc.reports) {
      r.acc += rep.acc;
      r.fmt += rep.fmt;
      r.score += rep.score;
      r.nll += rep.answer_nll;
    }
    const double n = static_cast<double>(r.seeds);
    r.acc /= n;
    r.fmt /= n;
    r.score /= n;
    r.nll /= n;
    rows.push_back(r);
  }
  std::optional<double> baseline;
  for (const Row& r : rows) {
    if (r.strategy == Strategy::kSft && r.score > 0.0) baseline = r.score;
  }
  auto improvement = [&](const Row& r) {
    return baseline ? FormatImprovement(RelativeImprovement(r.score, *baseline))
                    : std::string("n/a");
  };

  std::ofstream csv(files.table_csv, std::ios::binary | std::ios::trunc);
  csv << "strategy,seeds,acc,fmt,score,answer_nll,improvement_vs_sft\n";
  std::ostringstream txt;
  char line[160];
  std::snprintf(line, sizeof(line), "%-12s %5s %8s %8s %8s %10s %10s\n", "Strategy", "Seeds",
                "Acc", "Fmt", "Score", "AnswerNLL", "vs SFT");
  txt << line;
  for (const Row& r : rows) {
    csv << StrategyName(r.strategy) << ',' << r.seeds << ',' << Num(r.acc) << ',' << Num(r.fmt)
        << ',' << Num(r.score) << ',' << Num(r.nll) << ',' << improvement(r) << '\n';
    std::snprintf(line, sizeof(line), "%-12s %5zu %8.4f %8.4f %8.4f %10.4f %10s\n",
                  std::string(StrategyName(r.strategy)).c_str(), r.seeds, r.acc, r.fmt,
                  r.score, r.nll, improvement(r).c_str());
    txt << line;
  }
  files.table_text = txt.str();
  std::ofstream(files.table_txt, std::ios::binary | std::ios::trunc) << files.table_text;

  // Curves: mean over seeds at each global step the seeds share.
  std::ofstream curves(files.curves_csv, std::ios::binary | std::ios::trunc);
  curves << "strategy,step,stage,loss_answer\n";
  for (const auto& [s, acc] : by_strategy) {
    std::size_t steps = SIZE_MAX;
    for (const auto& c : acc.curves) steps = std::min(steps, c.size());
    for (std::size_t i = 0; i < steps; ++i) {
      double sum = 0.0;
      for (const auto& c : acc.curves) sum += c[i].second;
      curves << StrategyName(s) << ',' << i << ',' << acc.curves[0][i].first << ','
             << Num(sum / static_cast<double>(acc.curves.size())) << '\n';
    }
  }
  return files;
}

JudgeVerdict JudgeOnce(const ExperimentConfig& config, std::string_view question,
                       std::string_view answer1, std::string_view answer2) {
  JudgeClient client(config.judge, MakeTransport(config));
  return client.Judge(question, answer1, answer2);
}

}  // namespace keytune
