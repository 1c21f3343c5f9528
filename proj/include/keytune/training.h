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

#ifndef KEYTUNE_TRAINING_H_
#define KEYTUNE_TRAINING_H_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "keytune/corpus.h"
#include "keytune/model.h"

namespace keytune {

// Which response sequence a loss is computed on.
enum class TargetForm { kTagged, kUntagged };

enum class MaskScope { kFullResponse, kAnswerOnly };

const TokenIds& Targets(const TaggedExample& example, TargetForm form);

// Per-target-position weights in {0, 1}. Prompt tokens never carry loss, so
// masks are aligned with the target sequence only.
struct LossMask {
  std::vector<double> weights;

  double total() const;
};

// kFullResponse weights every target position. kAnswerOnly weights
// positions boundary_t + 1 .. end (<Answer>, answer, </Answer>, EOS) and is
// only defined for tagged targets; requesting it on untagged targets
// throws UsageError.
LossMask BuildMask(const TaggedExample& example, MaskScope scope, TargetForm form);

// Answer-level positions used for monitoring in either form: for tagged
// targets this equals the answer-only mask; for untagged targets it covers
// the answer tokens and EOS.
LossMask AnswerSpanMask(const TaggedExample& example, TargetForm form);

struct MaskedNllResult {
  double loss = 0.0;
  // mask_t * nll_t / sum(mask); sums to `loss`.
  std::vector<double> position_loss;
  ModelGradients gradients;
};

// loss = -(1 / sum mask) * sum_t mask_t * log P(target_t | prompt, target_<t).
// Every prediction is conditioned on the full gold prefix regardless of the
// mask. Throws UsageError for an all-zero or misaligned mask.
MaskedNllResult MaskedNll(const ModelParams& params, const TaggedExample& example,
                          const LossMask& mask, TargetForm form, bool with_gradients = true);

struct BatchItem {
  const TaggedExample* example = nullptr;
  TargetForm form = TargetForm::kTagged;
  LossMask mask;
  LossMask answer_mask;
};

struct BatchResult {
  double loss = 0.0;         // mean of per-example masked NLL
  double answer_loss = 0.0;  // mean of per-example answer-span NLL
  std::vector<double> example_loss;
  std::vector<double> example_answer_loss;
};

// Scores a batch, adding the gradient of `loss` into `grads` when non-null.
// A prompt prefix shared by every item is run once and its key/value
// gradients are summed before backpropagating through it.
BatchResult EvaluateBatch(const ModelParams& params, std::span<const BatchItem> items,
                          ModelGradients* grads);

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One AdamW update on a flat tensor at 1-based step t: decoupled weight
// decay p *= 1 - lr * wd, then p -= lr * m_hat / (sqrt(v_hat) + eps).
void AdamWStep(std::span<double> param, std::span<const double> grad,
               std::span<double> m, std::span<double> v, std::int64_t t, double lr,
               double weight_decay, const AdamWOptions& options);

class AdamW {
 public:
  AdamW(const ModelConfig& config, double weight_decay, AdamWOptions options = {});

  // Only TensorRole::kMatrix tensors are decayed.
  void Step(ModelParams& params, const ModelGradients& grads, double lr);
  std::int64_t steps() const { return t_; }

 private:
  AdamWOptions options_;
  double weight_decay_;
  ModelParams m_;
  ModelParams v_;
  std::int64_t t_ = 0;
};

double GlobalNorm(const ModelGradients& grads);
void ScaleInPlace(ModelGradients& grads, double factor);

struct Hyperparams {
  // 3e-4 leaves the default model on its loss plateau after three epochs of
  // the arithmetic corpus; 1e-3 learns it.
  double learning_rate = 1e-3;
  double warmup_fraction = 1.0 / 6.0;  // half an epoch of a three-epoch stage
  double weight_decay = 0.1;
  int epochs = 3;
  int batch_size = 32;
  double clip_norm = 1.0;  // <= 0 disables clipping
  std::uint64_t seed = 0;

  void Validate() const;
};

// Linear warmup over round(warmup_fraction * total_steps) steps, then linear
// decay to zero at total_steps.
double LearningRateAt(const Hyperparams& hyper, std::int64_t step, std::int64_t total_steps);

enum class Strategy { kSft, kSftTag, kKeyTag, kSftKeyTag };

std::string_view StrategyName(Strategy strategy);
// Accepts "SFT", "SFT-Tag", "Key-Tag", "SFTKey-Tag". Throws UsageError.
Strategy ParseStrategy(std::string_view name);

struct StageSpec {
  int index = 1;  // 1-based
  MaskScope scope = MaskScope::kFullResponse;
  TargetForm form = TargetForm::kTagged;
  Hyperparams hyper;
};

struct TrainPlan {
  Strategy strategy = Strategy::kSftKeyTag;
  Hyperparams stage1;
  Hyperparams stage2;  // used by the second SFTKey-Tag stage only

  void Validate() const;
  std::vector<StageSpec> Stages() const;
};

struct TrainLog {
  struct Step {
    int stage;
    std::int64_t step;  // 0-based within the stage
    int epoch;          // 1-based
    double lr;
    double loss_total;
    double loss_answer;
  };
  // Mean answer-level NLL on a held-out set; epoch 0 is before training.
  struct Snapshot {
    int stage;
    int epoch;
    std::int64_t step;
    double answer_nll;
  };
  std::vector<Step> steps;
  std::vector<Snapshot> snapshots;

  // Columns: stage,step,epoch,lr,loss_total,loss_answer
  void WriteCsv(const std::filesystem::path& path) const;
  // Columns: stage,epoch,step,answer_nll
  void WriteSnapshotsCsv(const std::filesystem::path& path) const;
};

// Held-out examples scored with the answer-span mask at the start of each
// stage and after every epoch.
struct StageMonitor {
  std::span<const TaggedExample> examples;
  TargetForm form = TargetForm::kTagged;
  int batch_size = 32;
};

// Mean over examples of the answer-span NLL.
double MeanAnswerNll(const ModelParams& params, std::span<const TaggedExample> examples,
                     TargetForm form, int batch_size = 32);

struct StageHooks {
  std::function<void(const StageSpec&, const ModelParams&)> on_stage_begin;
  std::function<void(const StageSpec&, const ModelParams&)> on_stage_end;
  std::function<void(const StageSpec&, std::span<const BatchItem>)> on_batch;
};

// AdamW over `epochs` deterministic shuffles of `dataset`. Each step logs the
// batch loss and the answer-span loss at the pre-update parameters. Throws
// DivergenceError on a non-finite loss.
ModelParams TrainStage(ModelParams params, std::span<const TaggedExample> dataset,
                       const StageSpec& stage, TrainLog& log,
                       const StageMonitor* monitor = nullptr,
                       const StageHooks* hooks = nullptr);

struct StrategyResult {
  ModelParams params;
  TrainLog log;
};

// Runs every stage of the plan, each stage starting from the previous
// stage's final parameters.
StrategyResult RunStrategy(const TrainPlan& plan, std::span<const TaggedExample> corpus,
                           ModelParams initial, const StageHooks* hooks = nullptr,
                           const StageMonitor* monitor = nullptr);
StrategyResult RunStrategy(const TrainPlan& plan, std::span<const TaggedExample> corpus,
                           const ModelConfig& config, const StageHooks* hooks = nullptr,
                           const StageMonitor* monitor = nullptr);

}  // namespace keytune

#endif  // KEYTUNE_TRAINING_H_
