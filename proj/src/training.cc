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

#include "keytune/training.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>

#include "keytune/error.h"

namespace keytune {
namespace {

TokenIds InputSequence(const TaggedExample& example, TargetForm form) {
  const TokenIds& targets = Targets(example, form);
  TokenIds seq = example.prompt_ids;
  seq.insert(seq.end(), targets.begin(), targets.end() - 1);
  return seq;
}

void CheckMask(const LossMask& mask, const TokenIds& targets, const char* what) {
  if (mask.weights.size() != targets.size()) {
    throw UsageError(std::string(what) + " has " + std::to_string(mask.weights.size()) +
                     " entries but the target has " + std::to_string(targets.size()));
  }
  if (mask.total() <= 0.0) throw UsageError(std::string(what) + " has no nonzero entry");
}

struct TargetScore {
  double loss = 0.0;
  double answer_loss = 0.0;
  std::vector<double> nll;
};

// Scores rows [first_row, first_row + n) of `logits`, which predict the n
// target tokens. When `dlogits` is non-null the gradient of
// grad_scale * loss is written into the same rows.
TargetScore ScoreTargets(const Matrix& logits, Eigen::Index first_row, const TokenIds& targets,
                         const LossMask& mask, const LossMask* answer_mask, double grad_scale,
                         Matrix* dlogits) {
  const Eigen::Index n = static_cast<Eigen::Index>(targets.size());
  const Matrix logp = LogSoftmaxRows(logits.middleRows(first_row, n));
  TargetScore s;
  s.nll.resize(n);
  const double total = mask.total();
  double answer_total = 0.0;
  for (Eigen::Index t = 0; t < n; ++t) {
    s.nll[t] = -logp(t, targets[t]);
    s.loss += mask.weights[t] * s.nll[t];
    if (answer_mask) {
      s.answer_loss += answer_mask->weights[t] * s.nll[t];
      answer_total += answer_mask->weights[t];
    }
  }
  s.loss /= total;
  if (answer_mask && answer_total > 0) s.answer_loss /= answer_total;
  if (dlogits) {
    for (Eigen::Index t = 0; t < n; ++t) {
      const double w = mask.weights[t];
      if (w == 0.0) continue;
      auto row = dlogits->row(first_row + t);
      row = logp.row(t).array().exp() * (w * grad_scale / total);
      row(targets[t]) -= w * grad_scale / total;
    }
  }
  return s;
}

std::size_t SharedPrefixLength(std::span<const TokenIds> seqs, std::size_t cap) {
  std::size_t n = std::min(cap, seqs[0].size());
  for (const TokenIds& s : seqs.subspan(1)) {
    std::size_t i = 0;
    const std::size_t limit = std::min(n, s.size());
    while (i < limit && s[i] == seqs[0][i]) ++i;
    n = i;
  }
  return n;
}

std::string FormatDouble(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

const TokenIds& Targets(const TaggedExample& example, TargetForm form) {
  return form == TargetForm::kTagged ? example.target_ids : example.untagged_target_ids;
}

double LossMask::total() const { return std::accumulate(weights.begin(), weights.end(), 0.0); }

LossMask BuildMask(const TaggedExample& example, MaskScope scope, TargetForm form) {
  const std::size_t n = Targets(example, form).size();
  if (scope == MaskScope::kFullResponse) return LossMask{std::vector<double>(n, 1.0)};
  if (form == TargetForm::kUntagged) {
    throw UsageError("answer-only masking needs tagged targets; untagged targets have no "
                     "</Thinking> boundary");
  }
  LossMask mask{std::vector<double>(n, 0.0)};
  for (std::size_t t = example.boundary_t + 1; t < n; ++t) mask.weights[t] = 1.0;
  return mask;
}

LossMask AnswerSpanMask(const TaggedExample& example, TargetForm form) {
  if (form == TargetForm::kTagged) return BuildMask(example, MaskScope::kAnswerOnly, form);
  const std::size_t n = example.untagged_target_ids.size();
  LossMask mask{std::vector<double>(n, 0.0)};
  for (std::size_t t = n - example.answer_length() - 1; t < n; ++t) mask.weights[t] = 1.0;
  return mask;
}

MaskedNllResult MaskedNll(const ModelParams& params, const TaggedExample& example,
                          const LossMask& mask, TargetForm form, bool with_gradients) {
  const TokenIds& targets = Targets(example, form);
  CheckMask(mask, targets, "loss mask");
  const TokenIds seq = InputSequence(example, form);
  const ForwardTrace trace = Forward(params, seq);
  const Eigen::Index first_row = static_cast<Eigen::Index>(example.prompt_ids.size()) - 1;
  Matrix dlogits;
  if (with_gradients) dlogits = Matrix::Zero(trace.logits.rows(), trace.logits.cols());
  TargetScore s = ScoreTargets(trace.logits, first_row, targets, mask, nullptr, 1.0,
                               with_gradients ? &dlogits : nullptr);
  MaskedNllResult out;
  out.loss = s.loss;
  const double total = mask.total();
  out.position_loss.resize(targets.size());
  for (std::size_t t = 0; t < targets.size(); ++t) {
    out.position_loss[t] = mask.weights[t] * s.nll[t] / total;
  }
  if (with_gradients) out.gradients = Backward(params, trace, dlogits);
  return out;
}

BatchResult EvaluateBatch(const ModelParams& params, std::span<const BatchItem> items,
                          ModelGradients* grads) {
  if (items.empty()) throw UsageError("empty batch");
  const std::size_t batch = items.size();
  std::vector<TokenIds> seqs;
  seqs.reserve(batch);
  std::size_t min_prompt = SIZE_MAX;
  for (const BatchItem& item : items) {
    const TokenIds& targets = Targets(*item.example, item.form);
    CheckMask(item.mask, targets, "loss mask");
    CheckMask(item.answer_mask, targets, "answer mask");
    if (item.example->prompt_ids.empty()) throw UsageError("prompt must contain BOS");
    seqs.push_back(InputSequence(*item.example, item.form));
    min_prompt = std::min(min_prompt, item.example->prompt_ids.size());
  }

  // The shared prefix stops before the last prompt position so that no
  // scored logit lives in it.
  const std::size_t shared = batch > 1 ? SharedPrefixLength(seqs, min_prompt - 1) : 0;
  const int P = static_cast<int>(shared);

  ForwardTrace prefix_trace;
  std::shared_ptr<const KeyValueCache> prefix_cache;
  KeyValueGradients prefix_grads;
  if (P > 0) {
    prefix_trace = Forward(params, std::span<const TokenId>(seqs[0]).first(shared), nullptr,
                           /*compute_logits=*/false);
    prefix_cache = ExtendCache(prefix_trace);
    if (grads) prefix_grads = KeyValueGradients::Zeros(params.config, P);
  }

  BatchResult result;
  result.example_loss.resize(batch);
  result.example_answer_loss.resize(batch);
  const double grad_scale = 1.0 / static_cast<double>(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    const BatchItem& item = items[i];
    const TokenIds& targets = Targets(*item.example, item.form);
    const ForwardTrace trace =
        Forward(params, std::span<const TokenId>(seqs[i]).subspan(shared), prefix_cache);
    const Eigen::Index first_row =
        static_cast<Eigen::Index>(item.example->prompt_ids.size()) - 1 - P;
    Matrix dlogits;
    if (grads) dlogits = Matrix::Zero(trace.logits.rows(), trace.logits.cols());
    const TargetScore s = ScoreTargets(trace.logits, first_row, targets, item.mask,
                                       &item.answer_mask, grad_scale, grads ? &dlogits : nullptr);
    result.example_loss[i] = s.loss;
    result.example_answer_loss[i] = s.answer_loss;
    if (grads) {
      BackwardAccumulate(params, trace, dlogits, *grads, nullptr, P > 0 ? &prefix_grads : nullptr);
    }
  }
  if (grads && P > 0) {
    BackwardAccumulate(params, prefix_trace, Matrix(), *grads, &prefix_grads, nullptr);
  }
  for (std::size_t i = 0; i < batch; ++i) {
    result.loss += result.example_loss[i];
    result.answer_loss += result.example_answer_loss[i];
  }
  result.loss /= static_cast<double>(batch);
  result.answer_loss /= static_cast<double>(batch);
  return result;
}

void AdamWStep(std::span<double> param, std::span<const double> grad, std::span<double> m,
               std::span<double> v, std::int64_t t, double lr, double weight_decay,
               const AdamWOptions& o) {
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(t));
  const double decay = 1.0 - lr * weight_decay;
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * grad[i];
    v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * grad[i] * grad[i];
    const double m_hat = m[i] / c1;
    const double v_hat = v[i] / c2;
    param[i] = param[i] * decay - lr * m_hat / (std::sqrt(v_hat) + o.eps);
  }
}

AdamW::AdamW(const ModelConfig& config, double weight_decay, AdamWOptions options)
    : options_(options),
      weight_decay_(weight_decay),
      m_(ModelParams::Zeros(config)),
      v_(ModelParams::Zeros(config)) {}

void AdamW::Step(ModelParams& params, const ModelGradients& grads, double lr) {
  ++t_;
  std::vector<Matrix*> ps, ms, vs;
  std::vector<const Matrix*> gs;
  std::vector<bool> decayed;
  params.ForEachTensor([&](std::string_view, Matrix& p, TensorRole role) {
    ps.push_back(&p);
    decayed.push_back(role == TensorRole::kMatrix);
  });
  grads.ForEachTensor([&](std::string_view, const Matrix& g, TensorRole) { gs.push_back(&g); });
  m_.ForEachTensor([&](std::string_view, Matrix& m, TensorRole) { ms.push_back(&m); });
  v_.ForEachTensor([&](std::string_view, Matrix& v, TensorRole) { vs.push_back(&v); });
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto n = static_cast<std::size_t>(ps[i]->size());
    AdamWStep({ps[i]->data(), n}, {gs[i]->data(), n}, {ms[i]->data(), n}, {vs[i]->data(), n},
              t_, lr, decayed[i] ? weight_decay_ : 0.0, options_);
  }
}

double GlobalNorm(const ModelGradients& grads) {
  double sq = 0.0;
  grads.ForEachTensor([&](std::string_view, const Matrix& g, TensorRole) { sq += g.squaredNorm(); });
  return std::sqrt(sq);
}

void ScaleInPlace(ModelGradients& grads, double factor) {
  grads.ForEachTensor([&](std::string_view, Matrix& g, TensorRole) { g *= factor; });
}

void Hyperparams::Validate() const {
  if (!(learning_rate >= 0.0)) throw UsageError("learning rate must be >= 0");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) {
    throw UsageError("warmup fraction must lie in [0, 1)");
  }
  if (epochs < 1) throw UsageError("epochs must be >= 1");
  if (batch_size < 1) throw UsageError("batch size must be >= 1");
  if (weight_decay < 0.0) throw UsageError("weight decay must be >= 0");
}

double LearningRateAt(const Hyperparams& hyper, std::int64_t step, std::int64_t total_steps) {
  const auto warmup = static_cast<std::int64_t>(
      std::llround(hyper.warmup_fraction * static_cast<double>(total_steps)));
  if (step < warmup) {
    return hyper.learning_rate * static_cast<double>(step + 1) / static_cast<double>(warmup);
  }
  return hyper.learning_rate * static_cast<double>(total_steps - step) /
         static_cast<double>(total_steps - warmup);
}

std::string_view StrategyName(Strategy strategy) {
  switch (strategy) {
    case Strategy::kSft: return "SFT";
    case Strategy::kSftTag: return "SFT-Tag";
    case Strategy::kKeyTag: return "Key-Tag";
    case Strategy::kSftKeyTag: return "SFTKey-Tag";
  }
  return "unknown";
}

Strategy ParseStrategy(std::string_view name) {
  for (Strategy s : {Strategy::kSft, Strategy::kSftTag, Strategy::kKeyTag, Strategy::kSftKeyTag}) {
    if (name == StrategyName(s)) return s;
  }
  throw UsageError("unknown strategy \"" + std::string(name) +
                   "\" (expected SFT, SFT-Tag, Key-Tag or SFTKey-Tag)");
}

void TrainPlan::Validate() const {
  stage1.Validate();
  if (strategy == Strategy::kSftKeyTag) stage2.Validate();
}

std::vector<StageSpec> TrainPlan::Stages() const {
  switch (strategy) {
    case Strategy::kSft:
      return {{1, MaskScope::kFullResponse, TargetForm::kUntagged, stage1}};
    case Strategy::kSftTag:
      return {{1, MaskScope::kFullResponse, TargetForm::kTagged, stage1}};
    case Strategy::kKeyTag:
      return {{1, MaskScope::kAnswerOnly, TargetForm::kTagged, stage1}};
    case Strategy::kSftKeyTag:
      return {{1, MaskScope::kFullResponse, TargetForm::kTagged, stage1},
              {2, MaskScope::kAnswerOnly, TargetForm::kTagged, stage2}};
  }
  return {};
}

void TrainLog::WriteCsv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "stage,step,epoch,lr,loss_total,loss_answer\n";
  for (const Step& s : steps) {
    out << s.stage << ',' << s.step << ',' << s.epoch << ',' << FormatDouble(s.lr) << ','
        << FormatDouble(s.loss_total) << ',' << FormatDouble(s.loss_answer) << '\n';
  }
}

void TrainLog::WriteSnapshotsCsv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "stage,epoch,step,answer_nll\n";
  for (const Snapshot& s : snapshots) {
    out << s.stage << ',' << s.epoch << ',' << s.step << ',' << FormatDouble(s.answer_nll)
        << '\n';
  }
}

double MeanAnswerNll(const ModelParams& params, std::span<const TaggedExample> examples,
                     TargetForm form, int batch_size) {
  if (examples.empty()) throw UsageError("no examples to score");
  double sum = 0.0;
  std::vector<BatchItem> items;
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    const std::size_t end = std::min(examples.size(), start + batch_size);
    items.clear();
    for (std::size_t i = start; i < end; ++i) {
      LossMask span = AnswerSpanMask(examples[i], form);
      items.push_back({&examples[i], form, span, span});
    }
    const BatchResult r = EvaluateBatch(params, items, nullptr);
    for (double l : r.example_loss) sum += l;
  }
  return sum / static_cast<double>(examples.size());
}

ModelParams TrainStage(ModelParams params, std::span<const TaggedExample> dataset,
                       const StageSpec& stage, TrainLog& log, const StageMonitor* monitor,
                       const StageHooks* hooks) {
  const Hyperparams& hyper = stage.hyper;
  hyper.Validate();
  if (dataset.empty()) throw DataError("training dataset is empty");
  const std::size_t n = dataset.size();
  const auto batch_size = static_cast<std::size_t>(hyper.batch_size);
  const std::int64_t steps_per_epoch = static_cast<std::int64_t>((n + batch_size - 1) / batch_size);
  const std::int64_t total_steps = steps_per_epoch * hyper.epochs;

  std::vector<LossMask> masks, answer_masks;
  masks.reserve(n);
  answer_masks.reserve(n);
  for (const TaggedExample& ex : dataset) {
    masks.push_back(BuildMask(ex, stage.scope, stage.form));
    answer_masks.push_back(AnswerSpanMask(ex, stage.form));
  }

  auto snapshot = [&](int epoch, std::int64_t step) {
    if (!monitor || monitor->examples.empty()) return;
    log.snapshots.push_back({stage.index, epoch, step,
                             MeanAnswerNll(params, monitor->examples, monitor->form,
                                           monitor->batch_size)});
  };

  if (hooks && hooks->on_stage_begin) hooks->on_stage_begin(stage, params);
  snapshot(0, 0);

  AdamW optimizer(params.config, hyper.weight_decay);
  std::mt19937_64 rng(hyper.seed);
  std::vector<std::size_t> order(n);
  std::vector<BatchItem> items;
  std::int64_t step = 0;
  for (int epoch = 1; epoch <= hyper.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += batch_size, ++step) {
      const std::size_t end = std::min(n, start + batch_size);
      items.clear();
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t i = order[k];
        items.push_back({&dataset[i], stage.form, masks[i], answer_masks[i]});
      }
      if (hooks && hooks->on_batch) hooks->on_batch(stage, items);

      ModelGradients grads = ModelParams::Zeros(params.config);
      const BatchResult r = EvaluateBatch(params, items, &grads);
      const double norm = GlobalNorm(grads);
      if (!std::isfinite(r.loss) || !std::isfinite(norm)) {
        std::ostringstream msg;
        msg << "non-finite loss at stage " << stage.index << " step " << step << " (examples";
        for (std::size_t k = start; k < end; ++k) msg << ' ' << order[k];
        msg << ')';
        throw DivergenceError(msg.str());
      }
      if (hyper.clip_norm > 0.0 && norm > hyper.clip_norm) {
        ScaleInPlace(grads, hyper.clip_norm / norm);
      }
      const double lr = LearningRateAt(hyper, step, total_steps);
      log.steps.push_back({stage.index, step, epoch, lr, r.loss, r.answer_loss});
      optimizer.Step(params, grads, lr);
    }
    snapshot(epoch, step);
  }
  if (hooks && hooks->on_stage_end) hooks->on_stage_end(stage, params);
  return params;
}

StrategyResult RunStrategy(const TrainPlan& plan, std::span<const TaggedExample> corpus,
                           ModelParams initial, const StageHooks* hooks,
                           const StageMonitor* monitor) {
  plan.Validate();
  StrategyResult result{std::move(initial), {}};
  for (const StageSpec& stage : plan.Stages()) {
    std::optional<StageMonitor> staged;
    if (monitor) {
      staged = *monitor;
      staged->form = stage.form;
    }
    result.params = TrainStage(std::move(result.params), corpus, stage, result.log,
                               staged ? &*staged : nullptr, hooks);
  }
  return result;
}

StrategyResult RunStrategy(const TrainPlan& plan, std::span<const TaggedExample> corpus,
                           const ModelConfig& config, const StageHooks* hooks,
                           const StageMonitor* monitor) {
  return RunStrategy(plan, corpus, InitParams(config), hooks, monitor);
}

}  // namespace keytune
