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

#ifndef KEYTUNE_MODEL_H_
#define KEYTUNE_MODEL_H_

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "keytune/corpus.h"

namespace keytune {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
  int n_layers = 2;
  int d_model = 128;
  int n_heads = 4;
  int d_ff = 512;
  int vocab_size = 0;
  int max_seq_len = 640;
  std::uint64_t init_seed = 1;

  // Throws UsageError on non-positive sizes or d_model % n_heads != 0.
  void Validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct LayerParams {
  Matrix ln1_gain, ln1_bias;
  Matrix attn_q, attn_q_bias;
  Matrix attn_k, attn_k_bias;
  Matrix attn_v, attn_v_bias;
  Matrix attn_out, attn_out_bias;
  Matrix ln2_gain, ln2_bias;
  Matrix ff_up, ff_up_bias;
  Matrix ff_down, ff_down_bias;
};

// How a tensor is treated by the optimizer. Only kMatrix tensors are
// weight-decayed.
enum class TensorRole { kMatrix, kEmbedding, kNorm, kBias };

// Weights of a pre-LayerNorm decoder-only transformer with learned
// positional embeddings and an untied unembedding. Activations are row
// vectors: y = x * W + b. The same type holds gradients.
struct ModelParams {
  ModelConfig config;
  Matrix token_embedding;     // vocab_size x d_model
  Matrix position_embedding;  // max_seq_len x d_model
  std::vector<LayerParams> layers;
  Matrix final_norm_gain, final_norm_bias;
  Matrix unembedding;  // d_model x vocab_size

  static ModelParams Zeros(const ModelConfig& config);

  // Visits tensors in canonical order as f(name, matrix, role).
  template <typename F>
  void ForEachTensor(F&& f) {
    VisitTensors(*this, f);
  }
  template <typename F>
  void ForEachTensor(F&& f) const {
    VisitTensors(*this, f);
  }

  std::size_t ParameterCount() const;
  bool AllFinite() const;
  bool BitwiseEqual(const ModelParams& other) const;

 private:
  template <typename Self, typename F>
  static void VisitTensors(Self& self, F& f);
};

using ModelGradients = ModelParams;

// Normal(0, 0.02) weights with the residual output projections (attn_out,
// ff_down) scaled by 1/sqrt(2 * n_layers); zero biases, unit norm gains.
// Deterministic in config.init_seed.
ModelParams InitParams(const ModelConfig& config);

// Keys and values of every layer for the first `length` positions.
struct KeyValueCache {
  int length = 0;
  std::vector<Matrix> keys;    // per layer, length x d_model
  std::vector<Matrix> values;  // per layer, length x d_model
};

// Gradients with respect to a KeyValueCache, same shapes.
struct KeyValueGradients {
  std::vector<Matrix> keys;
  std::vector<Matrix> values;

  static KeyValueGradients Zeros(const ModelConfig& config, int length);
};

struct LayerTrace {
  Matrix input;
  Matrix ln1_xhat, ln1_out;
  Eigen::VectorXd ln1_rstd;
  Matrix q, k, v;
  std::vector<Matrix> probs;  // per head, L x (past + L)
  Matrix attn_concat;
  Matrix mid;
  Matrix ln2_xhat, ln2_out;
  Eigen::VectorXd ln2_rstd;
  Matrix ff_pre, ff_act;
};

// Activations of one forward call over a segment of positions
// [start_pos, start_pos + L), optionally attending to a cached past.
struct ForwardTrace {
  const ModelParams* params = nullptr;
  TokenIds ids;
  int start_pos = 0;
  std::shared_ptr<const KeyValueCache> past;
  std::vector<LayerTrace> layers;
  Matrix final_xhat, final_out;
  Eigen::VectorXd final_rstd;
  Matrix logits;  // L x vocab_size; empty when logits were not requested

  int length() const { return static_cast<int>(ids.size()); }
};

// Causal forward pass. Row t of trace.logits depends only on ids[0..t] and
// the cached past. Throws DataError for over-long sequences or
// out-of-vocabulary ids.
ForwardTrace Forward(const ModelParams& params, std::span<const TokenId> ids,
                     std::shared_ptr<const KeyValueCache> past = nullptr,
                     bool compute_logits = true);

// Cache covering the past of `trace` followed by its own positions.
std::shared_ptr<KeyValueCache> ExtendCache(const ForwardTrace& trace);

// Accumulates parameter gradients of a scalar loss into `grads`, given
// d loss / d logits (empty when the trace has no logits). `own_kv_grads`
// carries gradients reaching this segment's keys/values from later
// segments; gradients for the cached past are accumulated into
// `past_kv_grads` when provided. Throws UsageError on a mismatched trace.
void BackwardAccumulate(const ModelParams& params, const ForwardTrace& trace,
                        const Matrix& logit_grads, ModelGradients& grads,
                        const KeyValueGradients* own_kv_grads = nullptr,
                        KeyValueGradients* past_kv_grads = nullptr);

ModelGradients Backward(const ModelParams& params, const ForwardTrace& trace,
                        const Matrix& logit_grads);

// Row-wise log-softmax.
Matrix LogSoftmaxRows(const Matrix& logits);

// Binary checkpoint: magic, config, then named tensors with shapes.
// Round trips are bit-exact.
void SaveCheckpoint(const std::filesystem::path& path, const ModelParams& params);
ModelParams LoadCheckpoint(const std::filesystem::path& path);

template <typename Self, typename F>
void ModelParams::VisitTensors(Self& self, F& f) {
  f(std::string_view("token_embedding"), self.token_embedding, TensorRole::kEmbedding);
  f(std::string_view("position_embedding"), self.position_embedding, TensorRole::kEmbedding);
  for (std::size_t i = 0; i < self.layers.size(); ++i) {
    auto& l = self.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    auto visit = [&](const char* name, auto& m, TensorRole role) {
      const std::string full = p + name;
      f(std::string_view(full), m, role);
    };
    visit("ln1_gain", l.ln1_gain, TensorRole::kNorm);
    visit("ln1_bias", l.ln1_bias, TensorRole::kNorm);
    visit("attn_q", l.attn_q, TensorRole::kMatrix);
    visit("attn_q_bias", l.attn_q_bias, TensorRole::kBias);
    visit("attn_k", l.attn_k, TensorRole::kMatrix);
    visit("attn_k_bias", l.attn_k_bias, TensorRole::kBias);
    visit("attn_v", l.attn_v, TensorRole::kMatrix);
    visit("attn_v_bias", l.attn_v_bias, TensorRole::kBias);
    visit("attn_out", l.attn_out, TensorRole::kMatrix);
    visit("attn_out_bias", l.attn_out_bias, TensorRole::kBias);
    visit("ln2_gain", l.ln2_gain, TensorRole::kNorm);
    visit("ln2_bias", l.ln2_bias, TensorRole::kNorm);
    visit("ff_up", l.ff_up, TensorRole::kMatrix);
    visit("ff_up_bias", l.ff_up_bias, TensorRole::kBias);
    visit("ff_down", l.ff_down, TensorRole::kMatrix);
    visit("ff_down_bias", l.ff_down_bias, TensorRole::kBias);
  }
  f(std::string_view("final_norm_gain"), self.final_norm_gain, TensorRole::kNorm);
  f(std::string_view("final_norm_bias"), self.final_norm_bias, TensorRole::kNorm);
  f(std::string_view("unembedding"), self.unembedding, TensorRole::kMatrix);
}

}  // namespace keytune

#endif  // KEYTUNE_MODEL_H_
