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

#include "keytune/model.h"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>

#include "keytune/error.h"

namespace keytune {
namespace {

constexpr double kNormEps = 1e-5;
constexpr char kCheckpointMagic[8] = {'K', 'T', 'C', 'K', 'P', 'T', '0', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

Matrix Zero(int rows, int cols) { return Matrix::Zero(rows, cols); }

void AddRowBias(Matrix& m, const Matrix& bias) { m.rowwise() += bias.row(0); }

void LayerNormForward(const Matrix& x, const Matrix& gain, const Matrix& bias,
                      Matrix& xhat, Eigen::VectorXd& rstd, Matrix& out) {
  const Eigen::Index rows = x.rows();
  xhat.resize(rows, x.cols());
  rstd.resize(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mean = x.row(r).mean();
    xhat.row(r) = x.row(r).array() - mean;
    const double var = xhat.row(r).squaredNorm() / static_cast<double>(x.cols());
    rstd[r] = 1.0 / std::sqrt(var + kNormEps);
    xhat.row(r) *= rstd[r];
  }
  out = xhat.array().rowwise() * gain.row(0).array();
  AddRowBias(out, bias);
}

Matrix LayerNormBackward(const Matrix& dout, const Matrix& xhat,
                         const Eigen::VectorXd& rstd, const Matrix& gain,
                         Matrix& dgain, Matrix& dbias) {
  dgain.row(0) += (dout.array() * xhat.array()).colwise().sum().matrix();
  dbias.row(0) += dout.colwise().sum();
  Matrix dxhat = dout.array().rowwise() * gain.row(0).array();
  Matrix dx(dout.rows(), dout.cols());
  const double n = static_cast<double>(dout.cols());
  for (Eigen::Index r = 0; r < dout.rows(); ++r) {
    const double mean_d = dxhat.row(r).sum() / n;
    const double mean_dx = dxhat.row(r).dot(xhat.row(r)) / n;
    dx.row(r) = rstd[r] * (dxhat.row(r).array() - mean_d - xhat.row(r).array() * mean_dx);
  }
  return dx;
}

// tanh approximation of GELU.
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluK = 0.044715;

// tanh(c * (x + k x^3)) written as 1 - 2 / (exp(2u) + 1) so that it goes
// through the vectorized exp.
Eigen::ArrayXXd GeluTanh(const Matrix& x) {
  const Eigen::ArrayXXd a = x.array();
  const Eigen::ArrayXXd u2 = (2.0 * kGeluC) * (a + kGeluK * a.cube());
  return 1.0 - 2.0 / (u2.exp() + 1.0);
}

Matrix Gelu(const Matrix& x) { return (0.5 * x.array() * (1.0 + GeluTanh(x))).matrix(); }

Matrix GeluGrad(const Matrix& x) {
  const Eigen::ArrayXXd t = GeluTanh(x);
  const Eigen::ArrayXXd a = x.array();
  return (0.5 * (1.0 + t) +
          0.5 * a * (1.0 - t.square()) * kGeluC * (1.0 + 3.0 * kGeluK * a.square()))
      .matrix();
}

// Row i sees the first past + i + 1 columns. Hidden entries are written as
// exact zeros; a vectorized exp(-inf) can return a subnormal instead, and
// subnormals make the following products many times slower.
void CausalSoftmaxRowsInPlace(Matrix& m, int past) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const Eigen::Index n = past + r + 1;
    auto visible = m.row(r).head(n);
    const double mx = visible.maxCoeff();
    visible = (visible.array() - mx).exp();
    visible /= visible.sum();
    m.row(r).tail(m.cols() - n).setZero();
  }
}

template <typename T>
void WritePod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T ReadPod(std::istream& in, const std::string& what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DataError("truncated checkpoint while reading " + what);
  return v;
}

}  // namespace

void ModelConfig::Validate() const {
  if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || vocab_size < 1 ||
      max_seq_len < 1) {
    throw UsageError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw UsageError("d_model (" + std::to_string(d_model) + ") is not divisible by n_heads (" +
                     std::to_string(n_heads) + ")");
  }
}

ModelParams ModelParams::Zeros(const ModelConfig& config) {
  config.Validate();
  const int d = config.d_model, f = config.d_ff;
  ModelParams p;
  p.config = config;
  p.token_embedding = Zero(config.vocab_size, d);
  p.position_embedding = Zero(config.max_seq_len, d);
  p.layers.resize(config.n_layers);
  for (LayerParams& l : p.layers) {
    l.ln1_gain = Zero(1, d);
    l.ln1_bias = Zero(1, d);
    l.attn_q = Zero(d, d);
    l.attn_q_bias = Zero(1, d);
    l.attn_k = Zero(d, d);
    l.attn_k_bias = Zero(1, d);
    l.attn_v = Zero(d, d);
    l.attn_v_bias = Zero(1, d);
    l.attn_out = Zero(d, d);
    l.attn_out_bias = Zero(1, d);
    l.ln2_gain = Zero(1, d);
    l.ln2_bias = Zero(1, d);
    l.ff_up = Zero(d, f);
    l.ff_up_bias = Zero(1, f);
    l.ff_down = Zero(f, d);
    l.ff_down_bias = Zero(1, d);
  }
  p.final_norm_gain = Zero(1, d);
  p.final_norm_bias = Zero(1, d);
  p.unembedding = Zero(d, config.vocab_size);
  return p;
}

std::size_t ModelParams::ParameterCount() const {
  std::size_t n = 0;
  ForEachTensor([&](std::string_view, const Matrix& m, TensorRole) { n += m.size(); });
  return n;
}

bool ModelParams::AllFinite() const {
  bool ok = true;
  ForEachTensor([&](std::string_view, const Matrix& m, TensorRole) {
    ok = ok && m.allFinite();
  });
  return ok;
}

bool ModelParams::BitwiseEqual(const ModelParams& other) const {
  if (!(config == other.config)) return false;
  std::vector<const Matrix*> mine, theirs;
  ForEachTensor([&](std::string_view, const Matrix& m, TensorRole) { mine.push_back(&m); });
  other.ForEachTensor(
      [&](std::string_view, const Matrix& m, TensorRole) { theirs.push_back(&m); });
  if (mine.size() != theirs.size()) return false;
  for (std::size_t i = 0; i < mine.size(); ++i) {
    const Matrix& a = *mine[i];
    const Matrix& b = *theirs[i];
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    if (std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) != 0) return false;
  }
  return true;
}

ModelParams InitParams(const ModelConfig& config) {
  ModelParams p = ModelParams::Zeros(config);
  std::mt19937_64 rng(config.init_seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  const double residual_scale = 1.0 / std::sqrt(2.0 * config.n_layers);
  p.ForEachTensor([&](std::string_view name, Matrix& m, TensorRole role) {
    if (role == TensorRole::kNorm) {
      if (name.ends_with("gain")) m.setOnes();
      return;
    }
    if (role == TensorRole::kBias) return;
    const bool residual = name.ends_with("attn_out") || name.ends_with("ff_down");
    const double scale = residual ? residual_scale : 1.0;
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * normal(rng);
  });
  return p;
}

KeyValueGradients KeyValueGradients::Zeros(const ModelConfig& config, int length) {
  KeyValueGradients g;
  g.keys.assign(config.n_layers, Zero(length, config.d_model));
  g.values.assign(config.n_layers, Zero(length, config.d_model));
  return g;
}

Matrix LogSoftmaxRows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    const double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
    out.row(r) = logits.row(r).array() - lse;
  }
  return out;
}

ForwardTrace Forward(const ModelParams& params, std::span<const TokenId> ids,
                     std::shared_ptr<const KeyValueCache> past, bool compute_logits) {
  const ModelConfig& cfg = params.config;
  const int L = static_cast<int>(ids.size());
  const int P = past ? past->length : 0;
  if (L == 0) throw DataError("forward called on an empty sequence");
  if (P + L > cfg.max_seq_len) {
    throw DataError("sequence length " + std::to_string(P + L) + " exceeds max_seq_len " +
                    std::to_string(cfg.max_seq_len));
  }
  if (past && static_cast<int>(past->keys.size()) != cfg.n_layers) {
    throw UsageError("key/value cache does not match the model depth");
  }
  for (TokenId id : ids) {
    if (id < 0 || id >= cfg.vocab_size) {
      throw DataError("token id " + std::to_string(id) + " is outside the vocabulary");
    }
  }
  const int d = cfg.d_model;
  const int dh = d / cfg.n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  ForwardTrace trace;
  trace.params = &params;
  trace.ids.assign(ids.begin(), ids.end());
  trace.start_pos = P;
  trace.past = std::move(past);
  trace.layers.resize(cfg.n_layers);

  Matrix x(L, d);
  for (int t = 0; t < L; ++t) {
    x.row(t) = params.token_embedding.row(ids[t]) + params.position_embedding.row(P + t);
  }

  for (int li = 0; li < cfg.n_layers; ++li) {
    const LayerParams& w = params.layers[li];
    LayerTrace& lt = trace.layers[li];
    lt.input = x;
    LayerNormForward(lt.input, w.ln1_gain, w.ln1_bias, lt.ln1_xhat, lt.ln1_rstd, lt.ln1_out);
    lt.q.noalias() = lt.ln1_out * w.attn_q;
    AddRowBias(lt.q, w.attn_q_bias);
    lt.k.noalias() = lt.ln1_out * w.attn_k;
    AddRowBias(lt.k, w.attn_k_bias);
    lt.v.noalias() = lt.ln1_out * w.attn_v;
    AddRowBias(lt.v, w.attn_v_bias);

    lt.attn_concat.setZero(L, d);
    lt.probs.resize(cfg.n_heads);
    for (int h = 0; h < cfg.n_heads; ++h) {
      const auto qh = lt.q.middleCols(h * dh, dh);
      Matrix& s = lt.probs[h];
      s.resize(L, P + L);
      if (P > 0) {
        s.leftCols(P).noalias() = qh * trace.past->keys[li].middleCols(h * dh, dh).transpose();
      }
      s.rightCols(L).noalias() = qh * lt.k.middleCols(h * dh, dh).transpose();
      s *= scale;
      CausalSoftmaxRowsInPlace(s, P);
      auto out = lt.attn_concat.middleCols(h * dh, dh);
      if (P > 0) {
        out.noalias() += s.leftCols(P) * trace.past->values[li].middleCols(h * dh, dh);
      }
      out.noalias() += s.rightCols(L) * lt.v.middleCols(h * dh, dh);
    }
    lt.mid = lt.input;
    lt.mid.noalias() += lt.attn_concat * w.attn_out;
    AddRowBias(lt.mid, w.attn_out_bias);

    LayerNormForward(lt.mid, w.ln2_gain, w.ln2_bias, lt.ln2_xhat, lt.ln2_rstd, lt.ln2_out);
    lt.ff_pre.noalias() = lt.ln2_out * w.ff_up;
    AddRowBias(lt.ff_pre, w.ff_up_bias);
    lt.ff_act = Gelu(lt.ff_pre);
    x = lt.mid;
    x.noalias() += lt.ff_act * w.ff_down;
    AddRowBias(x, w.ff_down_bias);
  }

  LayerNormForward(x, params.final_norm_gain, params.final_norm_bias, trace.final_xhat,
                   trace.final_rstd, trace.final_out);
  if (compute_logits) trace.logits.noalias() = trace.final_out * params.unembedding;
  return trace;
}

std::shared_ptr<KeyValueCache> ExtendCache(const ForwardTrace& trace) {
  auto cache = std::make_shared<KeyValueCache>();
  const int P = trace.past ? trace.past->length : 0;
  const int L = trace.length();
  cache->length = P + L;
  for (std::size_t li = 0; li < trace.layers.size(); ++li) {
    const LayerTrace& lt = trace.layers[li];
    Matrix k(P + L, lt.k.cols()), v(P + L, lt.v.cols());
    if (P > 0) {
      k.topRows(P) = trace.past->keys[li];
      v.topRows(P) = trace.past->values[li];
    }
    k.bottomRows(L) = lt.k;
    v.bottomRows(L) = lt.v;
    cache->keys.push_back(std::move(k));
    cache->values.push_back(std::move(v));
  }
  return cache;
}

void BackwardAccumulate(const ModelParams& params, const ForwardTrace& trace,
                        const Matrix& logit_grads, ModelGradients& grads,
                        const KeyValueGradients* own_kv_grads,
                        KeyValueGradients* past_kv_grads) {
  const ModelConfig& cfg = params.config;
  if (trace.params != &params || trace.layers.size() != params.layers.size()) {
    throw UsageError("mismatched trace: backward called with different parameters");
  }
  if (!(grads.config == cfg)) throw UsageError("gradient buffer does not match the model");
  const int L = trace.length();
  const int P = trace.start_pos;
  const bool has_logit_grads = logit_grads.size() > 0;
  if (has_logit_grads &&
      (logit_grads.rows() != L || logit_grads.cols() != cfg.vocab_size ||
       trace.logits.rows() != L)) {
    throw UsageError("mismatched trace: logit gradient shape does not match the forward pass");
  }
  if (own_kv_grads && (static_cast<int>(own_kv_grads->keys.size()) != cfg.n_layers ||
                       own_kv_grads->keys[0].rows() != L)) {
    throw UsageError("mismatched trace: key/value gradient shape");
  }
  if (past_kv_grads && P > 0 && past_kv_grads->keys[0].rows() != P) {
    throw UsageError("mismatched trace: past key/value gradient shape");
  }
  const int d = cfg.d_model;
  const int dh = d / cfg.n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix dx = Matrix::Zero(L, d);
  if (has_logit_grads) {
    grads.unembedding.noalias() += trace.final_out.transpose() * logit_grads;
    Matrix dfinal = logit_grads * params.unembedding.transpose();
    dx = LayerNormBackward(dfinal, trace.final_xhat, trace.final_rstd, params.final_norm_gain,
                           grads.final_norm_gain, grads.final_norm_bias);
  }

  for (int li = cfg.n_layers - 1; li >= 0; --li) {
    const LayerParams& w = params.layers[li];
    LayerParams& g = grads.layers[li];
    const LayerTrace& lt = trace.layers[li];

    // Feed-forward block.
    g.ff_down.noalias() += lt.ff_act.transpose() * dx;
    g.ff_down_bias.row(0) += dx.colwise().sum();
    Matrix dpre = (dx * w.ff_down.transpose()).array() * GeluGrad(lt.ff_pre).array();
    g.ff_up.noalias() += lt.ln2_out.transpose() * dpre;
    g.ff_up_bias.row(0) += dpre.colwise().sum();
    Matrix dln2 = dpre * w.ff_up.transpose();
    Matrix dmid = dx + LayerNormBackward(dln2, lt.ln2_xhat, lt.ln2_rstd, w.ln2_gain,
                                         g.ln2_gain, g.ln2_bias);

    // Attention block.
    g.attn_out.noalias() += lt.attn_concat.transpose() * dmid;
    g.attn_out_bias.row(0) += dmid.colwise().sum();
    Matrix dconcat = dmid * w.attn_out.transpose();

    Matrix dq(L, d), dk(L, d), dv(L, d);
    if (own_kv_grads) {
      dk = own_kv_grads->keys[li];
      dv = own_kv_grads->values[li];
    } else {
      dk.setZero();
      dv.setZero();
    }
    const bool want_past = past_kv_grads != nullptr && P > 0;
    for (int h = 0; h < cfg.n_heads; ++h) {
      const Matrix& probs = lt.probs[h];
      const auto dout = dconcat.middleCols(h * dh, dh);
      const auto qh = lt.q.middleCols(h * dh, dh);
      Matrix dprobs(L, P + L);
      if (P > 0) {
        const auto vpast = trace.past->values[li].middleCols(h * dh, dh);
        dprobs.leftCols(P).noalias() = dout * vpast.transpose();
        if (want_past) {
          past_kv_grads->values[li].middleCols(h * dh, dh).noalias() +=
              probs.leftCols(P).transpose() * dout;
        }
      }
      dprobs.rightCols(L).noalias() = dout * lt.v.middleCols(h * dh, dh).transpose();
      dv.middleCols(h * dh, dh).noalias() += probs.rightCols(L).transpose() * dout;

      const Eigen::VectorXd row_dot = (dprobs.array() * probs.array()).rowwise().sum();
      Matrix dscores = probs.array() * (dprobs.colwise() - row_dot).array();
      dscores *= scale;

      auto dqh = dq.middleCols(h * dh, dh);
      dqh.noalias() = dscores.rightCols(L) * lt.k.middleCols(h * dh, dh);
      if (P > 0) {
        dqh.noalias() += dscores.leftCols(P) * trace.past->keys[li].middleCols(h * dh, dh);
        if (want_past) {
          past_kv_grads->keys[li].middleCols(h * dh, dh).noalias() +=
              dscores.leftCols(P).transpose() * qh;
        }
      }
      dk.middleCols(h * dh, dh).noalias() += dscores.rightCols(L).transpose() * qh;
    }

    g.attn_q.noalias() += lt.ln1_out.transpose() * dq;
    g.attn_q_bias.row(0) += dq.colwise().sum();
    g.attn_k.noalias() += lt.ln1_out.transpose() * dk;
    g.attn_k_bias.row(0) += dk.colwise().sum();
    g.attn_v.noalias() += lt.ln1_out.transpose() * dv;
    g.attn_v_bias.row(0) += dv.colwise().sum();
    Matrix dln1 = dq * w.attn_q.transpose();
    dln1.noalias() += dk * w.attn_k.transpose();
    dln1.noalias() += dv * w.attn_v.transpose();
    dx = dmid + LayerNormBackward(dln1, lt.ln1_xhat, lt.ln1_rstd, w.ln1_gain, g.ln1_gain,
                                  g.ln1_bias);
  }

  for (int t = 0; t < L; ++t) {
    grads.token_embedding.row(trace.ids[t]) += dx.row(t);
    grads.position_embedding.row(P + t) += dx.row(t);
  }
}

ModelGradients Backward(const ModelParams& params, const ForwardTrace& trace,
                        const Matrix& logit_grads) {
  ModelGradients grads = ModelParams::Zeros(params.config);
  BackwardAccumulate(params, trace, logit_grads, grads);
  return grads;
}

void SaveCheckpoint(const std::filesystem::path& path, const ModelParams& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  WritePod<std::uint32_t>(out, kCheckpointVersion);
  const ModelConfig& c = params.config;
  for (std::int64_t v : {std::int64_t{c.n_layers}, std::int64_t{c.d_model},
                         std::int64_t{c.n_heads}, std::int64_t{c.d_ff},
                         std::int64_t{c.vocab_size}, std::int64_t{c.max_seq_len}}) {
    WritePod(out, v);
  }
  WritePod<std::uint64_t>(out, c.init_seed);
  std::uint32_t count = 0;
  params.ForEachTensor([&](std::string_view, const Matrix&, TensorRole) { ++count; });
  WritePod(out, count);
  params.ForEachTensor([&](std::string_view name, const Matrix& m, TensorRole) {
    WritePod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    WritePod<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
    WritePod<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(sizeof(double) * m.size()));
  });
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

ModelParams LoadCheckpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint " + path.string());
  char magic[sizeof(kCheckpointMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw DataError(path.string() + " is not a keytune checkpoint");
  }
  if (ReadPod<std::uint32_t>(in, "version") != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version in " + path.string());
  }
  ModelConfig c;
  c.n_layers = static_cast<int>(ReadPod<std::int64_t>(in, "n_layers"));
  c.d_model = static_cast<int>(ReadPod<std::int64_t>(in, "d_model"));
  c.n_heads = static_cast<int>(ReadPod<std::int64_t>(in, "n_heads"));
  c.d_ff = static_cast<int>(ReadPod<std::int64_t>(in, "d_ff"));
  c.vocab_size = static_cast<int>(ReadPod<std::int64_t>(in, "vocab_size"));
  c.max_seq_len = static_cast<int>(ReadPod<std::int64_t>(in, "max_seq_len"));
  c.init_seed = ReadPod<std::uint64_t>(in, "init_seed");
  ModelParams p = ModelParams::Zeros(c);
  const auto count = ReadPod<std::uint32_t>(in, "tensor count");
  std::uint32_t expected = 0;
  p.ForEachTensor([&](std::string_view, const Matrix&, TensorRole) { ++expected; });
  if (count != expected) throw DataError("checkpoint tensor count mismatch");
  p.ForEachTensor([&](std::string_view name, Matrix& m, TensorRole) {
    const auto len = ReadPod<std::uint32_t>(in, "name length");
    std::string stored(len, '\0');
    in.read(stored.data(), len);
    const auto rows = ReadPod<std::uint64_t>(in, "rows");
    const auto cols = ReadPod<std::uint64_t>(in, "cols");
    if (!in || stored != name || rows != static_cast<std::uint64_t>(m.rows()) ||
        cols != static_cast<std::uint64_t>(m.cols())) {
      throw DataError("checkpoint tensor " + std::string(name) + " has unexpected name or shape");
    }
    in.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double) * m.size()));
    if (!in) throw DataError("truncated checkpoint tensor " + std::string(name));
  });
  return p;
}

}  // namespace keytune
