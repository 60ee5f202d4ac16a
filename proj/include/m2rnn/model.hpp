// SPDX-License-Identifier: Apache-2.0
//
// Token model used by the experiments: embedding -> one recurrent mixer ->
// linear head. The mixer is an M2RNN block or one of the baselines.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "m2rnn/baselines.hpp"
#include "m2rnn/layer.hpp"
#include "m2rnn/optim.hpp"

namespace m2rnn {

enum class ModelKind { kM2rnn, kGru, kVectorRnn, kDiagLinear };

const char* model_kind_name(ModelKind kind);
ModelKind parse_model_kind(const std::string& name);

struct ModelConfig {
  ModelKind kind = ModelKind::kM2rnn;
  Index vocab = 6;
  Index classes = 6;
  Index model_dim = 32;
  double embed_std = 1.0;
  // M2RNN block; its model_dim is overwritten with model_dim above.
  LayerConfig layer;
  // GRU and vector-RNN width.
  Index hidden = 32;
  // Vector-RNN recurrent weights are uniform in +-gain/sqrt(hidden).
  double vector_gain = 1.0;
  // Diagonal linear RNN heads.
  Index diag_heads = 4, diag_key_dim = 8, diag_value_dim = 8;
  std::uint64_t seed = 0;

  void validate() const;
};

// Recurrent state entries carried per sequence.
Index model_state_size(const ModelConfig& cfg);

class SequenceModel {
 public:
  SequenceModel() = default;
  explicit SequenceModel(const ModelConfig& cfg);
  SequenceModel(const ModelConfig& cfg, ParamList params);

  const ModelConfig& config() const { return cfg_; }
  ParamList& params() { return params_; }
  const ParamList& params() const { return params_; }
  Index param_count() const { return param_list_size(params_); }
  Index state_size() const { return model_state_size(cfg_); }

  // One leaf per parameter, in params() order.
  std::vector<Var> add_leaves(Tape& tape) const;

  // tokens holds batch * steps ids, sequence-major. Returns logits
  // [batch * steps, classes].
  Var forward(Tape& tape, const std::vector<Var>& leaves, const std::vector<std::int64_t>& tokens,
              Index batch, Index steps) const;

  // Convenience: logits without keeping the tape.
  Tensor logits(const std::vector<std::int64_t>& tokens, Index batch, Index steps) const;

  // Keeps constrained parameters feasible after an optimizer step (forget
  // gate exponents stay positive).
  void project();

 private:
  ModelConfig cfg_;
  ParamList params_;
};

}  // namespace m2rnn
