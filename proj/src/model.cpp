// SPDX-License-Identifier: Apache-2.0
#include "m2rnn/model.hpp"

#include <cmath>
#include <random>
#include <span>

namespace m2rnn {

namespace {

constexpr double kMinGateAlpha = 1e-4;

Tensor normal_tensor(Shape shape, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, std);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = normal(rng);
  return t;
}

Tensor uniform_tensor(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = dist(rng);
  return t;
}

LayerConfig block_config(const ModelConfig& cfg) {
  LayerConfig c = cfg.layer;
  c.model_dim = cfg.model_dim;
  return c;
}

Index mixer_width(const ModelConfig& cfg) {
  switch (cfg.kind) {
    case ModelKind::kM2rnn:
    case ModelKind::kVectorRnn: return cfg.model_dim;
    case ModelKind::kGru: return cfg.hidden;
    case ModelKind::kDiagLinear: return cfg.diag_heads * cfg.diag_value_dim;
  }
  return 0;
}

template <typename Params>
void append_mixer(ParamList& out, Params& p, bool (*skips_decay)(const std::string&)) {
  p.visit([&](const char* name, Tensor& t) {
    out.push_back({std::string("mixer.") + name, t, !skips_decay(name)});
  });
}

bool never_skips(const std::string&) { return false; }
bool vector_skips(const std::string& name) { return name == "norm_weight"; }

struct VectorBlockParams {
  Tensor w_in, b_in, transition, w_g, norm_weight, w_o;
  template <typename Fn>
  void visit(Fn&& fn) {
    fn("w_in", w_in); fn("b_in", b_in); fn("transition", transition);
    fn("w_g", w_g); fn("norm_weight", norm_weight); fn("w_o", w_o);
  }
};

}  // namespace

const char* model_kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::kM2rnn: return "m2rnn";
    case ModelKind::kGru: return "gru";
    case ModelKind::kVectorRnn: return "vector-rnn";
    case ModelKind::kDiagLinear: return "diag-linear";
  }
  return "?";
}

ModelKind parse_model_kind(const std::string& name) {
  for (ModelKind k : {ModelKind::kM2rnn, ModelKind::kGru, ModelKind::kVectorRnn, ModelKind::kDiagLinear})
    if (name == model_kind_name(k)) return k;
  throw ConfigError("unknown model kind '" + name + "' (m2rnn|gru|vector-rnn|diag-linear)");
}

void ModelConfig::validate() const {
  if (vocab < 1 || classes < 1 || model_dim < 1 || hidden < 1 || diag_heads < 1 ||
      diag_key_dim < 1 || diag_value_dim < 1)
    throw ConfigError("model: all dimensions must be positive");
  if (!(embed_std > 0.0)) throw ConfigError("model: embed_std must be positive");
  if (kind == ModelKind::kM2rnn) block_config(*this).validate();
}

Index model_state_size(const ModelConfig& cfg) {
  switch (cfg.kind) {
    case ModelKind::kM2rnn: return cfg.layer.heads * cfg.layer.key_dim * cfg.layer.value_dim;
    case ModelKind::kGru:
    case ModelKind::kVectorRnn: return cfg.hidden;
    case ModelKind::kDiagLinear: return cfg.diag_heads * cfg.diag_key_dim * cfg.diag_value_dim;
  }
  return 0;
}

SequenceModel::SequenceModel(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(cfg_.seed);
  const Index d = cfg_.model_dim;
  params_.push_back({"embed", normal_tensor({cfg_.vocab, d}, cfg_.embed_std, rng), true});

  const std::uint64_t mixer_seed = rng();
  switch (cfg_.kind) {
    case ModelKind::kM2rnn: {
      LayerParams p = init_layer_params(block_config(cfg_), mixer_seed);
      append_mixer(params_, p, &layer_param_skips_decay);
      break;
    }
    case ModelKind::kGru: {
      GruParams p = init_gru(d, cfg_.hidden, mixer_seed);
      append_mixer(params_, p, &never_skips);
      break;
    }
    case ModelKind::kVectorRnn: {
      std::mt19937_64 mix(mixer_seed);
      const Index h = cfg_.hidden;
      const double in_bound = 1.0 / std::sqrt(static_cast<double>(d));
      VectorBlockParams p;
      p.w_in = uniform_tensor({d, h}, in_bound, mix);
      p.b_in = Tensor({h});
      p.transition = init_vector_rnn(h, cfg_.vector_gain, mix()).transition;
      p.w_g = uniform_tensor({d, h}, in_bound, mix);
      p.norm_weight = Tensor::full({h}, 1.0);
      p.w_o = uniform_tensor({h, d}, 1.0 / std::sqrt(static_cast<double>(h)), mix);
      append_mixer(params_, p, &vector_skips);
      break;
    }
    case ModelKind::kDiagLinear: {
      DiagLinearParams p = init_diag_linear(d, cfg_.diag_heads, cfg_.diag_key_dim,
                                            cfg_.diag_value_dim, mixer_seed);
      append_mixer(params_, p, &never_skips);
      break;
    }
  }

  const Index w = mixer_width(cfg_);
  params_.push_back({"head.w", uniform_tensor({w, cfg_.classes}, 1.0 / std::sqrt(static_cast<double>(w)), rng), true});
  params_.push_back({"head.b", Tensor({cfg_.classes}), false});
}

SequenceModel::SequenceModel(const ModelConfig& cfg, ParamList params) : SequenceModel(cfg) {
  if (params.size() != params_.size())
    throw ConfigError("model: expected " + std::to_string(params_.size()) + " tensors, got " +
                      std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != params_[i].name || params[i].value.shape() != params_[i].value.shape())
      throw ConfigError("model: tensor '" + params[i].name + "' " + shape_str(params[i].value.shape()) +
                        " does not match '" + params_[i].name + "' " +
                        shape_str(params_[i].value.shape()));
    params_[i].value = std::move(params[i].value);
  }
}

std::vector<Var> SequenceModel::add_leaves(Tape& tape) const {
  std::vector<Var> leaves;
  leaves.reserve(params_.size());
  for (const NamedParam& p : params_) leaves.push_back(tape.leaf(p.value));
  return leaves;
}

Var SequenceModel::forward(Tape& tape, const std::vector<Var>& leaves,
                           const std::vector<std::int64_t>& tokens, Index batch, Index steps) const {
  if (static_cast<Index>(tokens.size()) != batch * steps)
    throw DimensionError("model: expected " + std::to_string(batch * steps) + " tokens");
  const Index d = cfg_.model_dim, rows = batch * steps;
  const Var x = tape.reshape(tape.embedding(leaves.front(), tokens), {batch, steps, d});
  const std::span<const Var> m(leaves.data() + 1, leaves.size() - 3);

  Var h;
  switch (cfg_.kind) {
    case ModelKind::kM2rnn: {
      const LayerVars v{m[0], m[1], m[2],  m[3],  m[4],  m[5],  m[6],  m[7], m[8],
                        m[9], m[10], m[11], m[12], m[13], m[14], m[15], m[16]};
      h = apply_layer(tape, v, block_config(cfg_), x).output;
      break;
    }
    case ModelKind::kGru: {
      const GruVars v{m[0], m[1], m[2], m[3], m[4], m[5], m[6], m[7], m[8], m[9], m[10], m[11]};
      h = apply_gru(tape, v, x);
      break;
    }
    case ModelKind::kVectorRnn: {
      const Index hw = cfg_.hidden;
      const Var x2 = tape.reshape(x, {rows, d});
      const Var in = tape.add_row_bias(tape.matmul(x2, m[0]), m[1]);
      const Var states = apply_vector_rnn(tape, m[2], tape.reshape(in, {batch, steps, hw}));
      const Var gate = tape.silu(tape.matmul(x2, m[3]));
      const Var z = tape.mul(tape.reshape(states, {rows, hw}), gate);
      h = tape.matmul(tape.rmsnorm(z, m[4], hw, cfg_.layer.norm_eps), m[5]);
      break;
    }
    case ModelKind::kDiagLinear: {
      const DiagLinearParams shape{cfg_.diag_heads, cfg_.diag_key_dim, cfg_.diag_value_dim, {}, {}, {}, {}, {}};
      h = apply_diag_linear(tape, {m[0], m[1], m[2], m[3], m[4]}, shape, x);
      break;
    }
  }
  const Var flat = tape.reshape(h, {rows, mixer_width(cfg_)});
  return tape.add_row_bias(tape.matmul(flat, leaves[leaves.size() - 2]), leaves.back());
}

Tensor SequenceModel::logits(const std::vector<std::int64_t>& tokens, Index batch, Index steps) const {
  Tape tape;
  const auto leaves = add_leaves(tape);
  return tape.value(forward(tape, leaves, tokens, batch, steps));
}

void SequenceModel::project() {
  for (NamedParam& p : params_)
    if (p.name == "mixer.gate_alpha") p.value.array() = p.value.array().max(kMinGateAlpha);
}

}  // namespace m2rnn
