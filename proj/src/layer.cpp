// SPDX-License-Identifier: Apache-2.0
#include "m2rnn/layer.hpp"

#include <Eigen/QR>

#include <random>

namespace m2rnn {

ProjectionCounts projection_counts(const HeadPattern& p) {
  const Index n = p.heads, k = p.key_dim, v = p.value_dim, d = p.model_dim;
  ProjectionCounts c;
  c.w_g = n * v * d;
  c.w_f = n * d;
  c.w_o = n * v * d;
  switch (p.kind) {
    case HeadPatternKind::kMultiHead:
      c.w_q = n * k * d;
      c.w_k = n * k * d;
      c.w_v = n * v * d;
      break;
    case HeadPatternKind::kMultiQuery:
      c.w_q = n * k * d;
      c.w_k = k * d;
      c.w_v = v * d;
      break;
    case HeadPatternKind::kMultiKey:
      c.w_q = k * d;
      c.w_k = n * k * d;
      c.w_v = v * d;
      break;
    case HeadPatternKind::kMultiValue:
      c.w_q = k * d;
      c.w_k = k * d;
      c.w_v = n * v * d;
      break;
  }
  return c;
}

Index param_count(const HeadPattern& pattern) { return projection_counts(pattern).total(); }

Index state_size(const HeadPattern& p) { return p.heads * p.key_dim * p.value_dim; }

const char* head_pattern_name(HeadPatternKind kind) {
  switch (kind) {
    case HeadPatternKind::kMultiHead: return "multi-head";
    case HeadPatternKind::kMultiQuery: return "multi-query";
    case HeadPatternKind::kMultiKey: return "multi-key";
    case HeadPatternKind::kMultiValue: return "multi-value";
  }
  return "?";
}

TransitionInit parse_transition_init(const std::string& name) {
  if (name == "identity") return TransitionInit::kIdentity;
  if (name == "orthogonal") return TransitionInit::kOrthogonal;
  if (name == "normal") return TransitionInit::kNormal;
  throw ConfigError("unknown transition init '" + name + "' (identity|orthogonal|normal)");
}

ConvInit parse_conv_init(const std::string& name) {
  if (name == "uniform") return ConvInit::kUniform;
  if (name == "identity") return ConvInit::kIdentity;
  throw ConfigError("unknown conv init '" + name + "' (uniform|identity)");
}

Tensor init_transition(TransitionInit mode, Index heads, Index value_dim, std::uint64_t seed) {
  Tensor w({heads, value_dim, value_dim});
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const Index vv = value_dim * value_dim;
  for (Index n = 0; n < heads; ++n) {
    MatrixMap<double> wn(w.data() + n * vv, value_dim, value_dim);
    switch (mode) {
      case TransitionInit::kIdentity:
        wn.setIdentity();
        break;
      case TransitionInit::kNormal: {
        const double sigma = 1.0 / std::sqrt(static_cast<double>(value_dim));
        for (Index i = 0; i < vv; ++i) w[n * vv + i] = sigma * normal(rng);
        break;
      }
      case TransitionInit::kOrthogonal: {
        Eigen::MatrixXd a(value_dim, value_dim);
        for (Index i = 0; i < value_dim; ++i)
          for (Index j = 0; j < value_dim; ++j) a(i, j) = normal(rng);
        Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
        Eigen::MatrixXd q = qr.householderQ();
        // Fix column signs so the factorization is unique (positive diag of R).
        const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
        for (Index j = 0; j < value_dim; ++j)
          if (r(j, j) < 0) q.col(j) *= -1.0;
        wn = q;
        break;
      }
    }
  }
  return w;
}

void LayerConfig::validate() const {
  if (model_dim <= 0 || heads <= 0 || key_dim <= 0 || value_dim <= 0 || conv_width <= 0)
    throw ConfigError("layer: all dimensions must be positive");
  if (!(init_std > 0.0)) throw ConfigError("layer: init_std must be positive");
  if (state_grad_clip && !(*state_grad_clip > 0.0))
    throw ConfigError("layer: state_grad_clip must be positive");
}

namespace {

Tensor truncated_normal(Shape shape, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor t(std::move(shape));
  for (double& v : t.values()) {
    double z;
    do z = normal(rng);
    while (std::abs(z) > 2.0);
    v = std * z;
  }
  return t;
}

Tensor uniform(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = dist(rng);
  return t;
}

}  // namespace

LayerParams init_layer_params(const LayerConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const Index d = cfg.model_dim, k = cfg.key_dim, nv = cfg.value_width();
  const double conv_bound = 1.0 / std::sqrt(static_cast<double>(cfg.conv_width));
  LayerParams p;
  p.w_q = truncated_normal({d, k}, cfg.init_std, rng);
  p.b_q = Tensor({k});
  p.w_k = truncated_normal({d, k}, cfg.init_std, rng);
  p.b_k = Tensor({k});
  p.w_v = truncated_normal({d, nv}, cfg.init_std, rng);
  p.b_v = Tensor({nv});
  auto conv = [&](Index channels) {
    if (cfg.conv_init == ConvInit::kUniform) return uniform({cfg.conv_width, channels}, conv_bound, rng);
    Tensor t({cfg.conv_width, channels});
    for (Index c = 0; c < channels; ++c) t(cfg.conv_width - 1, c) = 1.0;
    return t;
  };
  p.conv_q = conv(k);
  p.conv_k = conv(k);
  p.conv_v = conv(nv);
  p.w_f = truncated_normal({d, cfg.heads}, cfg.init_std, rng);
  p.w_g = truncated_normal({d, nv}, cfg.init_std, rng);
  p.transition = init_transition(cfg.transition_init, cfg.heads, cfg.value_dim, rng());
  p.residual = Tensor::full({cfg.heads, cfg.value_dim}, 1.0);
  p.norm_weight = Tensor::full({nv}, 1.0);
  p.w_o = truncated_normal({nv, d}, cfg.init_std, rng);
  p.gate = forget_gate_init(cfg.heads, cfg.alpha_range, cfg.beta_range, rng());
  return p;
}

bool layer_param_skips_decay(const std::string& name) {
  return name == "norm_weight" || name == "gate_alpha" || name == "gate_beta" ||
         name == "residual";
}

LayerVars add_layer_leaves(Tape& tape, const LayerParams& p) {
  return {tape.leaf(p.w_q),        tape.leaf(p.b_q),        tape.leaf(p.w_k),
          tape.leaf(p.b_k),        tape.leaf(p.w_v),        tape.leaf(p.b_v),
          tape.leaf(p.conv_q),     tape.leaf(p.conv_k),     tape.leaf(p.conv_v),
          tape.leaf(p.w_f),        tape.leaf(p.w_g),        tape.leaf(p.transition),
          tape.leaf(p.residual),   tape.leaf(p.norm_weight), tape.leaf(p.w_o),
          tape.leaf(p.gate.alpha), tape.leaf(p.gate.beta)};
}

LayerParams collect_layer_grads(const Tape& tape, const LayerVars& v) {
  LayerParams g;
  g.w_q = tape.grad(v.w_q);
  g.b_q = tape.grad(v.b_q);
  g.w_k = tape.grad(v.w_k);
  g.b_k = tape.grad(v.b_k);
  g.w_v = tape.grad(v.w_v);
  g.b_v = tape.grad(v.b_v);
  g.conv_q = tape.grad(v.conv_q);
  g.conv_k = tape.grad(v.conv_k);
  g.conv_v = tape.grad(v.conv_v);
  g.w_f = tape.grad(v.w_f);
  g.w_g = tape.grad(v.w_g);
  g.transition = tape.grad(v.transition);
  g.residual = tape.grad(v.residual);
  g.norm_weight = tape.grad(v.norm_weight);
  g.w_o = tape.grad(v.w_o);
  g.gate.alpha = tape.grad(v.gate_alpha);
  g.gate.beta = tape.grad(v.gate_beta);
  return g;
}

Var recurrence_node(Tape& tape, Var q, Var k, Var v, Var f, Var h0, Var transition,
                    std::optional<double> clip) {
  RecurrenceInputs in{tape.value(q), tape.value(k), tape.value(v),
                      tape.value(f), tape.value(h0), tape.value(transition)};
  Tensor y = m2rnn_forward(in).outputs;
  // Two-pass backward: recompute and cache all states, then the reverse sweep.
  auto backward = [in = std::move(in), clip](const Tensor& dy) {
    const Tensor states = m2rnn_forward_cached(in);
    RecurrenceGrads g = m2rnn_backward(in, states, dy, clip);
    return std::vector<Tensor>{std::move(g.d_queries), std::move(g.d_keys),
                               std::move(g.d_values),  std::move(g.d_forget),
                               std::move(g.d_initial_state), std::move(g.d_transition)};
  };
  return tape.custom({q, k, v, f, h0, transition}, std::move(y), std::move(backward));
}

LayerActivations apply_layer(Tape& tape, const LayerVars& p, const LayerConfig& cfg, Var x,
                             const LayerHooks& hooks) {
  const Tensor& xv = tape.value(x);
  if (xv.rank() != 3 || xv.dim(2) != cfg.model_dim)
    throw DimensionError("layer: expected x of shape [B,T," + std::to_string(cfg.model_dim) +
                         "], got " + shape_str(xv.shape()));
  const Index batch = xv.dim(0), steps = xv.dim(1), rows = batch * steps;
  const Index n = cfg.heads, kd = cfg.key_dim, vd = cfg.value_dim, nv = cfg.value_width();

  const Var xb = hooks.branch_input ? hooks.branch_input(tape, x) : x;
  const Var x2 = tape.reshape(xb, {rows, cfg.model_dim});
  const Var xqk = hooks.qk_from_raw_input ? tape.reshape(x, {rows, cfg.model_dim}) : x2;
  auto conv_branch = [&](Var input, Var w, Var b, Var kernel, Index width) {
    const Var proj = tape.reshape(tape.add_row_bias(tape.matmul(input, w), b), {batch, steps, width});
    const Var zero_bias = tape.constant(Tensor({width}));
    return tape.silu(tape.conv1d(proj, kernel, zero_bias));
  };

  LayerActivations a;
  a.q = conv_branch(xqk, p.w_q, p.b_q, p.conv_q, kd);
  a.k = conv_branch(xqk, p.w_k, p.b_k, p.conv_k, kd);
  if (hooks.shared_head) {
    a.q = hooks.shared_head(tape, a.q);
    a.k = hooks.shared_head(tape, a.k);
  }
  a.v = conv_branch(x2, p.w_v, p.b_v, p.conv_v, nv);
  a.f = tape.reshape(tape.forget_gate(tape.matmul(x2, p.w_f), p.gate_alpha, p.gate_beta),
                     {batch, steps, n});
  a.g = tape.silu(tape.matmul(x2, p.w_g));

  const Var h0 = tape.constant(Tensor({batch, n, kd, vd}));
  const Var rec = recurrence_node(tape, a.q, a.k, tape.reshape(a.v, {batch, steps, n, vd}), a.f,
                                  h0, p.transition, cfg.state_grad_clip);
  const Var v2 = tape.reshape(a.v, {rows, nv});
  a.y = tape.add(tape.reshape(rec, {rows, nv}),
                 tape.mul_cols(v2, tape.reshape(p.residual, {nv})));
  const Var gated = tape.mul(a.y, a.g);
  const Var normed = hooks.norm ? hooks.norm(tape, gated, p.norm_weight)
                                : tape.rmsnorm(gated, p.norm_weight, cfg.norm_group(), cfg.norm_eps);
  Var projected = tape.matmul(normed, p.w_o);
  if (hooks.output) projected = hooks.output(tape, projected);
  a.output = tape.reshape(projected, {batch, steps, cfg.model_dim});
  return a;
}

namespace {

RecurrenceInputs recurrence_inputs_of(const Tape& tape, const LayerActivations& a,
                                      const LayerParams& params, const LayerConfig& cfg,
                                      Index batch, Index steps) {
  return {tape.value(a.q),
          tape.value(a.k),
          tape.value(a.v).reshaped({batch, steps, cfg.heads, cfg.value_dim}),
          tape.value(a.f),
          Tensor({batch, cfg.heads, cfg.key_dim, cfg.value_dim}),
          params.transition};
}

}  // namespace

LayerOutput layer_forward(const LayerParams& params, const LayerConfig& cfg, const Tensor& x) {
  Tape tape;
  const LayerVars vars = add_layer_leaves(tape, params);
  const LayerActivations a = apply_layer(tape, vars, cfg, tape.leaf(x));
  LayerOutput out;
  out.output = tape.value(a.output);
  out.final_state =
      m2rnn_forward(recurrence_inputs_of(tape, a, params, cfg, x.dim(0), x.dim(1))).final_state;
  return out;
}

LayerGradients layer_backward(const LayerParams& params, const LayerConfig& cfg, const Tensor& x,
                              const Tensor& d_output) {
  Tape tape;
  const LayerVars vars = add_layer_leaves(tape, params);
  const Var xin = tape.leaf(x);
  const LayerActivations a = apply_layer(tape, vars, cfg, xin);
  const Var loss = tape.sum(tape.mul(a.output, tape.constant(d_output)));
  tape.backward(loss);
  return {collect_layer_grads(tape, vars), tape.grad(xin)};
}

}  // namespace m2rnn
