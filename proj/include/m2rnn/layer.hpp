// SPDX-License-Identifier: Apache-2.0
//
// Full M2RNN block over x[B, T, d]:
//
//   q = SiLU(conv(x W_q + b_q))   k = SiLU(conv(x W_k + b_k))   v = SiLU(conv(x W_v + b_v))
//   f = psi(x W_f)                g = SiLU(x W_g)
//   y = recurrence(q, k, v, f) + w_r .* v
//   o = RMSNorm(y .* g) W_o
//
// The block is always built on a Tape; the recurrence enters as a custom node
// whose backward pass is m2rnn_backward.
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>

#include "m2rnn/recurrence.hpp"
#include "m2rnn/tape.hpp"

namespace m2rnn {

// ---------------------------------------------------------------------------
// Projection parameter / state-size calculators
// ---------------------------------------------------------------------------

enum class HeadPatternKind { kMultiHead, kMultiQuery, kMultiKey, kMultiValue };

struct HeadPattern {
  HeadPatternKind kind = HeadPatternKind::kMultiValue;
  Index heads = 1;
  Index key_dim = 1;
  Index value_dim = 1;
  Index model_dim = 1;
};

// Linear-projection weight counts (biases, conv kernels, gate parameters and
// norm weights are not included).
struct ProjectionCounts {
  Index w_q = 0, w_k = 0, w_v = 0, w_g = 0, w_f = 0, w_o = 0;
  Index total() const { return w_q + w_k + w_v + w_g + w_f + w_o; }
};

ProjectionCounts projection_counts(const HeadPattern& pattern);
Index param_count(const HeadPattern& pattern);
Index state_size(const HeadPattern& pattern);
const char* head_pattern_name(HeadPatternKind kind);

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

enum class TransitionInit { kIdentity, kOrthogonal, kNormal };

TransitionInit parse_transition_init(const std::string& name);

// [N, V, V]; identity by default.
Tensor init_transition(TransitionInit mode, Index heads, Index value_dim, std::uint64_t seed);

// Uniform taps in +-1/sqrt(width), or a delta on the current step so the
// convolution starts as the identity.
enum class ConvInit { kUniform, kIdentity };

ConvInit parse_conv_init(const std::string& name);

struct LayerConfig {
  Index model_dim = 16;
  Index heads = 2;
  Index key_dim = 8;
  Index value_dim = 4;
  Index conv_width = 4;
  ConvInit conv_init = ConvInit::kUniform;
  // Normalize each head's V features separately instead of all N*V together.
  bool per_head_norm = false;
  double norm_eps = kRmsNormEps;
  TransitionInit transition_init = TransitionInit::kIdentity;
  ValueRange alpha_range{1.0, 8.0};
  ValueRange beta_range{1.0, 8.0};
  double init_std = 0.02;
  // Per-step Frobenius clip on the recurrent state gradient; nullopt disables.
  std::optional<double> state_grad_clip = 1.0;

  Index value_width() const { return heads * value_dim; }
  Index norm_group() const { return per_head_norm ? value_dim : value_width(); }
  void validate() const;
};

struct LayerParams {
  Tensor w_q, b_q;          // [d, K], [K]
  Tensor w_k, b_k;          // [d, K], [K]
  Tensor w_v, b_v;          // [d, N*V], [N*V]
  Tensor conv_q, conv_k;    // [width, K]
  Tensor conv_v;            // [width, N*V]
  Tensor w_f;               // [d, N]
  Tensor w_g;               // [d, N*V]
  Tensor transition;        // [N, V, V]
  Tensor residual;          // [N, V]
  Tensor norm_weight;       // [N*V]
  Tensor w_o;               // [N*V, d]
  ForgetGateParams gate;    // alpha[N], beta[N]

  // Visits (name, tensor) pairs in a fixed order.
  template <typename Fn>
  void visit(Fn&& fn) {
    fn("w_q", w_q); fn("b_q", b_q); fn("w_k", w_k); fn("b_k", b_k);
    fn("w_v", w_v); fn("b_v", b_v); fn("conv_q", conv_q); fn("conv_k", conv_k);
    fn("conv_v", conv_v); fn("w_f", w_f); fn("w_g", w_g); fn("transition", transition);
    fn("residual", residual); fn("norm_weight", norm_weight); fn("w_o", w_o);
    fn("gate_alpha", gate.alpha); fn("gate_beta", gate.beta);
  }
  template <typename Fn>
  void visit(Fn&& fn) const {
    const_cast<LayerParams*>(this)->visit(
        [&](const char* name, Tensor& t) { fn(name, static_cast<const Tensor&>(t)); });
  }
};

// Truncated-normal projections (std init_std, cut at 2 std), zero biases,
// depthwise conv kernels uniform in +-1/sqrt(width), w_r = 1, norm weight 1.
LayerParams init_layer_params(const LayerConfig& cfg, std::uint64_t seed);

// Parameter names excluded from weight decay.
bool layer_param_skips_decay(const std::string& name);

// ---------------------------------------------------------------------------
// Tape composition
// ---------------------------------------------------------------------------

struct LayerVars {
  Var w_q, b_q, w_k, b_k, w_v, b_v, conv_q, conv_k, conv_v, w_f, w_g, transition, residual,
      norm_weight, w_o, gate_alpha, gate_beta;
};

LayerVars add_layer_leaves(Tape& tape, const LayerParams& params);

// Gradient of every parameter after tape.backward(), in LayerParams layout.
LayerParams collect_layer_grads(const Tape& tape, const LayerVars& vars);

// Recurrence over tape values as a custom node. q, k: [B,T,K]; v: [B,T,N,V];
// f: [B,T,N]; h0: [B,N,K,V]; transition: [N,V,V]. Returns Y [B,T,N,V].
Var recurrence_node(Tape& tape, Var q, Var k, Var v, Var f, Var h0, Var transition,
                    std::optional<double> clip);

// Intermediate activations of one block application, in tape handles.
struct LayerActivations {
  Var q, k, v, f, g, y, output;
};

// Optional rewiring points used by the tensor-parallel simulation. Unset
// members leave the corresponding stage as in the single-device block.
struct LayerHooks {
  // Applied once to x; the result feeds the v, f and g branches (and q, k
  // unless qk_from_raw_input is set).
  std::function<Var(Tape&, Var)> branch_input;
  bool qk_from_raw_input = false;
  // Applied to q and k after their activation.
  std::function<Var(Tape&, Var)> shared_head;
  // Replaces RMSNorm(z; w) on the [B*T, N*V] gated readout.
  std::function<Var(Tape&, Var z, Var w)> norm;
  // Applied to the projected output [B*T, d].
  std::function<Var(Tape&, Var)> output;
};

// Builds the block on `tape` for x[B, T, d]; returns the output [B, T, d].
LayerActivations apply_layer(Tape& tape, const LayerVars& vars, const LayerConfig& cfg, Var x,
                             const LayerHooks& hooks = {});

struct LayerOutput {
  Tensor output;       // [B, T, d]
  Tensor final_state;  // [B, N, K, V]
};

LayerOutput layer_forward(const LayerParams& params, const LayerConfig& cfg, const Tensor& x);

struct LayerGradients {
  LayerParams params;
  Tensor input;
};

// Gradients of sum(output .* d_output).
LayerGradients layer_backward(const LayerParams& params, const LayerConfig& cfg, const Tensor& x,
                              const Tensor& d_output);

}  // namespace m2rnn
