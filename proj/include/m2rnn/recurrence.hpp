// SPDX-License-Identifier: Apache-2.0
//
// Matrix-state non-linear recurrence, multi-value head layout (one shared
// query/key head, N value heads). Per (batch, head) pair:
//
//   Z_t = tanh(H_{t-1} W + k_t v_t^T)          H: [K x V], W: [V x V]
//   H_t = f_t H_{t-1} + (1 - f_t) Z_t
//   y_t = H_t^T q_t
//
// (batch, head) pairs are independent; time is strictly sequential within a
// pair. All shared-head accumulations (dQ, dK over heads; dW over batch) run in
// ascending index order, so results do not depend on scheduling.
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <type_traits>
#include <random>
#include <string>
#include <utility>

#include "m2rnn/kernels.hpp"

namespace m2rnn {

// ---------------------------------------------------------------------------
// Forget gate: psi(x) = (1 + e^{x + beta})^{-alpha} = exp(-alpha * softplus(x + beta))
// ---------------------------------------------------------------------------

template <typename Scalar>
Scalar forget_gate(Scalar x, Scalar alpha, Scalar beta) {
  return std::exp(-alpha * softplus(x + beta));
}

// d psi / dx (equal to d psi / d beta).
template <typename Scalar>
Scalar forget_gate_dx(Scalar x, Scalar alpha, Scalar beta) {
  return -alpha * sigmoid(x + beta) * forget_gate(x, alpha, beta);
}

template <typename Scalar>
Scalar forget_gate_dalpha(Scalar x, Scalar alpha, Scalar beta) {
  return -softplus(x + beta) * forget_gate(x, alpha, beta);
}

template <typename Scalar>
BasicTensor<Scalar> forget_gate(const BasicTensor<Scalar>& x, Scalar alpha, Scalar beta) {
  if (!(alpha > Scalar(0))) throw ConfigError("forget_gate: alpha must be positive");
  return map(x, [=](Scalar v) { return forget_gate(v, alpha, beta); });
}

template <typename Scalar>
struct BasicForgetGateParams {
  BasicTensor<Scalar> alpha;  // [N], positive
  BasicTensor<Scalar> beta;   // [N]
};
using ForgetGateParams = BasicForgetGateParams<double>;

struct ValueRange {
  double min;
  double max;
};

// alpha_n ~ Uniform(alpha range), beta_n ~ LogUniform(beta range).
inline ForgetGateParams forget_gate_init(Index num_heads, ValueRange alpha, ValueRange beta,
                                         std::uint64_t seed) {
  if (!(alpha.min > 0.0 && alpha.min <= alpha.max))
    throw ConfigError("forget_gate_init: need 0 < alpha_min <= alpha_max");
  if (!(beta.min > 0.0 && beta.min <= beta.max))
    throw ConfigError("forget_gate_init: need 0 < beta_min <= beta_max");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  ForgetGateParams p{Tensor({num_heads}), Tensor({num_heads})};
  const double log_lo = std::log(beta.min), log_hi = std::log(beta.max);
  for (Index n = 0; n < num_heads; ++n) {
    p.alpha[n] = alpha.min + (alpha.max - alpha.min) * unit(rng);
    p.beta[n] = std::exp(log_lo + (log_hi - log_lo) * unit(rng));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Recurrence inputs / outputs
// ---------------------------------------------------------------------------

struct RecurrenceDims {
  Index batch, steps, heads, key_dim, value_dim;
};

template <typename Scalar>
struct BasicRecurrenceInputs {
  BasicTensor<Scalar> queries;        // [B, T, K]
  BasicTensor<Scalar> keys;           // [B, T, K]
  BasicTensor<Scalar> values;         // [B, T, N, V]
  BasicTensor<Scalar> forget;         // [B, T, N], entries in [0, 1]
  BasicTensor<Scalar> initial_state;  // [B, N, K, V]
  BasicTensor<Scalar> transition;     // [N, V, V]

  RecurrenceDims dims() const {
    if (values.rank() != 4)
      throw DimensionError("recurrence: values must be [B,T,N,V], got " +
                           shape_str(values.shape()));
    const RecurrenceDims d{values.dim(0), values.dim(1), values.dim(2), queries.shape().back(),
                           values.dim(3)};
    require_shape(queries, {d.batch, d.steps, d.key_dim}, "recurrence queries");
    require_shape(keys, {d.batch, d.steps, d.key_dim}, "recurrence keys");
    require_shape(forget, {d.batch, d.steps, d.heads}, "recurrence forget");
    require_shape(initial_state, {d.batch, d.heads, d.key_dim, d.value_dim},
                  "recurrence initial_state");
    require_shape(transition, {d.heads, d.value_dim, d.value_dim}, "recurrence transition");
    return d;
  }
};
using RecurrenceInputs = BasicRecurrenceInputs<double>;

template <typename Scalar>
struct BasicRecurrenceOutputs {
  BasicTensor<Scalar> outputs;      // [B, T, N, V]
  BasicTensor<Scalar> final_state;  // [B, N, K, V]
};
using RecurrenceOutputs = BasicRecurrenceOutputs<double>;

template <typename Scalar>
struct BasicRecurrenceGrads {
  BasicTensor<Scalar> d_queries;        // [B, T, K]
  BasicTensor<Scalar> d_keys;           // [B, T, K]
  BasicTensor<Scalar> d_values;         // [B, T, N, V]
  BasicTensor<Scalar> d_transition;     // [N, V, V]
  BasicTensor<Scalar> d_forget;         // [B, T, N]
  BasicTensor<Scalar> d_initial_state;  // [B, N, K, V]
};
using RecurrenceGrads = BasicRecurrenceGrads<double>;

// ---------------------------------------------------------------------------
// State-gradient clipping
// ---------------------------------------------------------------------------

// Rescales p in place to Frobenius norm `clip` when it exceeds it.
template <typename Scalar>
void clip_state_gradient_inplace(std::span<Scalar> p, Scalar clip) {
  const Scalar norm = frobenius_norm(std::span<const Scalar>(p.data(), p.size()));
  if (norm > clip) {
    const Scalar factor = clip / norm;
    for (Scalar& v : p) v *= factor;
  }
}

template <typename Scalar>
BasicTensor<Scalar> clip_state_gradient(const BasicTensor<Scalar>& p, Scalar clip) {
  if (!(clip > Scalar(0))) throw ConfigError("clip_state_gradient: clip must be positive");
  BasicTensor<Scalar> out = p;
  clip_state_gradient_inplace(out.values(), clip);
  return out;
}

namespace detail {

// One gated update of the row-major [kd, vd] state in place; z receives the
// tanh branch. Row i of the update only reads row i of the state.
template <typename Scalar>
void recurrence_step(Scalar* __restrict state, const Scalar* __restrict transition,
                     const Scalar* key, const Scalar* value, Scalar gate, Scalar* __restrict z,
                     Index kd, Index vd) {
  const Scalar keep = Scalar(1) - gate;
  for (Index i = 0; i < kd; ++i) {
    Scalar* zi = z + i * vd;
    Scalar* hi = state + i * vd;
    std::fill_n(zi, vd, Scalar(0));
    for (Index k = 0; k < vd; ++k) axpy(hi[k], transition + k * vd, zi, vd);
    for (Index j = 0; j < vd; ++j) zi[j] = std::tanh(zi[j] + key[i] * value[j]);
    for (Index j = 0; j < vd; ++j) hi[j] = hi[j] * gate + zi[j] * keep;
  }
}

// out[j] = sum_i state(i, j) * query[i], ascending i.
template <typename Scalar>
void readout(const Scalar* __restrict state, const Scalar* query, Scalar* __restrict out, Index kd,
             Index vd) {
  std::fill_n(out, vd, Scalar(0));
  for (Index i = 0; i < kd; ++i) axpy(query[i], state + i * vd, out, vd);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward scan (no intermediate states retained)
// ---------------------------------------------------------------------------

template <typename Scalar>
BasicRecurrenceOutputs<Scalar> m2rnn_forward(const BasicRecurrenceInputs<Scalar>& in) {
  const RecurrenceDims d = in.dims();
  const Index kv = d.key_dim * d.value_dim, vv = d.value_dim * d.value_dim;
  BasicRecurrenceOutputs<Scalar> out{BasicTensor<Scalar>({d.batch, d.steps, d.heads, d.value_dim}),
                                     in.initial_state};
  std::vector<Scalar> zbuf(static_cast<std::size_t>(kv));
  for (Index n = 0; n < d.heads; ++n) {
    const Scalar* w = in.transition.data() + n * vv;
    for (Index b = 0; b < d.batch; ++b) {
      Scalar* h = out.final_state.data() + (b * d.heads + n) * kv;
      for (Index t = 0; t < d.steps; ++t) {
        const Index bt = b * d.steps + t;
        detail::recurrence_step<Scalar>(h, w, in.keys.data() + bt * d.key_dim,
                                        in.values.data() + (bt * d.heads + n) * d.value_dim,
                                        in.forget[bt * d.heads + n], zbuf.data(), d.key_dim,
                                        d.value_dim);
        detail::readout<Scalar>(h, in.queries.data() + bt * d.key_dim,
                                out.outputs.data() + (bt * d.heads + n) * d.value_dim, d.key_dim,
                                d.value_dim);
      }
    }
  }
  return out;
}

// Forward scan retaining every state: returns [B, T, N, K, V] where slice t is
// the state after consuming step t.
template <typename Scalar>
BasicTensor<Scalar> m2rnn_forward_cached(const BasicRecurrenceInputs<Scalar>& in) {
  const RecurrenceDims d = in.dims();
  const Index kv = d.key_dim * d.value_dim, vv = d.value_dim * d.value_dim;
  BasicTensor<Scalar> full({d.batch, d.steps, d.heads, d.key_dim, d.value_dim});
  std::vector<Scalar> hbuf(static_cast<std::size_t>(kv)), zbuf(static_cast<std::size_t>(kv));
  for (Index n = 0; n < d.heads; ++n) {
    const Scalar* w = in.transition.data() + n * vv;
    for (Index b = 0; b < d.batch; ++b) {
      std::copy_n(in.initial_state.data() + (b * d.heads + n) * kv, kv, hbuf.data());
      for (Index t = 0; t < d.steps; ++t) {
        const Index bt = b * d.steps + t;
        detail::recurrence_step<Scalar>(hbuf.data(), w, in.keys.data() + bt * d.key_dim,
                                        in.values.data() + (bt * d.heads + n) * d.value_dim,
                                        in.forget[bt * d.heads + n], zbuf.data(), d.key_dim,
                                        d.value_dim);
        std::copy_n(hbuf.data(), kv, full.data() + (bt * d.heads + n) * kv);
      }
    }
  }
  return full;
}

// ---------------------------------------------------------------------------
// Backward (BPTT over the cached states)
//
//   G_t  = q_t dy_t^T + P_{t+1}                 total gradient reaching H_t
//   dX_t = (1 - f_t) G_t .* (1 - Z_t .* Z_t)    gradient at the tanh input
//   P_t  = f_t G_t + dX_t W^T                   gradient reaching H_{t-1}
//   df_t = sum(G_t .* (H_{t-1} - Z_t)),  dW += H_{t-1}^T dX_t
//   dk_t += dX_t v_t,  dv_t = dX_t^T k_t,  dq_t += H_t dy_t
//
// With a clip value, P_t is rescaled to Frobenius norm <= clip per (b, n)
// slice after every reverse step (including the one producing dH0).
// ---------------------------------------------------------------------------

template <typename Scalar>
BasicRecurrenceGrads<Scalar> m2rnn_backward(const BasicRecurrenceInputs<Scalar>& in,
                                            const BasicTensor<Scalar>& states,
                                            const BasicTensor<Scalar>& d_outputs,
                                            std::type_identity_t<std::optional<Scalar>> clip = std::nullopt) {
  const RecurrenceDims d = in.dims();
  require_shape(states, {d.batch, d.steps, d.heads, d.key_dim, d.value_dim},
                "m2rnn_backward states");
  require_shape(d_outputs, {d.batch, d.steps, d.heads, d.value_dim}, "m2rnn_backward d_outputs");
  if (clip && !(*clip > Scalar(0))) throw ConfigError("m2rnn_backward: clip must be positive");

  const Index kd = d.key_dim, vd = d.value_dim, kv = kd * vd, vv = vd * vd;
  BasicRecurrenceGrads<Scalar> g{
      BasicTensor<Scalar>(in.queries.shape()),  BasicTensor<Scalar>(in.keys.shape()),
      BasicTensor<Scalar>(in.values.shape()),   BasicTensor<Scalar>(in.transition.shape()),
      BasicTensor<Scalar>(in.forget.shape()),   BasicTensor<Scalar>(in.initial_state.shape())};

  std::vector<Scalar> pbuf(kv), gbuf(kv), zbuf(kv), dxbuf(kv), wtbuf(vv);
  Scalar* __restrict p = pbuf.data();
  Scalar* __restrict gt = gbuf.data();
  Scalar* __restrict z = zbuf.data();
  Scalar* __restrict dx = dxbuf.data();
  Scalar* __restrict wt = wtbuf.data();

  for (Index n = 0; n < d.heads; ++n) {
    const Scalar* w = in.transition.data() + n * vv;
    for (Index i = 0; i < vd; ++i)
      for (Index j = 0; j < vd; ++j) wt[j * vd + i] = w[i * vd + j];
    MatrixMap<Scalar> dw(g.d_transition.data() + n * vv, vd, vd);
    for (Index b = 0; b < d.batch; ++b) {
      std::fill_n(p, kv, Scalar(0));
      for (Index t = d.steps - 1; t >= 0; --t) {
        const Index bt = b * d.steps + t;
        const Index btn = bt * d.heads + n;
        const Scalar* hprev = t == 0 ? in.initial_state.data() + (b * d.heads + n) * kv
                                     : states.data() + (btn - d.heads) * kv;
        const Scalar* ht = states.data() + btn * kv;
        const Scalar* q = in.queries.data() + bt * kd;
        const Scalar* k = in.keys.data() + bt * kd;
        const Scalar* v = in.values.data() + btn * vd;
        const Scalar* dy = d_outputs.data() + btn * vd;
        const Scalar f = in.forget[btn];
        const Scalar keep = Scalar(1) - f;

        // Recompute the tanh branch.
        for (Index i = 0; i < kd; ++i) {
          Scalar* zi = z + i * vd;
          std::fill_n(zi, vd, Scalar(0));
          for (Index c = 0; c < vd; ++c) detail::axpy(hprev[i * vd + c], w + c * vd, zi, vd);
          for (Index j = 0; j < vd; ++j) zi[j] = std::tanh(zi[j] + k[i] * v[j]);
        }

        for (Index i = 0; i < kd; ++i)
          for (Index j = 0; j < vd; ++j) gt[i * vd + j] = q[i] * dy[j] + p[i * vd + j];

        Scalar* dq = g.d_queries.data() + bt * kd;
        for (Index i = 0; i < kd; ++i) {
          Scalar acc(0);
          for (Index j = 0; j < vd; ++j) acc += ht[i * vd + j] * dy[j];
          dq[i] += acc;
        }

        Scalar df(0);
        for (Index e = 0; e < kv; ++e) df += gt[e] * (hprev[e] - z[e]);
        g.d_forget[btn] = df;

        for (Index e = 0; e < kv; ++e) dx[e] = (gt[e] * keep) * (Scalar(1) - z[e] * z[e]);

        for (Index i = 0; i < kd; ++i)
          for (Index r = 0; r < vd; ++r) detail::axpy(hprev[i * vd + r], dx + i * vd, &dw(r, 0), vd);

        Scalar* dk = g.d_keys.data() + bt * kd;
        for (Index i = 0; i < kd; ++i) {
          Scalar acc(0);
          for (Index j = 0; j < vd; ++j) acc += dx[i * vd + j] * v[j];
          dk[i] += acc;
        }
        Scalar* dv = g.d_values.data() + btn * vd;
        std::fill_n(dv, vd, Scalar(0));
        for (Index i = 0; i < kd; ++i) detail::axpy(k[i], dx + i * vd, dv, vd);

        for (Index i = 0; i < kd; ++i) {
          Scalar* pi = p + i * vd;
          std::fill_n(pi, vd, Scalar(0));
          for (Index c = 0; c < vd; ++c) detail::axpy(dx[i * vd + c], wt + c * vd, pi, vd);
          for (Index j = 0; j < vd; ++j) pi[j] += f * gt[i * vd + j];
        }
        if (clip) clip_state_gradient_inplace<Scalar>(pbuf, *clip);
      }
      std::copy_n(p, kv, g.d_initial_state.data() + (b * d.heads + n) * kv);
    }
  }
  return g;
}

}  // namespace m2rnn
