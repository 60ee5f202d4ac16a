// SPDX-License-Identifier: Apache-2.0
//
// Baseline recurrences: a plain vector RNN, a GRU, and a diagonal linear RNN
// with an outer-product state. Each has a fused scan with a hand-written
// backward pass plus tape wiring for training.
#pragma once

#include <cstdint>

#include "m2rnn/recurrence.hpp"
#include "m2rnn/tape.hpp"

namespace m2rnn {

// ---------------------------------------------------------------------------
// Vector RNN: h_t = tanh(W h_{t-1} + x_t), h_0 = 0, y_t = h_t.
// ---------------------------------------------------------------------------

template <typename Scalar>
BasicTensor<Scalar> vector_rnn_scan(const BasicTensor<Scalar>& w, const BasicTensor<Scalar>& x) {
  if (x.rank() != 3 || w.rank() != 2 || w.dim(0) != x.dim(2) || w.dim(1) != x.dim(2))
    throw DimensionError("vector_rnn: need W [d,d] and x [B,T,d], got " + shape_str(w.shape()) +
                         " and " + shape_str(x.shape()));
  const Index batch = x.dim(0), steps = x.dim(1), d = x.dim(2);
  BasicTensor<Scalar> h(x.shape());
  for (Index b = 0; b < batch; ++b)
    for (Index t = 0; t < steps; ++t) {
      const Scalar* prev = t == 0 ? nullptr : h.data() + (b * steps + t - 1) * d;
      const Scalar* xt = x.data() + (b * steps + t) * d;
      Scalar* ht = h.data() + (b * steps + t) * d;
      for (Index j = 0; j < d; ++j) {
        Scalar acc(0);
        if (prev)
          for (Index k = 0; k < d; ++k) acc += w(j, k) * prev[k];
        ht[j] = std::tanh(acc + xt[j]);
      }
    }
  return h;
}

template <typename Scalar>
struct VectorRnnGrads {
  BasicTensor<Scalar> d_transition;  // [d, d]
  BasicTensor<Scalar> d_inputs;      // [B, T, d]
};

// Gradients of sum(h .* dh) given the states h returned by the scan.
template <typename Scalar>
VectorRnnGrads<Scalar> vector_rnn_backward(const BasicTensor<Scalar>& w, const BasicTensor<Scalar>& h,
                                           const BasicTensor<Scalar>& dh) {
  require_shape(dh, h.shape(), "vector_rnn_backward dh");
  const Index batch = h.dim(0), steps = h.dim(1), d = h.dim(2);
  VectorRnnGrads<Scalar> g{BasicTensor<Scalar>(w.shape()), BasicTensor<Scalar>(h.shape())};
  std::vector<Scalar> p(d), gt(d);
  for (Index b = 0; b < batch; ++b) {
    std::fill(p.begin(), p.end(), Scalar(0));
    for (Index t = steps - 1; t >= 0; --t) {
      const Index off = (b * steps + t) * d;
      Scalar* da = g.d_inputs.data() + off;
      for (Index j = 0; j < d; ++j) {
        gt[j] = dh[off + j] + p[j];
        da[j] = gt[j] * (Scalar(1) - h[off + j] * h[off + j]);
      }
      if (t == 0) continue;
      const Scalar* prev = h.data() + off - d;
      for (Index j = 0; j < d; ++j)
        for (Index k = 0; k < d; ++k) g.d_transition(j, k) += da[j] * prev[k];
      for (Index k = 0; k < d; ++k) {
        Scalar acc(0);
        for (Index j = 0; j < d; ++j) acc += w(j, k) * da[j];
        p[k] = acc;
      }
    }
  }
  return g;
}

// Matrix recurrence that reproduces the vector RNN exactly: transition W^T,
// q = k = e_1, f = 0, v_t = x_t, zero initial state. The vector RNN hidden
// state then lives in the first row of H and is read out by q.
template <typename Scalar>
BasicRecurrenceInputs<Scalar> m2rnn_from_vector_rnn(const BasicTensor<Scalar>& w,
                                                    const BasicTensor<Scalar>& x, Index key_dim) {
  const Index batch = x.dim(0), steps = x.dim(1), d = x.dim(2);
  BasicRecurrenceInputs<Scalar> in;
  in.queries = BasicTensor<Scalar>({batch, steps, key_dim});
  for (Index i = 0; i < batch * steps; ++i) in.queries[i * key_dim] = Scalar(1);
  in.keys = in.queries;
  in.values = x.reshaped({batch, steps, 1, d});
  in.forget = BasicTensor<Scalar>({batch, steps, 1});
  in.initial_state = BasicTensor<Scalar>({batch, 1, key_dim, d});
  in.transition = transpose(w).reshaped({1, d, d});
  return in;
}

// ---------------------------------------------------------------------------
// GRU (row convention, h_0 = 0). Inputs are the input-side pre-activations
// a_r, a_z, a_n [B, T, H] (x W_* + b_*); the hidden-side terms are h U_* + c_*.
//
//   r = sigmoid(a_r + h U_r + c_r)     z = sigmoid(a_z + h U_z + c_z)
//   n = tanh(a_n + r .* (h U_n + c_n)) h' = (1 - z) .* n + z .* h
// ---------------------------------------------------------------------------

template <typename Scalar>
struct GruWeights {
  BasicTensor<Scalar> u_r, u_z, u_n;  // [H, H]
  BasicTensor<Scalar> c_r, c_z, c_n;  // [H]
};

template <typename Scalar>
struct GruGrads {
  BasicTensor<Scalar> d_ar, d_az, d_an;  // [B, T, H]
  GruWeights<Scalar> d_weights;
};

namespace detail {

// (h U)[j] + c[j] with ascending i.
template <typename Scalar>
void row_times(const Scalar* h, const BasicTensor<Scalar>& u, const BasicTensor<Scalar>& c,
               Scalar* out) {
  const Index n = c.size();
  for (Index j = 0; j < n; ++j) out[j] = Scalar(0);
  if (h)
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < n; ++j) out[j] += h[i] * u(i, j);
  for (Index j = 0; j < n; ++j) out[j] += c[j];
}

}  // namespace detail

template <typename Scalar>
BasicTensor<Scalar> gru_scan(const BasicTensor<Scalar>& ar, const BasicTensor<Scalar>& az,
                             const BasicTensor<Scalar>& an, const GruWeights<Scalar>& w) {
  if (ar.rank() != 3) throw DimensionError("gru: expected [B,T,H], got " + shape_str(ar.shape()));
  require_shape(az, ar.shape(), "gru a_z");
  require_shape(an, ar.shape(), "gru a_n");
  const Index batch = ar.dim(0), steps = ar.dim(1), hd = ar.dim(2);
  for (const auto* u : {&w.u_r, &w.u_z, &w.u_n}) require_shape(*u, {hd, hd}, "gru U");
  for (const auto* c : {&w.c_r, &w.c_z, &w.c_n}) require_shape(*c, {hd}, "gru c");
  BasicTensor<Scalar> h(ar.shape());
  std::vector<Scalar> hr(hd), hz(hd), hn(hd);
  for (Index b = 0; b < batch; ++b)
    for (Index t = 0; t < steps; ++t) {
      const Index off = (b * steps + t) * hd;
      const Scalar* prev = t == 0 ? nullptr : h.data() + off - hd;
      detail::row_times(prev, w.u_r, w.c_r, hr.data());
      detail::row_times(prev, w.u_z, w.c_z, hz.data());
      detail::row_times(prev, w.u_n, w.c_n, hn.data());
      for (Index j = 0; j < hd; ++j) {
        const Scalar r = sigmoid(ar[off + j] + hr[j]);
        const Scalar z = sigmoid(az[off + j] + hz[j]);
        const Scalar n = std::tanh(an[off + j] + r * hn[j]);
        const Scalar hp = prev ? prev[j] : Scalar(0);
        h[off + j] = (Scalar(1) - z) * n + z * hp;
      }
    }
  return h;
}

// Gradients of sum(h .* dh) given the states h returned by the scan.
template <typename Scalar>
GruGrads<Scalar> gru_backward(const BasicTensor<Scalar>& ar, const BasicTensor<Scalar>& az,
                              const BasicTensor<Scalar>& an, const GruWeights<Scalar>& w,
                              const BasicTensor<Scalar>& h, const BasicTensor<Scalar>& dh) {
  require_shape(h, ar.shape(), "gru_backward h");
  require_shape(dh, ar.shape(), "gru_backward dh");
  const Index batch = ar.dim(0), steps = ar.dim(1), hd = ar.dim(2);
  const Shape sq{hd, hd}, vec{hd};
  GruGrads<Scalar> g{BasicTensor<Scalar>(ar.shape()),
                     BasicTensor<Scalar>(ar.shape()),
                     BasicTensor<Scalar>(ar.shape()),
                     {BasicTensor<Scalar>(sq), BasicTensor<Scalar>(sq), BasicTensor<Scalar>(sq),
                      BasicTensor<Scalar>(vec), BasicTensor<Scalar>(vec), BasicTensor<Scalar>(vec)}};
  GruWeights<Scalar>& dw = g.d_weights;
  std::vector<Scalar> p(hd), hr(hd), hz(hd), hn(hd), dhn(hd), zero(hd, Scalar(0));
  for (Index b = 0; b < batch; ++b) {
    std::fill(p.begin(), p.end(), Scalar(0));
    for (Index t = steps - 1; t >= 0; --t) {
      const Index off = (b * steps + t) * hd;
      const Scalar* prev = t == 0 ? nullptr : h.data() + off - hd;
      const Scalar* hp = prev ? prev : zero.data();
      detail::row_times(prev, w.u_r, w.c_r, hr.data());
      detail::row_times(prev, w.u_z, w.c_z, hz.data());
      detail::row_times(prev, w.u_n, w.c_n, hn.data());
      Scalar* dar = g.d_ar.data() + off;
      Scalar* daz = g.d_az.data() + off;
      Scalar* dan = g.d_an.data() + off;
      for (Index j = 0; j < hd; ++j) {
        const Scalar r = sigmoid(ar[off + j] + hr[j]);
        const Scalar z = sigmoid(az[off + j] + hz[j]);
        const Scalar n = std::tanh(an[off + j] + r * hn[j]);
        const Scalar gt = dh[off + j] + p[j];
        const Scalar dn = gt * (Scalar(1) - z);
        const Scalar dz = gt * (hp[j] - n);
        dan[j] = dn * (Scalar(1) - n * n);
        const Scalar dr = dan[j] * hn[j];
        dhn[j] = dan[j] * r;
        daz[j] = dz * z * (Scalar(1) - z);
        dar[j] = dr * r * (Scalar(1) - r);
        p[j] = gt * z;
        dw.c_r[j] += dar[j];
        dw.c_z[j] += daz[j];
        dw.c_n[j] += dhn[j];
      }
      if (!prev) continue;
      for (Index i = 0; i < hd; ++i)
        for (Index j = 0; j < hd; ++j) {
          dw.u_r(i, j) += prev[i] * dar[j];
          dw.u_z(i, j) += prev[i] * daz[j];
          dw.u_n(i, j) += prev[i] * dhn[j];
        }
      for (Index i = 0; i < hd; ++i) {
        Scalar acc(0);
        for (Index j = 0; j < hd; ++j) acc += w.u_r(i, j) * dar[j];
        for (Index j = 0; j < hd; ++j) acc += w.u_z(i, j) * daz[j];
        for (Index j = 0; j < hd; ++j) acc += w.u_n(i, j) * dhn[j];
        p[i] += acc;
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Diagonal linear RNN, per head:
//   H_t = diag(a_t) H_{t-1} + k_t v_t^T,  y_t = H_t^T q_t
// q, k, a: [B, T, N, K]; v: [B, T, N, V]; h0: [B, N, K, V].
// ---------------------------------------------------------------------------

template <typename Scalar>
struct DiagLinearInputs {
  BasicTensor<Scalar> queries, keys, decay, values, initial_state;
};

template <typename Scalar>
struct DiagLinearGrads {
  BasicTensor<Scalar> d_queries, d_keys, d_decay, d_values, d_initial_state;
};

template <typename Scalar>
RecurrenceDims diag_linear_dims(const DiagLinearInputs<Scalar>& in) {
  if (in.values.rank() != 4 || in.queries.rank() != 4)
    throw DimensionError("diag_linear: expected rank-4 q and v, got " + shape_str(in.queries.shape()) +
                         " and " + shape_str(in.values.shape()));
  const RecurrenceDims d{in.values.dim(0), in.values.dim(1), in.values.dim(2), in.queries.dim(3),
                         in.values.dim(3)};
  require_shape(in.queries, {d.batch, d.steps, d.heads, d.key_dim}, "diag_linear q");
  require_shape(in.keys, in.queries.shape(), "diag_linear k");
  require_shape(in.decay, in.queries.shape(), "diag_linear a");
  require_shape(in.initial_state, {d.batch, d.heads, d.key_dim, d.value_dim}, "diag_linear h0");
  return d;
}

// Returns Y [B, T, N, V]; with `states` set, also fills [B, T, N, K, V].
template <typename Scalar>
BasicTensor<Scalar> diag_linear_scan(const DiagLinearInputs<Scalar>& in,
                                     BasicTensor<Scalar>* states = nullptr) {
  const RecurrenceDims d = diag_linear_dims(in);
  const Index kd = d.key_dim, vd = d.value_dim, kv = kd * vd;
  BasicTensor<Scalar> y({d.batch, d.steps, d.heads, vd});
  if (states) *states = BasicTensor<Scalar>({d.batch, d.steps, d.heads, kd, vd});
  std::vector<Scalar> hbuf(kv);
  for (Index b = 0; b < d.batch; ++b)
    for (Index n = 0; n < d.heads; ++n) {
      std::copy_n(in.initial_state.data() + (b * d.heads + n) * kv, kv, hbuf.data());
      for (Index t = 0; t < d.steps; ++t) {
        const Index btn = (b * d.steps + t) * d.heads + n;
        const Scalar* q = in.queries.data() + btn * kd;
        const Scalar* k = in.keys.data() + btn * kd;
        const Scalar* a = in.decay.data() + btn * kd;
        const Scalar* v = in.values.data() + btn * vd;
        for (Index i = 0; i < kd; ++i)
          for (Index j = 0; j < vd; ++j) hbuf[i * vd + j] = a[i] * hbuf[i * vd + j] + k[i] * v[j];
        Scalar* out = y.data() + btn * vd;
        for (Index i = 0; i < kd; ++i)
          for (Index j = 0; j < vd; ++j) out[j] += hbuf[i * vd + j] * q[i];
        if (states) std::copy_n(hbuf.data(), kv, states->data() + btn * kv);
      }
    }
  return y;
}

template <typename Scalar>
DiagLinearGrads<Scalar> diag_linear_backward(const DiagLinearInputs<Scalar>& in,
                                             const BasicTensor<Scalar>& states,
                                             const BasicTensor<Scalar>& dy) {
  const RecurrenceDims d = diag_linear_dims(in);
  const Index kd = d.key_dim, vd = d.value_dim, kv = kd * vd;
  require_shape(states, {d.batch, d.steps, d.heads, kd, vd}, "diag_linear_backward states");
  require_shape(dy, {d.batch, d.steps, d.heads, vd}, "diag_linear_backward dy");
  DiagLinearGrads<Scalar> g{BasicTensor<Scalar>(in.queries.shape()), BasicTensor<Scalar>(in.keys.shape()),
                            BasicTensor<Scalar>(in.decay.shape()), BasicTensor<Scalar>(in.values.shape()),
                            BasicTensor<Scalar>(in.initial_state.shape())};
  std::vector<Scalar> p(kv), gt(kv);
  for (Index b = 0; b < d.batch; ++b)
    for (Index n = 0; n < d.heads; ++n) {
      std::fill(p.begin(), p.end(), Scalar(0));
      for (Index t = d.steps - 1; t >= 0; --t) {
        const Index btn = (b * d.steps + t) * d.heads + n;
        const Scalar* q = in.queries.data() + btn * kd;
        const Scalar* k = in.keys.data() + btn * kd;
        const Scalar* a = in.decay.data() + btn * kd;
        const Scalar* v = in.values.data() + btn * vd;
        const Scalar* dyt = dy.data() + btn * vd;
        const Scalar* ht = states.data() + btn * kv;
        const Scalar* hprev = t == 0 ? in.initial_state.data() + (b * d.heads + n) * kv
                                     : states.data() + (btn - d.heads) * kv;
        for (Index i = 0; i < kd; ++i)
          for (Index j = 0; j < vd; ++j) gt[i * vd + j] = q[i] * dyt[j] + p[i * vd + j];
        for (Index i = 0; i < kd; ++i) {
          Scalar dq(0), da(0), dk(0);
          for (Index j = 0; j < vd; ++j) {
            dq += ht[i * vd + j] * dyt[j];
            da += gt[i * vd + j] * hprev[i * vd + j];
            dk += gt[i * vd + j] * v[j];
          }
          g.d_queries[btn * kd + i] = dq;
          g.d_decay[btn * kd + i] = da;
          g.d_keys[btn * kd + i] = dk;
        }
        for (Index j = 0; j < vd; ++j) {
          Scalar dv(0);
          for (Index i = 0; i < kd; ++i) dv += gt[i * vd + j] * k[i];
          g.d_values[btn * vd + j] = dv;
        }
        for (Index i = 0; i < kd; ++i)
          for (Index j = 0; j < vd; ++j) p[i * vd + j] = a[i] * gt[i * vd + j];
      }
      std::copy_n(p.data(), kv, g.d_initial_state.data() + (b * d.heads + n) * kv);
    }
  return g;
}

// ---------------------------------------------------------------------------
// Parameters and tape wiring
// ---------------------------------------------------------------------------

struct VectorRnnParams {
  Tensor transition;  // [d, d]
};

struct GruParams {
  Tensor w_r, w_z, w_n;  // [d_in, H]
  Tensor b_r, b_z, b_n;  // [H]
  Tensor u_r, u_z, u_n;  // [H, H]
  Tensor c_r, c_z, c_n;  // [H]

  template <typename Fn>
  void visit(Fn&& fn) {
    fn("w_r", w_r); fn("w_z", w_z); fn("w_n", w_n);
    fn("b_r", b_r); fn("b_z", b_z); fn("b_n", b_n);
    fn("u_r", u_r); fn("u_z", u_z); fn("u_n", u_n);
    fn("c_r", c_r); fn("c_z", c_z); fn("c_n", c_n);
  }
};

struct DiagLinearParams {
  Index heads = 1, key_dim = 1, value_dim = 1;
  Tensor w_q, w_k;  // [d, N*K]
  Tensor w_a, b_a;  // [d, N*K], [N*K]
  Tensor w_v;       // [d, N*V]

  template <typename Fn>
  void visit(Fn&& fn) {
    fn("w_q", w_q); fn("w_k", w_k); fn("w_a", w_a); fn("b_a", b_a); fn("w_v", w_v);
  }
};

// Entries uniform in +-gain/sqrt(d).
VectorRnnParams init_vector_rnn(Index dim, double gain, std::uint64_t seed);
// PyTorch-style U(-1/sqrt(H), 1/sqrt(H)) for every tensor.
GruParams init_gru(Index input_dim, Index hidden, std::uint64_t seed);
// Projections U(-1/sqrt(d), 1/sqrt(d)); decay bias so sigmoid(b_a) starts near 0.9.
DiagLinearParams init_diag_linear(Index input_dim, Index heads, Index key_dim, Index value_dim,
                                  std::uint64_t seed);

// x: [B, T, d] on the tape. Returns hidden states [B, T, d].
Var apply_vector_rnn(Tape& tape, Var transition, Var x);

struct GruVars {
  Var w_r, w_z, w_n, b_r, b_z, b_n, u_r, u_z, u_n, c_r, c_z, c_n;
};
// x: [B, T, d_in]. Returns hidden states [B, T, H].
Var apply_gru(Tape& tape, const GruVars& vars, Var x);

struct DiagLinearVars {
  Var w_q, w_k, w_a, b_a, w_v;
};
// x: [B, T, d]. Returns outputs [B, T, N*V].
Var apply_diag_linear(Tape& tape, const DiagLinearVars& vars, const DiagLinearParams& shape, Var x);

}  // namespace m2rnn
