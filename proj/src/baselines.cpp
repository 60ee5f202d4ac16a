// SPDX-License-Identifier: Apache-2.0
#include "m2rnn/baselines.hpp"

#include <random>

namespace m2rnn {

namespace {

Tensor uniform(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = dist(rng);
  return t;
}

}  // namespace

VectorRnnParams init_vector_rnn(Index dim, double gain, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return {uniform({dim, dim}, gain / std::sqrt(static_cast<double>(dim)), rng)};
}

GruParams init_gru(Index input_dim, Index hidden, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  GruParams p;
  for (Tensor* w : {&p.w_r, &p.w_z, &p.w_n}) *w = uniform({input_dim, hidden}, bound, rng);
  for (Tensor* b : {&p.b_r, &p.b_z, &p.b_n}) *b = uniform({hidden}, bound, rng);
  for (Tensor* u : {&p.u_r, &p.u_z, &p.u_n}) *u = uniform({hidden, hidden}, bound, rng);
  for (Tensor* c : {&p.c_r, &p.c_z, &p.c_n}) *c = uniform({hidden}, bound, rng);
  return p;
}

DiagLinearParams init_diag_linear(Index input_dim, Index heads, Index key_dim, Index value_dim,
                                  std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(input_dim));
  DiagLinearParams p;
  p.heads = heads;
  p.key_dim = key_dim;
  p.value_dim = value_dim;
  p.w_q = uniform({input_dim, heads * key_dim}, bound, rng);
  p.w_k = uniform({input_dim, heads * key_dim}, bound, rng);
  p.w_a = uniform({input_dim, heads * key_dim}, bound, rng);
  p.b_a = Tensor::full({heads * key_dim}, std::log(9.0));
  p.w_v = uniform({input_dim, heads * value_dim}, bound, rng);
  return p;
}

Var apply_vector_rnn(Tape& tape, Var transition, Var x) {
  const Tensor& w = tape.value(transition);
  const Tensor& xv = tape.value(x);
  Tensor h = vector_rnn_scan(w, xv);
  auto backward = [w, h](const Tensor& dh) {
    VectorRnnGrads<double> g = vector_rnn_backward(w, h, dh);
    return std::vector<Tensor>{std::move(g.d_transition), std::move(g.d_inputs)};
  };
  return tape.custom({transition, x}, h, std::move(backward));
}

Var apply_gru(Tape& tape, const GruVars& p, Var x) {
  const Tensor& xv = tape.value(x);
  if (xv.rank() != 3) throw DimensionError("gru: expected x [B,T,d], got " + shape_str(xv.shape()));
  const Index batch = xv.dim(0), steps = xv.dim(1), rows = batch * steps;
  const Index hidden = tape.value(p.u_r).dim(0);
  const Var x2 = tape.reshape(x, {rows, xv.dim(2)});
  auto project = [&](Var w, Var b) {
    return tape.reshape(tape.add_row_bias(tape.matmul(x2, w), b), {batch, steps, hidden});
  };
  const Var ar = project(p.w_r, p.b_r), az = project(p.w_z, p.b_z), an = project(p.w_n, p.b_n);
  GruWeights<double> w{tape.value(p.u_r), tape.value(p.u_z), tape.value(p.u_n),
                       tape.value(p.c_r), tape.value(p.c_z), tape.value(p.c_n)};
  Tensor arv = tape.value(ar), azv = tape.value(az), anv = tape.value(an);
  Tensor h = gru_scan(arv, azv, anv, w);
  auto backward = [arv = std::move(arv), azv = std::move(azv), anv = std::move(anv),
                   w = std::move(w), h](const Tensor& dh) {
    GruGrads<double> g = gru_backward(arv, azv, anv, w, h, dh);
    GruWeights<double>& dw = g.d_weights;
    return std::vector<Tensor>{std::move(g.d_ar), std::move(g.d_az), std::move(g.d_an),
                               std::move(dw.u_r), std::move(dw.u_z), std::move(dw.u_n),
                               std::move(dw.c_r), std::move(dw.c_z), std::move(dw.c_n)};
  };
  return tape.custom({ar, az, an, p.u_r, p.u_z, p.u_n, p.c_r, p.c_z, p.c_n}, std::move(h),
                     std::move(backward));
}

Var apply_diag_linear(Tape& tape, const DiagLinearVars& p, const DiagLinearParams& shape, Var x) {
  const Tensor& xv = tape.value(x);
  if (xv.rank() != 3)
    throw DimensionError("diag_linear: expected x [B,T,d], got " + shape_str(xv.shape()));
  const Index batch = xv.dim(0), steps = xv.dim(1), rows = batch * steps;
  const Index n = shape.heads, kd = shape.key_dim, vd = shape.value_dim;
  const Var x2 = tape.reshape(x, {rows, xv.dim(2)});
  const Var q = tape.reshape(tape.matmul(x2, p.w_q), {batch, steps, n, kd});
  const Var k = tape.reshape(tape.matmul(x2, p.w_k), {batch, steps, n, kd});
  const Var a = tape.reshape(tape.sigmoid(tape.add_row_bias(tape.matmul(x2, p.w_a), p.b_a)),
                             {batch, steps, n, kd});
  const Var v = tape.reshape(tape.matmul(x2, p.w_v), {batch, steps, n, vd});

  DiagLinearInputs<double> in{tape.value(q), tape.value(k), tape.value(a), tape.value(v),
                              Tensor({batch, n, kd, vd})};
  Tensor y = diag_linear_scan(in);
  auto backward = [in = std::move(in)](const Tensor& dy) {
    Tensor states;
    diag_linear_scan(in, &states);
    DiagLinearGrads<double> g = diag_linear_backward(in, states, dy);
    return std::vector<Tensor>{std::move(g.d_queries), std::move(g.d_keys), std::move(g.d_decay),
                               std::move(g.d_values)};
  };
  const Var y4 = tape.custom({q, k, a, v}, std::move(y), std::move(backward));
  return tape.reshape(y4, {batch, steps, n * vd});
}

}  // namespace m2rnn
