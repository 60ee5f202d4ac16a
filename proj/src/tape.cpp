// SPDX-License-Identifier: Apache-2.0
#include "m2rnn/tape.hpp"

#include <cmath>
#include <stdexcept>

#include "m2rnn/kernels.hpp"
#include "m2rnn/recurrence.hpp"

namespace m2rnn {

namespace {

Index last_dim(const Tensor& t) { return t.shape().empty() ? 1 : t.shape().back(); }

void require_row_vector(const Tensor& x, const Tensor& v, const char* op) {
  if (v.size() != last_dim(x))
    throw DimensionError(std::string(op) + ": vector " + shape_str(v.shape()) +
                         " does not match last axis of " + shape_str(x.shape()));
}

}  // namespace

Var Tape::push(Node node) {
  for (std::size_t in : node.inputs)
    if (in >= nodes_.size()) throw std::logic_error("tape: input refers to a later node");
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

Var Tape::leaf(Tensor value) {
  Node n{Op::kLeaf, {}, std::move(value)};
  return push(std::move(n));
}

Var Tape::constant(Tensor value) {
  Node n{Op::kConstant, {}, std::move(value)};
  return push(std::move(n));
}

Var Tape::matmul(Var a, Var b) {
  return push({Op::kMatmul, {a.id, b.id}, m2rnn::matmul(value(a), value(b))});
}

Var Tape::transpose(Var a) { return push({Op::kTranspose, {a.id}, m2rnn::transpose(value(a))}); }

Var Tape::outer(Var u, Var v) {
  return push({Op::kOuter, {u.id, v.id}, m2rnn::outer(value(u), value(v))});
}

Var Tape::add(Var a, Var b) { return push({Op::kAdd, {a.id, b.id}, m2rnn::add(value(a), value(b))}); }

Var Tape::sub(Var a, Var b) {
  require_same_shape(value(a), value(b), "sub");
  Tensor out(value(a).shape());
  out.array() = value(a).array() - value(b).array();
  return push({Op::kSub, {a.id, b.id}, std::move(out)});
}

Var Tape::mul(Var a, Var b) { return push({Op::kMul, {a.id, b.id}, m2rnn::mul(value(a), value(b))}); }

Var Tape::scale(Var x, Var s) {
  if (value(s).size() != 1)
    throw DimensionError("scale: factor must have one element, got " +
                         shape_str(value(s).shape()));
  return push({Op::kScale, {x.id, s.id}, m2rnn::scale(value(x), value(s)[0])});
}

Var Tape::affine(Var x, double a, double b) {
  Tensor out(value(x).shape());
  out.array() = value(x).array() * a + b;
  Node n{Op::kAffine, {x.id}, std::move(out)};
  n.a = a;
  n.b = b;
  return push(std::move(n));
}

Var Tape::add_row_bias(Var x, Var bias) {
  const Tensor& xv = value(x);
  const Tensor& bv = value(bias);
  require_row_vector(xv, bv, "add_row_bias");
  Tensor out = xv;
  const Index c = bv.size();
  for (Index i = 0; i < out.size(); ++i) out[i] += bv[i % c];
  return push({Op::kAddRowBias, {x.id, bias.id}, std::move(out)});
}

Var Tape::mul_cols(Var x, Var w) {
  const Tensor& xv = value(x);
  const Tensor& wv = value(w);
  require_row_vector(xv, wv, "mul_cols");
  Tensor out = xv;
  const Index c = wv.size();
  for (Index i = 0; i < out.size(); ++i) out[i] *= wv[i % c];
  return push({Op::kMulCols, {x.id, w.id}, std::move(out)});
}

Var Tape::power(Var x, double p) {
  Node n{Op::kPower, {x.id}, map(value(x), [p](double v) { return std::pow(v, p); })};
  n.a = p;
  return push(std::move(n));
}

Var Tape::tanh(Var x) { return push({Op::kTanh, {x.id}, m2rnn::tanh(value(x))}); }
Var Tape::sigmoid(Var x) { return push({Op::kSigmoid, {x.id}, m2rnn::sigmoid(value(x))}); }
Var Tape::silu(Var x) { return push({Op::kSilu, {x.id}, m2rnn::silu(value(x))}); }

Var Tape::conv1d(Var x, Var kernel, Var bias) {
  return push({Op::kConv1d,
               {x.id, kernel.id, bias.id},
               causal_depthwise_conv1d(value(x), value(kernel), value(bias))});
}

Var Tape::rmsnorm(Var x, Var w, Index group, double eps) {
  auto [y, s] = rmsnorm_rows(value(x), value(w), group, eps);
  Node n{Op::kRmsNorm, {x.id, w.id}, std::move(y), std::move(s)};
  n.group = group;
  return push(std::move(n));
}

Var Tape::forget_gate(Var x, Var alpha, Var beta) {
  const Tensor& xv = value(x);
  const Tensor& av = value(alpha);
  const Tensor& bv = value(beta);
  require_row_vector(xv, av, "forget_gate");
  require_row_vector(xv, bv, "forget_gate");
  Tensor out(xv.shape());
  const Index c = av.size();
  for (Index i = 0; i < out.size(); ++i) out[i] = m2rnn::forget_gate(xv[i], av[i % c], bv[i % c]);
  return push({Op::kForgetGate, {x.id, alpha.id, beta.id}, std::move(out)});
}

Var Tape::reshape(Var x, Shape shape) {
  return push({Op::kReshape, {x.id}, value(x).reshaped(std::move(shape))});
}

Var Tape::sum(Var x) { return push({Op::kSum, {x.id}, Tensor({1}, {m2rnn::sum(value(x))})}); }

Var Tape::embedding(Var table, std::vector<std::int64_t> ids) {
  const Tensor& tv = value(table);
  if (tv.rank() != 2) throw DimensionError("embedding: table must be rank 2");
  const Index width = tv.dim(1);
  Tensor out({static_cast<Index>(ids.size()), width});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || ids[r] >= tv.dim(0))
      throw DimensionError("embedding: id " + std::to_string(ids[r]) + " out of range");
    std::copy_n(tv.data() + ids[r] * width, width, out.data() + static_cast<Index>(r) * width);
  }
  Node n{Op::kEmbedding, {table.id}, std::move(out)};
  n.ids = std::move(ids);
  return push(std::move(n));
}

Var Tape::softmax_cross_entropy(Var logits, std::vector<std::int64_t> labels) {
  const Tensor& lv = value(logits);
  if (lv.rank() != 2 || lv.dim(0) != static_cast<Index>(labels.size()))
    throw DimensionError("softmax_cross_entropy: logits " + shape_str(lv.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  const Index rows = lv.dim(0), classes = lv.dim(1);
  Tensor probs(lv.shape());
  double total = 0.0;
  for (Index r = 0; r < rows; ++r) {
    const double* row = lv.data() + r * classes;
    double mx = row[0];
    for (Index c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (Index c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
    for (Index c = 0; c < classes; ++c) probs(r, c) = std::exp(row[c] - mx) / z;
    total += std::log(z) + mx - row[labels[static_cast<std::size_t>(r)]];
  }
  Node n{Op::kSoftmaxXent, {logits.id}, Tensor({1}, {total / static_cast<double>(rows)}),
         std::move(probs)};
  n.ids = std::move(labels);
  return push(std::move(n));
}

Var Tape::custom(std::vector<Var> inputs, Tensor value, CustomBackward backward) {
  Node n{Op::kCustom, {}, std::move(value)};
  for (Var v : inputs) n.inputs.push_back(v.id);
  n.custom = std::move(backward);
  return push(std::move(n));
}

const Tensor& Tape::grad(Var v) const {
  if (grads_.size() != nodes_.size()) throw std::logic_error("tape: backward() has not run");
  return grads_.at(v.id);
}

void Tape::accumulate(std::size_t id, const Tensor& g) {
  Tensor& dst = grads_[id];
  if (g.shape() != nodes_[id].value.shape())
    throw std::logic_error("tape: gradient shape " + shape_str(g.shape()) +
                           " does not match node value " + shape_str(nodes_[id].value.shape()));
  dst.array() += g.array();
}

void Tape::backward(Var loss) {
  if (value(loss).size() != 1) throw DimensionError("tape: loss must have exactly one element");
  grads_.clear();
  grads_.reserve(nodes_.size());
  for (const Node& n : nodes_) grads_.emplace_back(n.value.shape());
  grads_[loss.id][0] = 1.0;
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    for (std::size_t in : nodes_[id].inputs)
      if (in >= id) throw std::logic_error("tape: cycle detected at node " + std::to_string(id));
    propagate(id, grads_[id]);
  }
}

void Tape::propagate(std::size_t id, const Tensor& g) {
  const Node& n = nodes_[id];
  auto in = [&](std::size_t i) -> const Tensor& { return nodes_[n.inputs[i]].value; };
  auto send = [&](std::size_t i, const Tensor& grad) { accumulate(n.inputs[i], grad); };

  switch (n.op) {
    case Op::kLeaf:
    case Op::kConstant:
      break;
    case Op::kMatmul:
    {
      Tensor da(in(0).shape()), db(in(1).shape());
      matmul_nt_into<double>(g.matrix(), in(1).matrix(), da.matrix());
      matmul_tn_acc<double>(in(0).matrix(), g.matrix(), db.matrix());
      send(0, da);
      send(1, db);
    }
      break;
    case Op::kTranspose:
      send(0, m2rnn::transpose(g));
      break;
    case Op::kOuter: {
      const Tensor& u = in(0);
      const Tensor& v = in(1);
      Tensor du(u.shape()), dv(v.shape());
      for (Index i = 0; i < u.size(); ++i)
        for (Index j = 0; j < v.size(); ++j) du[i] += g(i, j) * v[j];
      for (Index j = 0; j < v.size(); ++j)
        for (Index i = 0; i < u.size(); ++i) dv[j] += g(i, j) * u[i];
      send(0, du);
      send(1, dv);
      break;
    }
    case Op::kAdd:
      send(0, g);
      send(1, g);
      break;
    case Op::kSub:
      send(0, g);
      send(1, m2rnn::scale(g, -1.0));
      break;
    case Op::kMul:
      send(0, m2rnn::mul(g, in(1)));
      send(1, m2rnn::mul(g, in(0)));
      break;
    case Op::kScale:
      send(0, m2rnn::scale(g, in(1)[0]));
      send(1, Tensor(in(1).shape(), {m2rnn::sum(m2rnn::mul(g, in(0)))}));
      break;
    case Op::kAffine:
      send(0, m2rnn::scale(g, n.a));
      break;
    case Op::kAddRowBias: {
      const Index c = in(1).size();
      Tensor db(in(1).shape());
      for (Index i = 0; i < g.size(); ++i) db[i % c] += g[i];
      send(0, g);
      send(1, db);
      break;
    }
    case Op::kMulCols: {
      const Tensor& x = in(0);
      const Tensor& w = in(1);
      const Index c = w.size();
      Tensor dx(x.shape()), dw(w.shape());
      for (Index i = 0; i < g.size(); ++i) {
        dx[i] = g[i] * w[i % c];
        dw[i % c] += g[i] * x[i];
      }
      send(0, dx);
      send(1, dw);
      break;
    }
    case Op::kPower: {
      Tensor dx(g.shape());
      for (Index i = 0; i < g.size(); ++i) dx[i] = g[i] * n.a * std::pow(in(0)[i], n.a - 1.0);
      send(0, dx);
      break;
    }
    case Op::kTanh: {
      Tensor dx(g.shape());
      for (Index i = 0; i < g.size(); ++i) dx[i] = g[i] * (1.0 - n.value[i] * n.value[i]);
      send(0, dx);
      break;
    }
    case Op::kSigmoid: {
      Tensor dx(g.shape());
      for (Index i = 0; i < g.size(); ++i) dx[i] = g[i] * n.value[i] * (1.0 - n.value[i]);
      send(0, dx);
      break;
    }
    case Op::kSilu: {
      Tensor dx(g.shape());
      for (Index i = 0; i < g.size(); ++i) dx[i] = g[i] * silu_grad(in(0)[i]);
      send(0, dx);
      break;
    }
    case Op::kConv1d: {
      auto cg = causal_depthwise_conv1d_backward(in(0), in(1), g);
      send(0, cg.dx);
      send(1, cg.dkernel);
      send(2, cg.dbias);
      break;
    }
    case Op::kRmsNorm: {
      auto rg = rmsnorm_rows_backward(in(0), in(1), n.cache, n.group, g);
      send(0, rg.dx);
      send(1, rg.dw);
      break;
    }
    case Op::kForgetGate: {
      const Tensor& x = in(0);
      const Tensor& alpha = in(1);
      const Tensor& beta = in(2);
      const Index c = alpha.size();
      Tensor dx(x.shape()), da(alpha.shape()), db(beta.shape());
      for (Index i = 0; i < g.size(); ++i) {
        const double gx = g[i] * forget_gate_dx(x[i], alpha[i % c], beta[i % c]);
        dx[i] = gx;
        db[i % c] += gx;
        da[i % c] += g[i] * forget_gate_dalpha(x[i], alpha[i % c], beta[i % c]);
      }
      send(0, dx);
      send(1, da);
      send(2, db);
      break;
    }
    case Op::kReshape:
      send(0, g.reshaped(in(0).shape()));
      break;
    case Op::kSum:
      send(0, Tensor::full(in(0).shape(), g[0]));
      break;
    case Op::kEmbedding: {
      const Index width = in(0).dim(1);
      Tensor dt(in(0).shape());
      for (std::size_t r = 0; r < n.ids.size(); ++r)
        for (Index c = 0; c < width; ++c)
          dt[n.ids[r] * width + c] += g[static_cast<Index>(r) * width + c];
      send(0, dt);
      break;
    }
    case Op::kSoftmaxXent: {
      const Index rows = n.cache.dim(0), classes = n.cache.dim(1);
      const double scale = g[0] / static_cast<double>(rows);
      Tensor dl(n.cache.shape());
      for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < classes; ++c)
          dl(r, c) = (n.cache(r, c) - (c == n.ids[static_cast<std::size_t>(r)] ? 1.0 : 0.0)) * scale;
      send(0, dl);
      break;
    }
    case Op::kCustom: {
      std::vector<Tensor> gs = n.custom(g);
      if (gs.size() != n.inputs.size())
        throw std::logic_error("tape: custom backward returned wrong gradient count");
      for (std::size_t i = 0; i < gs.size(); ++i)
        if (!gs[i].empty()) send(i, gs[i]);
      break;
    }
  }
}

}  // namespace m2rnn
