// SPDX-License-Identifier: Apache-2.0
//
// Tensor-level reverse-mode tape. Nodes are appended in evaluation order, so
// the node list is already a topological order and backward() is a single
// reverse sweep. Used two ways: as an independent gradient oracle when a
// computation is spelled out in primitives, and as the backward engine for
// model training, where fused kernels with hand-written backward passes are
// spliced in through custom().
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "m2rnn/tensor.hpp"

namespace m2rnn {

struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

class Tape {
 public:
  using CustomBackward = std::function<std::vector<Tensor>(const Tensor& grad_out)>;

  Var leaf(Tensor value);
  Var constant(Tensor value);

  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var outer(Var u, Var v);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  // x * s for a one-element s.
  Var scale(Var x, Var s);
  // a * x + b with constants a, b.
  Var affine(Var x, double a, double b);
  // x[M, C] + bias[C] broadcast over rows.
  Var add_row_bias(Var x, Var bias);
  // x[M, C] .* w[C] broadcast over rows.
  Var mul_cols(Var x, Var w);
  // Elementwise x^p for a constant exponent.
  Var power(Var x, double p);
  Var tanh(Var x);
  Var sigmoid(Var x);
  Var silu(Var x);
  Var conv1d(Var x, Var kernel, Var bias);
  // Row-wise RMSNorm over groups of `group` features along the last axis.
  Var rmsnorm(Var x, Var w, Index group, double eps);
  // Per-column forget gate: x[M, N], alpha[N], beta[N].
  Var forget_gate(Var x, Var alpha, Var beta);
  Var reshape(Var x, Shape shape);
  Var sum(Var x);
  // Rows of table[V, D] selected by ids -> [ids.size(), D].
  Var embedding(Var table, std::vector<std::int64_t> ids);
  // Mean softmax cross-entropy of logits[M, C] against labels (size M).
  Var softmax_cross_entropy(Var logits, std::vector<std::int64_t> labels);
  // Node with externally computed value; backward maps the output gradient
  // to one gradient per input (an empty tensor means "no contribution").
  Var custom(std::vector<Var> inputs, Tensor value, CustomBackward backward);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  std::size_t size() const { return nodes_.size(); }

  // Reverse sweep from a one-element node. Afterwards grad() returns the
  // accumulated gradient of every node (zeros for nodes not reached).
  void backward(Var loss);
  const Tensor& grad(Var v) const;

 private:
  enum class Op : std::uint8_t {
    kLeaf, kConstant, kMatmul, kTranspose, kOuter, kAdd, kSub, kMul, kScale, kAffine,
    kAddRowBias, kMulCols, kPower, kTanh, kSigmoid, kSilu, kConv1d, kRmsNorm, kForgetGate,
    kReshape, kSum, kEmbedding, kSoftmaxXent, kCustom
  };

  struct Node {
    Op op{};
    std::vector<std::size_t> inputs{};
    Tensor value{};
    Tensor cache{};  // op-specific saved values (e.g. inverse RMS, softmax)
    double a = 0.0, b = 0.0;
    Index group = 0;
    std::vector<std::int64_t> ids{};
    CustomBackward custom{};
  };

  Var push(Node node);
  void accumulate(std::size_t id, const Tensor& g);
  void propagate(std::size_t id, const Tensor& g);

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

}  // namespace m2rnn
