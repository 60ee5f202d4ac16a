// SPDX-License-Identifier: Apache-2.0
//
// Dense kernels. Every reduction runs in ascending index order so that results
// are bitwise reproducible and fused code paths can match unfused compositions
// exactly. Eigen is used for storage, views and elementwise maps only; none of
// its reordering reductions (operator*, sum(), norm()) appear here.
#pragma once

#include <cmath>
#include <span>
#include <string>
#include <utility>

#include "m2rnn/tensor.hpp"

namespace m2rnn {

template <typename Scalar>
using MatRef = Eigen::Ref<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstMatRef = Eigen::Ref<const RowMatrix<Scalar>>;

// ---------------------------------------------------------------------------
// Scalar functions
// ---------------------------------------------------------------------------

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

template <typename Scalar>
Scalar silu(Scalar x) {
  return x * sigmoid(x);
}

template <typename Scalar>
Scalar silu_grad(Scalar x) {
  const Scalar s = sigmoid(x);
  return s * (Scalar(1) + x * (Scalar(1) - s));
}

// log(1 + e^x) without overflow.
template <typename Scalar>
Scalar softplus(Scalar x) {
  return std::max(x, Scalar(0)) + std::log1p(std::exp(-std::abs(x)));
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

namespace detail {

// c[j] += a * b[j]; the compiler vectorizes across j, which leaves the
// per-element accumulation order untouched.
template <typename Scalar>
inline void axpy(Scalar a, const Scalar* __restrict b, Scalar* __restrict c, Index n) {
  for (Index j = 0; j < n; ++j) c[j] += a * b[j];
}

}  // namespace detail

// c = a * b, each c(i,j) accumulated over ascending k starting from zero.
template <typename Scalar>
void matmul_into(const ConstMatRef<Scalar>& a, const ConstMatRef<Scalar>& b, MatRef<Scalar> c) {
  const Index m = a.rows(), kd = a.cols(), n = b.cols();
  c.setZero();
  for (Index i = 0; i < m; ++i) {
    Scalar* crow = c.data() + i * c.outerStride();
    const Scalar* arow = a.data() + i * a.outerStride();
    for (Index k = 0; k < kd; ++k) detail::axpy(arow[k], b.data() + k * b.outerStride(), crow, n);
  }
}

// c += a^T * b with c(i,j) += a(k,i) * b(k,j) over ascending k.
template <typename Scalar>
void matmul_tn_acc(const ConstMatRef<Scalar>& a, const ConstMatRef<Scalar>& b, MatRef<Scalar> c) {
  const Index n = b.cols();
  for (Index k = 0; k < a.rows(); ++k) {
    const Scalar* arow = a.data() + k * a.outerStride();
    const Scalar* brow = b.data() + k * b.outerStride();
    for (Index i = 0; i < a.cols(); ++i) detail::axpy(arow[i], brow, c.data() + i * c.outerStride(), n);
  }
}

// c = a * b^T with c(i,j) = sum_k a(i,k) * b(j,k), ascending k.
template <typename Scalar>
void matmul_nt_into(const ConstMatRef<Scalar>& a, const ConstMatRef<Scalar>& b, MatRef<Scalar> c) {
  const RowMatrix<Scalar> bt = b.transpose();
  matmul_into<Scalar>(a, bt, c);
}

template <typename Scalar>
BasicTensor<Scalar> matmul(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  BasicTensor<Scalar> c({a.dim(0), b.dim(1)});
  matmul_into<Scalar>(a.matrix(), b.matrix(), c.matrix());
  return c;
}

template <typename Scalar>
BasicTensor<Scalar> transpose(const BasicTensor<Scalar>& a) {
  if (a.rank() != 2) throw DimensionError("transpose: expected rank 2, got " + shape_str(a.shape()));
  BasicTensor<Scalar> t({a.dim(1), a.dim(0)});
  t.matrix() = a.matrix().transpose();
  return t;
}

template <typename Scalar>
BasicTensor<Scalar> outer(const BasicTensor<Scalar>& u, const BasicTensor<Scalar>& v) {
  BasicTensor<Scalar> out({u.size(), v.size()});
  for (Index i = 0; i < u.size(); ++i)
    for (Index j = 0; j < v.size(); ++j) out(i, j) = u[i] * v[j];
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename Scalar, typename Fn>
BasicTensor<Scalar> map(const BasicTensor<Scalar>& x, Fn fn) {
  BasicTensor<Scalar> out(x.shape());
  out.array() = x.array().unaryExpr(fn);
  return out;
}

template <typename Scalar>
BasicTensor<Scalar> tanh(const BasicTensor<Scalar>& x) {
  return map(x, [](Scalar v) { return std::tanh(v); });
}
template <typename Scalar>
BasicTensor<Scalar> sigmoid(const BasicTensor<Scalar>& x) {
  return map(x, [](Scalar v) { return sigmoid(v); });
}
template <typename Scalar>
BasicTensor<Scalar> silu(const BasicTensor<Scalar>& x) {
  return map(x, [](Scalar v) { return silu(v); });
}

template <typename Scalar>
void require_same_shape(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <typename Scalar>
BasicTensor<Scalar> add(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  require_same_shape(a, b, "add");
  BasicTensor<Scalar> out(a.shape());
  out.array() = a.array() + b.array();
  return out;
}

template <typename Scalar>
BasicTensor<Scalar> mul(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  require_same_shape(a, b, "mul");
  BasicTensor<Scalar> out(a.shape());
  out.array() = a.array() * b.array();
  return out;
}

template <typename Scalar>
BasicTensor<Scalar> scale(const BasicTensor<Scalar>& x, Scalar s) {
  BasicTensor<Scalar> out(x.shape());
  out.array() = x.array() * s;
  return out;
}

template <typename Scalar>
Scalar sum(const BasicTensor<Scalar>& x) {
  Scalar acc(0);
  for (Scalar v : x.values()) acc += v;
  return acc;
}

template <typename Scalar>
Scalar frobenius_norm(std::span<const Scalar> x) {
  Scalar acc(0);
  for (Scalar v : x) acc += v * v;
  return std::sqrt(acc);
}

// ---------------------------------------------------------------------------
// Causal depthwise convolution over the time axis.
// x: [T, C] or [B, T, C]; kernel: [W, C]; bias: [C].
// out[t][c] = bias[c] + sum_j kernel[j][c] * x[t - W + 1 + j][c], zero left pad.
// ---------------------------------------------------------------------------

namespace detail {
inline std::pair<Index, Index> conv_batch_time(const Shape& s) {
  if (s.size() == 2) return {1, s[0]};
  if (s.size() == 3) return {s[0], s[1]};
  throw DimensionError("conv1d: expected [T,C] or [B,T,C], got " + shape_str(s));
}
}  // namespace detail

template <typename Scalar>
BasicTensor<Scalar> causal_depthwise_conv1d(const BasicTensor<Scalar>& x,
                                            const BasicTensor<Scalar>& kernel,
                                            const BasicTensor<Scalar>& bias) {
  const auto [batch, steps] = detail::conv_batch_time(x.shape());
  const Index channels = x.shape().back();
  if (kernel.rank() != 2 || kernel.dim(1) != channels || bias.size() != channels)
    throw DimensionError("conv1d: kernel " + shape_str(kernel.shape()) + " / bias " +
                         shape_str(bias.shape()) + " do not match input " +
                         shape_str(x.shape()));
  const Index width = kernel.dim(0);
  BasicTensor<Scalar> out(x.shape());
  for (Index b = 0; b < batch; ++b)
    for (Index t = 0; t < steps; ++t)
      for (Index c = 0; c < channels; ++c) {
        Scalar acc = bias[c];
        for (Index j = 0; j < width; ++j) {
          const Index src = t - width + 1 + j;
          if (src < 0) continue;
          acc += kernel[j * channels + c] * x[(b * steps + src) * channels + c];
        }
        out[(b * steps + t) * channels + c] = acc;
      }
  return out;
}

template <typename Scalar>
struct ConvGrads {
  BasicTensor<Scalar> dx, dkernel, dbias;
};

template <typename Scalar>
ConvGrads<Scalar> causal_depthwise_conv1d_backward(const BasicTensor<Scalar>& x,
                                                   const BasicTensor<Scalar>& kernel,
                                                   const BasicTensor<Scalar>& dout) {
  const auto [batch, steps] = detail::conv_batch_time(x.shape());
  const Index channels = x.shape().back();
  const Index width = kernel.dim(0);
  ConvGrads<Scalar> g{BasicTensor<Scalar>(x.shape()), BasicTensor<Scalar>(kernel.shape()),
                      BasicTensor<Scalar>({channels})};
  for (Index b = 0; b < batch; ++b)
    for (Index t = 0; t < steps; ++t)
      for (Index c = 0; c < channels; ++c) {
        const Scalar go = dout[(b * steps + t) * channels + c];
        g.dbias[c] += go;
        for (Index j = 0; j < width; ++j) {
          const Index src = t - width + 1 + j;
          if (src < 0) continue;
          g.dkernel[j * channels + c] += go * x[(b * steps + src) * channels + c];
          g.dx[(b * steps + src) * channels + c] += go * kernel[j * channels + c];
        }
      }
  return g;
}

// ---------------------------------------------------------------------------
// RMSNorm: s = 1/sqrt(mean(x^2) + eps), y = w * x * s.
// ---------------------------------------------------------------------------

inline constexpr double kRmsNormEps = 1e-6;

template <typename Scalar>
Scalar sum_of_squares(std::span<const Scalar> x) {
  Scalar acc(0);
  for (Scalar v : x) acc += v * v;
  return acc;
}

// Inverse RMS from an already-reduced sum of squares over `features` entries.
template <typename Scalar>
Scalar rms_inverse(Scalar sumsq, Index features, Scalar eps) {
  return Scalar(1) / std::sqrt(sumsq / Scalar(features) + eps);
}

template <typename Scalar>
void rmsnorm_apply(std::span<const Scalar> x, std::span<const Scalar> w, Scalar s,
                   std::span<Scalar> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = w[i] * x[i] * s;
}

template <typename Scalar>
Scalar sum_of_products(std::span<const Scalar> a, std::span<const Scalar> b) {
  Scalar acc(0);
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

// Local part of the backward pass once r = sum_j w_j dy_j x_j is known.
// `features` is the global feature count d.
template <typename Scalar>
void rmsnorm_backward_apply(std::span<const Scalar> x, std::span<const Scalar> w, Scalar s,
                            Scalar r, Index features, std::span<const Scalar> dy,
                            std::span<Scalar> dx, std::span<Scalar> dw) {
  const Scalar s3 = s * s * s;
  for (std::size_t i = 0; i < x.size(); ++i) {
    dx[i] = s * (w[i] * dy[i]) - r * s3 * x[i] / Scalar(features);
    dw[i] += dy[i] * x[i] * s;
  }
}

template <typename Scalar>
Scalar weighted_dot(std::span<const Scalar> w, std::span<const Scalar> dy,
                    std::span<const Scalar> x) {
  Scalar acc(0);
  for (std::size_t i = 0; i < x.size(); ++i) acc += (w[i] * dy[i]) * x[i];
  return acc;
}

template <typename Scalar>
struct RmsNormResult {
  BasicTensor<Scalar> y;
  Scalar s;
};

template <typename Scalar>
RmsNormResult<Scalar> rmsnorm_forward(const BasicTensor<Scalar>& x, const BasicTensor<Scalar>& w,
                                      Scalar eps = Scalar(kRmsNormEps)) {
  require_same_shape(x, w, "rmsnorm_forward");
  const Scalar s = rms_inverse(sum_of_squares(x.values()), x.size(), eps);
  BasicTensor<Scalar> y(x.shape());
  rmsnorm_apply(x.values(), w.values(), s, y.values());
  return {std::move(y), s};
}

template <typename Scalar>
struct RmsNormGrads {
  BasicTensor<Scalar> dx, dw;
};

template <typename Scalar>
RmsNormGrads<Scalar> rmsnorm_backward(const BasicTensor<Scalar>& x, const BasicTensor<Scalar>& w,
                                      Scalar s, const BasicTensor<Scalar>& dy) {
  require_same_shape(x, w, "rmsnorm_backward");
  require_same_shape(x, dy, "rmsnorm_backward");
  RmsNormGrads<Scalar> g{BasicTensor<Scalar>(x.shape()), BasicTensor<Scalar>(x.shape())};
  const Scalar r = weighted_dot(w.values(), dy.values(), x.values());
  rmsnorm_backward_apply(x.values(), w.values(), s, r, x.size(), dy.values(), g.dx.values(),
                         g.dw.values());
  return g;
}

// Row-wise RMSNorm over the last axis of x, split into contiguous groups of
// `group` features, each normalized independently with its slice of w.
// Returns y and the per-(row, group) inverse RMS values.
template <typename Scalar>
std::pair<BasicTensor<Scalar>, BasicTensor<Scalar>> rmsnorm_rows(const BasicTensor<Scalar>& x,
                                                                 const BasicTensor<Scalar>& w,
                                                                 Index group, Scalar eps) {
  const Index width = x.shape().back();
  if (w.size() != width || group <= 0 || width % group != 0)
    throw DimensionError("rmsnorm_rows: weight " + shape_str(w.shape()) + " / group " +
                         std::to_string(group) + " incompatible with " + shape_str(x.shape()));
  const Index rows = x.size() / width, groups = width / group;
  BasicTensor<Scalar> y(x.shape());
  BasicTensor<Scalar> s({rows, groups});
  for (Index r = 0; r < rows; ++r)
    for (Index g = 0; g < groups; ++g) {
      const Index off = r * width + g * group;
      std::span<const Scalar> xs(x.data() + off, group);
      const Scalar inv = rms_inverse(sum_of_squares(xs), group, eps);
      s(r, g) = inv;
      rmsnorm_apply(xs, std::span<const Scalar>(w.data() + g * group, group), inv,
                    std::span<Scalar>(y.data() + off, group));
    }
  return {std::move(y), std::move(s)};
}

template <typename Scalar>
RmsNormGrads<Scalar> rmsnorm_rows_backward(const BasicTensor<Scalar>& x,
                                           const BasicTensor<Scalar>& w,
                                           const BasicTensor<Scalar>& s, Index group,
                                           const BasicTensor<Scalar>& dy) {
  const Index width = x.shape().back();
  const Index rows = x.size() / width, groups = width / group;
  RmsNormGrads<Scalar> out{BasicTensor<Scalar>(x.shape()), BasicTensor<Scalar>(w.shape())};
  for (Index r = 0; r < rows; ++r)
    for (Index g = 0; g < groups; ++g) {
      const Index off = r * width + g * group;
      std::span<const Scalar> xs(x.data() + off, group), dys(dy.data() + off, group);
      std::span<const Scalar> ws(w.data() + g * group, group);
      const Scalar rr = weighted_dot(ws, dys, xs);
      rmsnorm_backward_apply(xs, ws, s(r, g), rr, group, dys,
                             std::span<Scalar>(out.dx.data() + off, group),
                             std::span<Scalar>(out.dw.data() + g * group, group));
    }
  return out;
}

}  // namespace m2rnn
