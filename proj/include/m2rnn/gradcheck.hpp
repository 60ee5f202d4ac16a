// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "m2rnn/tensor.hpp"

namespace m2rnn {

// Central-difference gradient of a scalar function, one coordinate at a time.
template <typename Scalar, typename Fn>
BasicTensor<Scalar> finite_difference_grad(Fn&& f, const BasicTensor<Scalar>& x,
                                           Scalar eps = Scalar(1e-5)) {
  BasicTensor<Scalar> probe = x;
  BasicTensor<Scalar> grad(x.shape());
  for (Index i = 0; i < x.size(); ++i) {
    const Scalar orig = probe[i];
    probe[i] = orig + eps;
    const Scalar fp = f(static_cast<const BasicTensor<Scalar>&>(probe));
    probe[i] = orig - eps;
    const Scalar fm = f(static_cast<const BasicTensor<Scalar>&>(probe));
    probe[i] = orig;
    grad[i] = (fp - fm) / (Scalar(2) * eps);
  }
  return grad;
}

// max|a - b| / max(max|a|, max|b|). Zero when both are identically zero.
template <typename Scalar>
Scalar relative_error(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("relative_error: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  Scalar diff(0), scale(0);
  for (Index i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
  }
  if (scale == Scalar(0)) return Scalar(0);
  return diff / scale;
}

template <typename Scalar>
Scalar max_abs_diff(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("max_abs_diff: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  Scalar diff(0);
  for (Index i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a[i] - b[i]));
  return diff;
}

}  // namespace m2rnn
