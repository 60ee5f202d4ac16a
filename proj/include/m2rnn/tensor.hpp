// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensor with an explicit shape. Storage is an Eigen column
// array; 2-D views are exposed as row-major Eigen maps so that kernels can be
// written against Eigen expressions without copying.
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "m2rnn/errors.hpp"

namespace m2rnn {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;
template <typename Scalar>
using VectorMap = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>;
template <typename Scalar>
using ConstVectorMap = Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>;

inline Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename Scalar>
class BasicTensor {
 public:
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_ = Storage::Zero(shape_numel(shape_));
  }

  BasicTensor(Shape shape, std::vector<Scalar> values) : shape_(std::move(shape)) {
    check_shape(shape_);
    if (static_cast<Index>(values.size()) != shape_numel(shape_))
      throw DimensionError("tensor: " + std::to_string(values.size()) +
                           " values do not fill shape " + shape_str(shape_));
    data_ = Eigen::Map<const Storage>(values.data(), static_cast<Index>(values.size()));
  }

  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape)); }

  static BasicTensor full(Shape shape, Scalar value) {
    BasicTensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  static BasicTensor identity(Index n) {
    BasicTensor t({n, n});
    for (Index i = 0; i < n; ++i) t.data_[i * n + i] = Scalar(1);
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index size() const { return data_.size(); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  bool empty() const { return data_.size() == 0; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> values() { return {data_.data(), static_cast<std::size_t>(data_.size())}; }
  std::span<const Scalar> values() const {
    return {data_.data(), static_cast<std::size_t>(data_.size())};
  }

  Storage& array() { return data_; }
  const Storage& array() const { return data_; }

  Scalar& operator[](Index i) { return data_[i]; }
  const Scalar& operator[](Index i) const { return data_[i]; }

  template <typename... Idx>
  Scalar& operator()(Idx... idx) {
    return data_[offset(idx...)];
  }
  template <typename... Idx>
  const Scalar& operator()(Idx... idx) const {
    return data_[offset(idx...)];
  }

  // Row-major 2-D view; leading axes are flattened into rows.
  MatrixMap<Scalar> matrix() { return {data(), rows2d(), cols2d()}; }
  ConstMatrixMap<Scalar> matrix() const { return {data(), rows2d(), cols2d()}; }

  BasicTensor reshaped(Shape shape) const {
    if (shape_numel(shape) != size())
      throw DimensionError("reshape: cannot view " + shape_str(shape_) + " as " +
                           shape_str(shape));
    BasicTensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  bool operator==(const BasicTensor& other) const {
    return shape_ == other.shape_ && (data_ == other.data_).all();
  }

 private:
  static void check_shape(const Shape& shape) {
    for (Index d : shape)
      if (d < 0) throw DimensionError("tensor: negative extent in " + shape_str(shape));
  }

  template <typename... Idx>
  Index offset(Idx... idx) const {
    const Index ids[] = {static_cast<Index>(idx)...};
    Index off = 0;
    for (std::size_t a = 0; a < sizeof...(Idx); ++a) off = off * shape_[a] + ids[a];
    return off;
  }

  Index cols2d() const { return shape_.empty() ? 1 : shape_.back(); }
  Index rows2d() const {
    const Index c = cols2d();
    return c == 0 ? 0 : size() / c;
  }

  Shape shape_;
  Storage data_;
};

using Tensor = BasicTensor<double>;

template <typename Scalar>
void require_shape(const BasicTensor<Scalar>& t, const Shape& expected, const char* what) {
  if (t.shape() != expected)
    throw DimensionError(std::string(what) + ": expected shape " + shape_str(expected) +
                         ", got " + shape_str(t.shape()));
}

}  // namespace m2rnn
