// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "genq/common/error.hpp"

namespace genq::nn {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? "x" : "") << shape[i];
  }
  os << ']';
  return os.str();
}

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

/// Dense row-major n-dimensional array.
template <typename Scalar>
class Tensor {
 public:
  using value_type = Scalar;

  Tensor() = default;

  explicit Tensor(Shape shape, Scalar fill = Scalar{0})
      : shape_(std::move(shape)), data_(static_cast<std::size_t>(checked_numel(shape_)), fill) {}

  Tensor(Shape shape, const std::vector<Scalar>& data)
      : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (static_cast<Index>(data_.size()) != checked_numel(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + nn::to_string(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, Scalar value) { return Tensor(std::move(shape), value); }
  static Tensor scalar(Scalar value) { return Tensor(Shape{1}, value); }

  [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
  [[nodiscard]] Index rank() const noexcept { return static_cast<Index>(shape_.size()); }
  [[nodiscard]] Index dim(Index axis) const {
    if (axis < 0) {
      axis += rank();
    }
    if (axis < 0 || axis >= rank()) {
      throw DimensionError("axis out of range for shape " + nn::to_string(shape_));
    }
    return shape_[static_cast<std::size_t>(axis)];
  }
  [[nodiscard]] Index size() const noexcept { return static_cast<Index>(data_.size()); }
  [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

  [[nodiscard]] std::span<Scalar> data() noexcept { return data_; }
  [[nodiscard]] std::span<const Scalar> data() const noexcept { return data_; }
  /// Copy of the elements in row-major order.
  [[nodiscard]] std::vector<Scalar> values() const { return {data_.begin(), data_.end()}; }

  Scalar& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  const Scalar& operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

  /// Row-major multi-index access.
  template <typename... Ix>
  Scalar& at(Ix... ix) {
    return data_[offset({static_cast<Index>(ix)...})];
  }
  template <typename... Ix>
  const Scalar& at(Ix... ix) const {
    return data_[offset({static_cast<Index>(ix)...})];
  }

  /// Same data, new shape (element count must agree).
  [[nodiscard]] Tensor reshaped(Shape shape) const {
    if (checked_numel(shape) != size()) {
      throw DimensionError("cannot reshape " + nn::to_string(shape_) + " to " + nn::to_string(shape));
    }
    Tensor out;
    out.shape_ = std::move(shape);
    out.data_ = data_;
    return out;
  }

  /// View as a rows x cols row-major matrix.
  [[nodiscard]] MatrixMap<Scalar> matrix(Index rows, Index cols) {
    check_matrix(rows, cols);
    return MatrixMap<Scalar>(data_.data(), rows, cols);
  }
  [[nodiscard]] ConstMatrixMap<Scalar> matrix(Index rows, Index cols) const {
    check_matrix(rows, cols);
    return ConstMatrixMap<Scalar>(data_.data(), rows, cols);
  }
  [[nodiscard]] VectorMap<Scalar> vector() { return VectorMap<Scalar>(data_.data(), size()); }
  [[nodiscard]] ConstVectorMap<Scalar> vector() const {
    return ConstVectorMap<Scalar>(data_.data(), size());
  }

  /// Contiguous block of `count` items along axis 0 starting at `first`.
  [[nodiscard]] Tensor slice(Index first, Index count) const {
    if (rank() == 0 || first < 0 || count < 0 || first + count > shape_[0]) {
      throw DimensionError("slice out of range for shape " + nn::to_string(shape_));
    }
    const Index inner = shape_[0] == 0 ? 0 : size() / shape_[0];
    Tensor out;
    out.shape_ = shape_;
    out.shape_[0] = count;
    out.data_.assign(data_.begin() + first * inner, data_.begin() + (first + count) * inner);
    return out;
  }

  /// Gather items along axis 0.
  [[nodiscard]] Tensor gather(std::span<const Index> rows) const {
    const Index inner = shape_.empty() || shape_[0] == 0 ? 0 : size() / shape_[0];
    Tensor out;
    out.shape_ = shape_;
    out.shape_[0] = static_cast<Index>(rows.size());
    out.data_.reserve(rows.size() * static_cast<std::size_t>(inner));
    for (const Index r : rows) {
      if (r < 0 || r >= shape_[0]) {
        throw DimensionError("gather index out of range");
      }
      out.data_.insert(out.data_.end(), data_.begin() + r * inner, data_.begin() + (r + 1) * inner);
    }
    return out;
  }

  template <typename Other>
  [[nodiscard]] Tensor<Other> cast() const {
    Tensor<Other> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data().begin(), [](Scalar v) { return static_cast<Other>(v); });
    return out;
  }

  bool operator==(const Tensor& other) const = default;

 private:
  static Index checked_numel(const Shape& shape) {
    for (const Index d : shape) {
      if (d < 0) {
        throw DimensionError("negative extent in shape " + nn::to_string(shape));
      }
    }
    return nn::numel(shape);
  }

  std::size_t offset(std::initializer_list<Index> ix) const {
    if (static_cast<Index>(ix.size()) != rank()) {
      throw DimensionError("index rank mismatch for shape " + nn::to_string(shape_));
    }
    std::size_t off = 0;
    std::size_t axis = 0;
    for (const Index i : ix) {
      off = off * static_cast<std::size_t>(shape_[axis]) + static_cast<std::size_t>(i);
      ++axis;
    }
    return off;
  }

  void check_matrix(Index rows, Index cols) const {
    if (rows * cols != size()) {
      throw DimensionError("cannot view " + nn::to_string(shape_) + " as " + std::to_string(rows) +
                           "x" + std::to_string(cols) + " matrix");
    }
  }

  template <typename>
  friend class Tensor;

  Shape shape_;
  // Aligned storage keeps Eigen's vectorized reductions on a fixed summation
  // order for a given shape, which makes every op bitwise reproducible.
  std::vector<Scalar, Eigen::aligned_allocator<Scalar>> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

/// Concatenate along axis 0; trailing extents must agree.
template <typename Scalar>
Tensor<Scalar> concat_rows(std::span<const Tensor<Scalar>> parts) {
  if (parts.empty()) {
    return {};
  }
  Shape shape = parts.front().shape();
  Index rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != static_cast<Index>(shape.size()) ||
        !std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1)) {
      throw DimensionError("concat_rows: " + to_string(shape) + " vs " + to_string(p.shape()));
    }
    rows += p.dim(0);
  }
  shape[0] = rows;
  Tensor<Scalar> out(shape);
  auto dst = out.data().begin();
  for (const auto& p : parts) {
    dst = std::copy(p.data().begin(), p.data().end(), dst);
  }
  return out;
}

}  // namespace genq::nn
