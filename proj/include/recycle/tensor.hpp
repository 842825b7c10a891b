#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "recycle/errors.hpp"

namespace recycle {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape);

/// Dense row-major array. Layout for images and feature maps is N,H,W,C.
template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size())
      throw DimensionError("Tensor", "data", shape_size(shape_), data_.size());
  }

  static BasicTensor scalar(T v) { return BasicTensor(Shape{}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const T> data() const noexcept { return data_; }
  std::span<T> data() noexcept { return data_; }
  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  /// Value of a one-element tensor.
  T item() const {
    if (data_.size() != 1) throw DimensionError("Tensor::item", "size", 1, data_.size());
    return data_[0];
  }

  BasicTensor reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size())
      throw DimensionError("Tensor::reshaped", "size", data_.size(), shape_size(shape));
    return BasicTensor(std::move(shape), data_);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  /// Bitwise equality of shape and contents.
  bool identical(const BasicTensor& other) const {
    return shape_ == other.shape_ &&
           (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(T)) == 0);
  }

  template <class U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

/// Rows [begin, begin + count) along axis 0.
template <class T>
BasicTensor<T> slice_rows(const BasicTensor<T>& t, std::size_t begin, std::size_t count) {
  require(t.rank() >= 1 && begin + count <= t.dim(0), "slice_rows: range out of bounds");
  Shape shape = t.shape();
  shape[0] = count;
  const std::size_t row = t.size() / t.dim(0);
  std::vector<T> data(t.data().begin() + static_cast<std::ptrdiff_t>(begin * row),
                      t.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * row));
  return BasicTensor<T>(std::move(shape), std::move(data));
}

/// Gather rows by index along axis 0.
template <class T>
BasicTensor<T> gather_rows(const BasicTensor<T>& t, std::span<const std::size_t> rows) {
  require(t.rank() >= 1, "gather_rows: rank-0 tensor");
  Shape shape = t.shape();
  shape[0] = rows.size();
  const std::size_t row = t.dim(0) == 0 ? 0 : t.size() / t.dim(0);
  std::vector<T> data;
  data.reserve(rows.size() * row);
  for (std::size_t r : rows) {
    require(r < t.dim(0), "gather_rows: index out of range");
    auto first = t.data().begin() + static_cast<std::ptrdiff_t>(r * row);
    data.insert(data.end(), first, first + static_cast<std::ptrdiff_t>(row));
  }
  return BasicTensor<T>(std::move(shape), std::move(data));
}

/// FNV-1a over the raw bytes of the shape and data. Used for frozen-weight checks.
std::uint64_t hash_bytes(std::span<const std::byte> bytes, std::uint64_t seed = 1469598103934665603ULL);

template <class T>
std::uint64_t tensor_hash(const BasicTensor<T>& t, std::uint64_t seed = 1469598103934665603ULL) {
  std::uint64_t h = hash_bytes(std::as_bytes(std::span<const std::size_t>(t.shape())), seed);
  return hash_bytes(std::as_bytes(t.data()), h);
}

}  // namespace recycle
