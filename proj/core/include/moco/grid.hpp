#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <type_traits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "moco/error.hpp"

namespace moco {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major N-dimensional array. The value carrier for images, feature
/// maps, weights and gradients. Scalars are represented with shape {1}.
template <typename T>
class Grid {
 public:
  using value_type = T;

  Grid() = default;

  explicit Grid(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(numel(shape_), fill) {
    check_dims();
  }

  Grid(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != numel(shape_)) {
      throw ShapeError("Grid: shape " + moco::to_string(shape_) + " holds " +
                       std::to_string(numel(shape_)) + " values, got " +
                       std::to_string(data_.size()));
    }
  }

  static Grid scalar(T v) { return Grid(Shape{1}, std::vector<T>{v}); }

  static Grid identity(std::size_t n) {
    Grid g(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) g.data_[i * n + i] = T(1);
    return g;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }

  T item() const {
    if (data_.size() != 1) {
      throw ShapeError("Grid::item on shape " + moco::to_string(shape_));
    }
    return data_[0];
  }

  Grid reshaped(Shape shape) const {
    if (numel(shape) != data_.size()) {
      throw ShapeError("reshape " + moco::to_string(shape_) + " -> " +
                       moco::to_string(shape));
    }
    return Grid(std::move(shape), data_);
  }

  template <typename U>
  Grid<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(),
                   [](T v) { return static_cast<U>(v); });
    return Grid<U>(shape_, std::move(out));
  }

  /// Checks the exponent bits, which vectorises as an integer OR-reduction.
  bool all_finite() const {
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    constexpr Bits kExp = sizeof(T) == 4 ? Bits(0x7f800000u) : Bits(0x7ff0000000000000ull);
    Bits bad = 0;
    for (T v : data_) {
      Bits b;
      std::memcpy(&b, &v, sizeof b);
      bad |= static_cast<Bits>((b & kExp) == kExp);
    }
    return bad == 0;
  }

  T max_abs() const {
    T m = T(0);
    for (T v : data_) m = std::max(m, std::abs(v));
    return m;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Grid& operator+=(const Grid& o) {
    require_same(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  Grid& operator-=(const Grid& o) {
    require_same(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }

  Grid& operator*=(T s) {
    for (T& v : data_) v *= s;
    return *this;
  }

  void require_same(const Grid& o, const char* what) const {
    if (o.shape_ != shape_) {
      throw ShapeError(std::string(what) + ": shape " +
                       moco::to_string(shape_) + " vs " +
                       moco::to_string(o.shape_));
    }
  }

  friend bool operator==(const Grid& a, const Grid& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_dims() const {
    for (std::size_t d : shape_) {
      if (d == 0) {
        throw ShapeError("Grid: zero-sized dimension in " +
                         moco::to_string(shape_));
      }
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

/// Bit-level equality (distinguishes -0.0 from 0.0 and compares NaN payloads).
template <typename T>
bool bitwise_equal(const Grid<T>& a, const Grid<T>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

template <typename T>
T max_abs_diff(const Grid<T>& a, const Grid<T>& b) {
  a.require_same(b, "max_abs_diff");
  T m = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(a[i] - b[i]));
  }
  return m;
}

}  // namespace moco
