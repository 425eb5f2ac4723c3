#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "arob/error.hpp"

namespace arob {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> strides(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) strides[i - 1] = strides[i] * s[i];
  return strides;
}

/// Dense row-major array. Public operations never mutate their inputs; the
/// mutable accessors exist for kernels that build a fresh result in place.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)) {
    validate_extents();
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_extents();
    if (shape_numel(shape_) != data_.size())
      throw ShapeError(detail::concat("tensor shape ", shape_str(shape_), " holds ", shape_numel(shape_),
                                      " elements but ", data_.size(), " values were given"));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const T> data() const& noexcept { return data_; }
  std::span<T> data() & noexcept { return data_; }
  std::span<const T> data() && = delete;  // would dangle, e.g. `for (v : f().data())`
  const T* ptr() const noexcept { return data_.data(); }
  T* ptr() noexcept { return data_.data(); }
  const std::vector<T>& values() const& noexcept { return data_; }
  std::vector<T> values() && noexcept { return std::move(data_); }

  T operator[](std::size_t flat) const { return data_[flat]; }
  T& operator[](std::size_t flat) { return data_[flat]; }

  std::size_t offset(std::initializer_list<std::size_t> index) const {
    if (index.size() != shape_.size())
      throw ShapeError(detail::concat("index of rank ", index.size(), " used on tensor ", shape_str(shape_)));
    std::size_t off = 0;
    std::size_t i = 0;
    for (std::size_t v : index) {
      if (v >= shape_[i])
        throw ShapeError(detail::concat("index ", v, " out of range on axis ", i, " of ", shape_str(shape_)));
      off = off * shape_[i] + v;
      ++i;
    }
    return off;
  }
  T at(std::initializer_list<std::size_t> index) const { return data_[offset(index)]; }
  T& at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size())
      throw ShapeError(detail::concat("cannot reshape ", shape_str(shape_), " to ", shape_str(shape)));
    return Tensor(std::move(shape), data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_extents() const {
    for (std::size_t e : shape_)
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<T> data_;
};

/// Bitwise equality (distinguishes -0 from +0 and compares NaN payloads).
template <typename T>
bool bit_identical(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::equal(a.data().begin(), a.data().end(), b.data().begin(), [](T x, T y) {
    return std::memcmp(&x, &y, sizeof(T)) == 0;
  });
}

// ---------------------------------------------------------------------------
// Elementwise

enum class ElementOp { add, sub, mul, div, abs, max0 };

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) throw ShapeError(concat(what, ": shape mismatch ", shape_str(a), " vs ", shape_str(b)));
}

template <typename T>
T apply_op(ElementOp op, T x, T y) {
  switch (op) {
    case ElementOp::add: return x + y;
    case ElementOp::sub: return x - y;
    case ElementOp::mul: return x * y;
    case ElementOp::div: return x / y;
    case ElementOp::abs: return std::abs(x);
    case ElementOp::max0: return x > T{0} ? x : T{0};
  }
  return x;
}

}  // namespace detail

/// Pointwise op with a tensor right-hand side. `abs` and `max0` ignore `b`.
template <typename T>
Tensor<T> elementwise(ElementOp op, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "elementwise");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (op == ElementOp::div && b[i] == T{0})
      throw DataError(detail::concat("elementwise div: zero divisor at flat offset ", i));
    out[i] = detail::apply_op(op, a[i], b[i]);
  }
  return Tensor<T>(a.shape(), std::move(out));
}

template <typename T>
Tensor<T> elementwise(ElementOp op, const Tensor<T>& a, T b) {
  if (op == ElementOp::div && b == T{0}) throw DataError("elementwise div: zero scalar divisor");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = detail::apply_op(op, a[i], b);
  return Tensor<T>(a.shape(), std::move(out));
}

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(ElementOp::add, a, b); }
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(ElementOp::sub, a, b); }
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(ElementOp::mul, a, b); }
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(ElementOp::div, a, b); }
template <typename T> Tensor<T> mul(const Tensor<T>& a, T s) { return elementwise(ElementOp::mul, a, s); }
template <typename T> Tensor<T> abs(const Tensor<T>& a) { return elementwise(ElementOp::abs, a, T{0}); }
template <typename T> Tensor<T> max0(const Tensor<T>& a) { return elementwise(ElementOp::max0, a, T{0}); }

// ---------------------------------------------------------------------------
// Reductions. Sums accumulate in double.

template <typename T>
double sum(const Tensor<T>& a) {
  double acc = 0.0;
  for (T v : a.data()) acc += static_cast<double>(v);
  return acc;
}

template <typename T>
T max(const Tensor<T>& a) {
  if (a.empty()) throw ShapeError("max of empty tensor");
  return *std::max_element(a.data().begin(), a.data().end());
}

/// Flat offset of the first maximal element.
template <typename T>
std::size_t argmax(const Tensor<T>& a) {
  if (a.empty()) throw ShapeError("argmax of empty tensor");
  std::size_t best = 0;
  for (std::size_t i = 1; i < a.size(); ++i)
    if (a[i] > a[best]) best = i;
  return best;
}

enum class ReduceOp { sum, max };

namespace detail {

template <typename T>
Tensor<T> reduce_axes(const Tensor<T>& a, std::vector<std::size_t> axes, ReduceOp op) {
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  for (std::size_t ax : axes)
    if (ax >= a.rank())
      throw ShapeError(concat("reduce: axis ", ax, " invalid for shape ", shape_str(a.shape())));

  Shape kept;
  std::vector<bool> reduced(a.rank(), false);
  for (std::size_t ax : axes) reduced[ax] = true;
  for (std::size_t i = 0; i < a.rank(); ++i)
    if (!reduced[i]) kept.push_back(a.shape()[i]);
  if (kept.empty()) kept.push_back(1);

  const std::size_t n_out = shape_numel(kept);
  std::vector<double> acc(n_out, op == ReduceOp::sum ? 0.0 : -std::numeric_limits<double>::infinity());
  std::vector<std::size_t> idx(a.rank(), 0);
  for (std::size_t flat = 0; flat < a.size(); ++flat) {
    std::size_t out = 0;
    for (std::size_t i = 0; i < a.rank(); ++i)
      if (!reduced[i]) out = out * a.shape()[i] + idx[i];
    const double v = static_cast<double>(a[flat]);
    if (op == ReduceOp::sum) acc[out] += v;
    else if (v > acc[out]) acc[out] = v;
    for (std::size_t i = a.rank(); i-- > 0;) {
      if (++idx[i] < a.shape()[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<T> out(n_out);
  for (std::size_t i = 0; i < n_out; ++i) out[i] = static_cast<T>(acc[i]);
  return Tensor<T>(std::move(kept), std::move(out));
}

}  // namespace detail

template <typename T>
Tensor<T> sum(const Tensor<T>& a, const std::vector<std::size_t>& axes) {
  return detail::reduce_axes(a, axes, ReduceOp::sum);
}

template <typename T>
Tensor<T> max(const Tensor<T>& a, const std::vector<std::size_t>& axes) {
  return detail::reduce_axes(a, axes, ReduceOp::max);
}

// ---------------------------------------------------------------------------
// Spatial manipulation

namespace detail {

// Views the tensor as (outer, extent, inner) around `axis`.
template <typename T>
void split_at_axis(const Tensor<T>& a, std::size_t axis, std::size_t& outer, std::size_t& extent,
                   std::size_t& inner) {
  if (axis >= a.rank())
    throw ShapeError(concat("axis ", axis, " invalid for shape ", shape_str(a.shape())));
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.shape()[i];
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.shape()[i];
  extent = a.shape()[axis];
}

}  // namespace detail

/// Translates contents by `offset` along `axis`; vacated slots take `fill`.
template <typename T>
Tensor<T> shift(const Tensor<T>& a, std::size_t axis, int offset, T fill = T{}) {
  std::size_t outer, extent, inner;
  detail::split_at_axis(a, axis, outer, extent, inner);
  Tensor<T> out(a.shape(), fill);
  const auto n = static_cast<long>(extent);
  for (std::size_t o = 0; o < outer; ++o) {
    for (long i = 0; i < n; ++i) {
      const long src = i - offset;
      if (src < 0 || src >= n) continue;
      const T* from = a.ptr() + (o * extent + static_cast<std::size_t>(src)) * inner;
      std::copy(from, from + inner, out.ptr() + (o * extent + static_cast<std::size_t>(i)) * inner);
    }
  }
  return out;
}

template <typename T>
Tensor<T> flip(const Tensor<T>& a, std::size_t axis) {
  std::size_t outer, extent, inner;
  detail::split_at_axis(a, axis, outer, extent, inner);
  Tensor<T> out(a.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < extent; ++i) {
      const T* from = a.ptr() + (o * extent + i) * inner;
      std::copy(from, from + inner, out.ptr() + (o * extent + (extent - 1 - i)) * inner);
    }
  return out;
}

template <typename T>
bool all_finite(const Tensor<T>& a) {
  return std::all_of(a.data().begin(), a.data().end(), [](T v) { return std::isfinite(v); });
}

}  // namespace arob
