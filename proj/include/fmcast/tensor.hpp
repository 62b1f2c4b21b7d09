// Copyright 2026 The fmcast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <ostream>
#include <span>
#include <type_traits>
#include <utility>
#include <vector>

#include "fmcast/common.hpp"

namespace fmcast {

/// Batch x channel x lat x lon extents; vectors use (n, c, 1, 1).
struct Shape4 {
  std::size_t n = 1;
  std::size_t c = 1;
  std::size_t h = 1;
  std::size_t w = 1;

  constexpr std::size_t numel() const noexcept { return n * c * h * w; }
  constexpr std::size_t plane() const noexcept { return h * w; }
  friend constexpr bool operator==(const Shape4&, const Shape4&) = default;
};

inline std::ostream& operator<<(std::ostream& os, const Shape4& s) {
  return os << '(' << s.n << ',' << s.c << ',' << s.h << ',' << s.w << ')';
}

/// Storage aligned to the widest SIMD packet. Every buffer that feeds an Eigen
/// product starts on such a boundary, which keeps vectorized code paths (and
/// therefore rounding) independent of where the allocator placed the data.
/// Growing the buffer leaves new elements default-initialized (indeterminate
/// for arithmetic types); every public constructor still fills explicitly.
template <class T>
struct AlignedAllocator : Eigen::aligned_allocator<T> {
  template <class U>
  struct rebind {
    using other = AlignedAllocator<U>;
  };
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  template <class U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

template <class T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

template <class T>
class Tensor {
 public:
  using value_type = T;
  using Buffer = AlignedVector<T>;

  Tensor() = default;
  explicit Tensor(Shape4 shape, T fill = T(0)) : shape_(shape), data_(shape.numel(), fill) {}
  /// Storage left unset; the caller must write every element.
  static Tensor uninitialized(Shape4 shape) {
    Tensor t;
    t.shape_ = shape;
    t.data_.resize(shape.numel());
    return t;
  }
  Tensor(Shape4 shape, std::initializer_list<T> data) : Tensor(shape, Buffer(data.begin(), data.end())) {}
  Tensor(Shape4 shape, const std::vector<T>& data) : Tensor(shape, Buffer(data.begin(), data.end())) {}
  Tensor(Shape4 shape, Buffer data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) fail(ErrorKind::Shape, "tensor data size ", data_.size(), " != ", shape_);
  }

  const Shape4& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }
  Buffer& vec() noexcept { return data_; }
  const Buffer& vec() const noexcept { return data_; }
  std::vector<T> values() const { return std::vector<T>(data_.begin(), data_.end()); }

  std::size_t index(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
    return data_[index(n, c, h, w)];
  }
  const T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
    return data_[index(n, c, h, w)];
  }
  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  /// Contiguous view of one (n, c) plane.
  std::span<T> plane(std::size_t n, std::size_t c) noexcept {
    return std::span<T>(data_).subspan(index(n, c, 0, 0), shape_.plane());
  }
  std::span<const T> plane(std::size_t n, std::size_t c) const noexcept {
    return std::span<const T>(data_).subspan(index(n, c, 0, 0), shape_.plane());
  }
  /// Contiguous view of one sample (all channels).
  std::span<T> sample(std::size_t n) noexcept {
    return std::span<T>(data_).subspan(n * shape_.c * shape_.plane(), shape_.c * shape_.plane());
  }
  std::span<const T> sample(std::size_t n) const noexcept {
    return std::span<const T>(data_).subspan(n * shape_.c * shape_.plane(), shape_.c * shape_.plane());
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  Shape4 shape_{0, 0, 0, 0};
  Buffer data_;
};

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape()) fail(ErrorKind::Shape, what, ": ", a.shape(), " vs ", b.shape());
}

}  // namespace fmcast
