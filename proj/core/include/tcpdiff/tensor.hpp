#pragma once

#include <cmath>
#include <cstddef>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "tcpdiff/error.hpp"

namespace tcpdiff {

using Shape = std::vector<std::size_t>;

/// 64-byte aligned storage. Vectorized kernels pick their loop peeling from buffer
/// addresses, so a fixed alignment keeps results bit-identical from run to run.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t n) noexcept { ::operator delete(p, n * sizeof(T), kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <class T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major (C order) array.
template <class T>
struct BasicTensor {
  Shape shape;
  AlignedVector<T> data;

  BasicTensor() = default;
  explicit BasicTensor(Shape s, T fill = T{0}) : shape(std::move(s)), data(shape_numel(shape), fill) {}
  BasicTensor(Shape s, AlignedVector<T> values) : shape(std::move(s)), data(std::move(values)) {
    check_payload();
  }
  BasicTensor(Shape s, const std::vector<T>& values) : shape(std::move(s)), data(values.begin(), values.end()) {
    check_payload();
  }

  BasicTensor(Shape s, std::initializer_list<T> values) : shape(std::move(s)), data(values) { check_payload(); }

  void check_payload() const {
    if (data.size() != shape_numel(shape))
      throw ShapeError("tensor payload of " + std::to_string(data.size()) + " values does not fit shape " +
                       shape_str(shape));
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  std::span<T> span() { return data; }
  std::span<const T> span() const { return data; }

  /// Contiguous slab along the leading axis.
  std::span<T> slab(std::size_t i) {
    const std::size_t stride = data.size() / shape.at(0);
    return std::span<T>(data).subspan(i * stride, stride);
  }
  std::span<const T> slab(std::size_t i) const {
    const std::size_t stride = data.size() / shape.at(0);
    return std::span<const T>(data).subspan(i * stride, stride);
  }

  bool all_finite() const {
    for (const T& v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <class U>
  BasicTensor<U> cast() const {
    BasicTensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }

  bool operator==(const BasicTensor&) const = default;
};

using Tensor = BasicTensor<float>;

}  // namespace tcpdiff
