#pragma once

#include <algorithm>
#include <cstddef>

#include "tcpdiff/error.hpp"
#include "tcpdiff/tensor.hpp"

/// Adjacent residual prediction: rainfall sequences <-> frame-to-frame differences.
namespace tcpdiff::arp {

enum class Space { Raw, Normalized };

template <class T>
struct ResidualSequence {
  BasicTensor<T> deltas;  // [T, H, W]
  BasicTensor<T> anchor;  // [H, W], the frame the sequence accumulates from
  Space space = Space::Normalized;
};

template <class T>
struct Accumulated {
  BasicTensor<T> rain;  // [T, H, W]
  std::size_t clamped = 0;
};

/// deltas[t] = seq[t+1] - seq[t]; anchor = seq[T], the latest frame.
template <class T>
ResidualSequence<T> to_residuals(const BasicTensor<T>& seq, Space space = Space::Normalized) {
  if (seq.rank() != 3 || seq.dim(0) < 2)
    throw ShapeError("residuals need a [T+1, H, W] sequence with T >= 1, got " + shape_str(seq.shape));
  if (!seq.all_finite()) throw NumericalError("non-finite rainfall passed to to_residuals");
  const std::size_t steps = seq.dim(0) - 1, plane = seq.dim(1) * seq.dim(2);
  ResidualSequence<T> out;
  out.space = space;
  out.deltas = BasicTensor<T>({steps, seq.dim(1), seq.dim(2)});
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t i = 0; i < plane; ++i)
      out.deltas[t * plane + i] = seq[(t + 1) * plane + i] - seq[t * plane + i];
  out.anchor = BasicTensor<T>({seq.dim(1), seq.dim(2)});
  std::copy_n(seq.data.begin() + static_cast<std::ptrdiff_t>(steps * plane), plane, out.anchor.data.begin());
  return out;
}

/// out[t] = anchor + sum_{z <= t} deltas[z]. In raw space negative results are set to
/// zero and counted.
template <class T>
Accumulated<T> accumulate(const ResidualSequence<T>& res) {
  const auto& d = res.deltas;
  if (d.rank() != 3 || d.dim(0) < 1) throw ShapeError("deltas must be [T, H, W] with T >= 1");
  if (res.anchor.shape != Shape{d.dim(1), d.dim(2)})
    throw ShapeError("anchor " + shape_str(res.anchor.shape) + " does not match deltas " + shape_str(d.shape));
  const std::size_t plane = d.dim(1) * d.dim(2);
  Accumulated<T> out;
  out.rain = BasicTensor<T>(d.shape);
  std::vector<T> running(res.anchor.data.begin(), res.anchor.data.end());
  for (std::size_t t = 0; t < d.dim(0); ++t)
    for (std::size_t i = 0; i < plane; ++i) {
      running[i] += d[t * plane + i];
      T v = running[i];
      if (res.space == Space::Raw && v < T{0}) {
        v = T{0};
        ++out.clamped;
      }
      out.rain[t * plane + i] = v;
    }
  return out;
}

}  // namespace tcpdiff::arp
