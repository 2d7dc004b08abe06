#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <vector>

#include "tcpdiff/tensor.hpp"

/// Minimal reverse-mode automatic differentiation over dense tensors.
///
/// A Graph records every operation applied to its variables. Calling backward() on a
/// scalar walks the tape in reverse and accumulates gradients into every node that
/// depends on a trainable leaf. Graphs are single-use and not thread-safe; separate
/// graphs may run concurrently.
namespace tcpdiff::nn {

template <class T>
class Graph;

template <class T>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  const BasicTensor<T>& value() const;
  const Shape& shape() const { return value().shape; }
};

template <class T>
class Graph {
 public:
  using Backward = std::function<void(Graph&, std::size_t self)>;

  /// With `track_gradients` false no backward closures are kept.
  explicit Graph(bool track_gradients = true) : track_(track_gradients) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(BasicTensor<T> value);
  /// Trainable leaf; its gradient is available after backward().
  Var<T> leaf(BasicTensor<T> value);

  const BasicTensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  /// Gradient buffer for a node, allocated (zeroed) on first access.
  AlignedVector<T>& grad(std::size_t id);
  /// Gradient of a node after backward(); empty when it received none.
  const AlignedVector<T>& grad_of(Var<T> v) const { return nodes_[v.id].grad; }

  /// Records an op result. `back` is kept only when some input needs a gradient.
  Var<T> record(BasicTensor<T> value, std::initializer_list<Var<T>> inputs, Backward back);

  /// Seeds d(loss)/d(loss) = 1 on a single-element node and propagates.
  void backward(Var<T> loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    BasicTensor<T> value;
    AlignedVector<T> grad;
    Backward back;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;
  bool track_;
};

template <class T>
const BasicTensor<T>& Var<T>::value() const {
  return graph->value(id);
}

// ---- ops -------------------------------------------------------------------------

/// 3D convolution with zero "same" padding and unit stride.
/// x [Cin, D, H, W], w [Cout, Cin, kd, kh, kw] (odd kernel sizes), bias [Cout] or none.
template <class T>
Var<T> conv3d(Var<T> x, Var<T> w, const Var<T>* bias);

template <class T>
Var<T> add(Var<T> a, Var<T> b);

template <class T>
Var<T> scale(Var<T> x, T factor);

/// x [C, ...] + b[c] broadcast over the trailing axes.
template <class T>
Var<T> add_channel_bias(Var<T> x, Var<T> b);

template <class T>
Var<T> silu(Var<T> x);

/// Group normalization over x [C, ...] with per-channel affine gamma, beta [C].
template <class T>
Var<T> group_norm(Var<T> x, Var<T> gamma, Var<T> beta, std::size_t groups, T eps = T(1e-5));

/// Concatenation along axis 0.
template <class T>
Var<T> concat0(Var<T> a, Var<T> b);

/// Average pooling over the two trailing (spatial) axes of x [C, D, H, W].
template <class T>
Var<T> avg_pool2d(Var<T> x, std::size_t factor);

/// Nearest-neighbour upsampling over the two trailing axes of x [C, D, H, W].
template <class T>
Var<T> upsample2d(Var<T> x, std::size_t factor);

/// Axis permutation; out.shape[i] = x.shape[perm[i]].
template <class T>
Var<T> permute(Var<T> x, const std::vector<std::size_t>& perm);

template <class T>
Var<T> reshape(Var<T> x, Shape shape);

/// Scaled dot-product softmax attention, independently per group.
/// q [G, Lq, d], k [G, Lk, d], v [G, Lk, d] -> [G, Lq, d].
template <class T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v);

/// Affine map on the last axis: x [..., in], w [out, in], b [out] -> [..., out].
template <class T>
Var<T> dense(Var<T> x, Var<T> w, Var<T> b);

/// Mean over the leading axis of x [L, ...] -> [...].
template <class T>
Var<T> mean0(Var<T> x);

/// Mean over the trailing axes of x [C, ...] -> [C].
template <class T>
Var<T> mean_trailing(Var<T> x);

/// Mean squared difference to a constant target; returns a [1] tensor.
template <class T>
Var<T> mse(Var<T> x, const BasicTensor<T>& target);

}  // namespace tcpdiff::nn
