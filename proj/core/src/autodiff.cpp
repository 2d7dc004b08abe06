#include "tcpdiff/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>

#include "tcpdiff/error.hpp"

namespace tcpdiff::nn {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

struct ConvGeom {
  std::size_t cin, d, h, w, cout, kd, kh, kw;
  std::size_t plane() const { return d * h * w; }
  std::size_t rows() const { return cin * kd * kh * kw; }
  bool pointwise() const { return kd == 1 && kh == 1 && kw == 1; }
};

// Lays out every kernel tap of the padded input as one row of `col` [rows, plane].
template <class T, bool Accumulate>
void im2col_impl(const ConvGeom& g, T* x, T* col) {
  const std::ptrdiff_t pd = static_cast<std::ptrdiff_t>(g.kd / 2), ph = static_cast<std::ptrdiff_t>(g.kh / 2),
                       pw = static_cast<std::ptrdiff_t>(g.kw / 2);
  const auto D = static_cast<std::ptrdiff_t>(g.d), H = static_cast<std::ptrdiff_t>(g.h),
             W = static_cast<std::ptrdiff_t>(g.w);
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    T* xc = x + ci * g.plane();
    for (std::ptrdiff_t a = 0; a < static_cast<std::ptrdiff_t>(g.kd); ++a)
      for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(g.kh); ++b)
        for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(g.kw); ++c, ++row) {
          T* dst = col + row * g.plane();
          const std::ptrdiff_t x_lo = std::max<std::ptrdiff_t>(0, pw - c);
          const std::ptrdiff_t x_hi = std::min<std::ptrdiff_t>(W, W + pw - c);
          for (std::ptrdiff_t t = 0; t < D; ++t) {
            const std::ptrdiff_t ts = t + a - pd;
            for (std::ptrdiff_t y = 0; y < H; ++y) {
              T* out = dst + (t * H + y) * W;
              const std::ptrdiff_t ys = y + b - ph;
              if (ts < 0 || ts >= D || ys < 0 || ys >= H) {
                if constexpr (!Accumulate) std::fill(out, out + W, T{0});
                continue;
              }
              T* src = xc + (ts * H + ys) * W + (c - pw);
              if constexpr (Accumulate) {
                for (std::ptrdiff_t xx = x_lo; xx < x_hi; ++xx) src[xx] += out[xx];
              } else {
                for (std::ptrdiff_t xx = 0; xx < x_lo; ++xx) out[xx] = T{0};
                for (std::ptrdiff_t xx = x_lo; xx < x_hi; ++xx) out[xx] = src[xx];
                for (std::ptrdiff_t xx = x_hi; xx < W; ++xx) out[xx] = T{0};
              }
            }
          }
        }
  }
}

template <class T>
void im2col(const ConvGeom& g, const T* x, T* col) {
  im2col_impl<T, false>(g, const_cast<T*>(x), col);
}

// Adjoint of im2col: scatters `col` back onto dx.
template <class T>
void col2im(const ConvGeom& g, const T* col, T* dx) {
  im2col_impl<T, true>(g, dx, const_cast<T*>(col));
}

}  // namespace

// ---- Graph -----------------------------------------------------------------------

template <class T>
Var<T> Graph<T>::constant(BasicTensor<T> value) {
  nodes_.push_back({std::move(value), {}, {}, false});
  return {this, nodes_.size() - 1};
}

template <class T>
Var<T> Graph<T>::leaf(BasicTensor<T> value) {
  nodes_.push_back({std::move(value), {}, {}, track_});
  return {this, nodes_.size() - 1};
}

template <class T>
AlignedVector<T>& Graph<T>::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.size(), T{0});
  return n.grad;
}

template <class T>
Var<T> Graph<T>::record(BasicTensor<T> value, std::initializer_list<Var<T>> inputs, Backward back) {
  bool needs = false;
  if (track_)
    for (const auto& v : inputs) needs = needs || nodes_[v.id].needs_grad;
  nodes_.push_back({std::move(value), {}, needs ? std::move(back) : Backward{}, needs});
  return {this, nodes_.size() - 1};
}

template <class T>
void Graph<T>::backward(Var<T> loss) {
  if (value(loss.id).size() != 1) throw ShapeError("backward() needs a single-element loss");
  if (!nodes_[loss.id].needs_grad) return;
  grad(loss.id)[0] = T{1};
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.back && !n.grad.empty()) n.back(*this, i);
  }
}

// ---- ops -------------------------------------------------------------------------

template <class T>
Var<T> conv3d(Var<T> x, Var<T> w, const Var<T>* bias) {
  Graph<T>& g = *x.graph;
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  require(xs.size() == 4, "conv3d input must be [C, D, H, W], got " + shape_str(xs));
  require(ws.size() == 5 && ws[1] == xs[0],
          "conv3d kernel " + shape_str(ws) + " does not match input " + shape_str(xs));
  require(ws[2] % 2 == 1 && ws[3] % 2 == 1 && ws[4] % 2 == 1, "conv3d kernel sizes must be odd");
  const ConvGeom geom{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], ws[4]};
  if (bias) require(bias->shape() == Shape{geom.cout}, "conv3d bias must be [Cout]");

  BasicTensor<T> y({geom.cout, geom.d, geom.h, geom.w});
  const std::size_t P = geom.plane(), K = geom.rows();
  ConstMatMap<T> W(w.value().data.data(), static_cast<Eigen::Index>(geom.cout), static_cast<Eigen::Index>(K));
  MatMap<T> Y(y.data.data(), static_cast<Eigen::Index>(geom.cout), static_cast<Eigen::Index>(P));
  AlignedVector<T> col;
  const T* colp = x.value().data.data();
  if (!geom.pointwise()) {
    col.resize(K * P);
    im2col(geom, x.value().data.data(), col.data());
    colp = col.data();
  }
  Y.noalias() = W * ConstMatMap<T>(colp, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
  if (bias) {
    const auto& b = bias->value().data;
    for (std::size_t c = 0; c < geom.cout; ++c) Y.row(static_cast<Eigen::Index>(c)).array() += b[c];
  }

  const std::size_t xid = x.id, wid = w.id, bid = bias ? bias->id : SIZE_MAX;
  auto back = [geom, xid, wid, bid](Graph<T>& g, std::size_t self) {
    const std::size_t P = geom.plane(), K = geom.rows();
    const auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
    ConstMatMap<T> dY(g.grad(self).data(), ei(geom.cout), ei(P));
    AlignedVector<T> col;
    const T* colp = g.value(xid).data.data();
    if (!geom.pointwise() && g.needs_grad(wid)) {
      col.resize(K * P);
      im2col(geom, g.value(xid).data.data(), col.data());
      colp = col.data();
    }
    if (g.needs_grad(wid)) {
      MatMap<T> dW(g.grad(wid).data(), ei(geom.cout), ei(K));
      dW.noalias() += dY * ConstMatMap<T>(colp, ei(K), ei(P)).transpose();
    }
    if (bid != SIZE_MAX && g.needs_grad(bid)) {
      auto& db = g.grad(bid);
      for (std::size_t c = 0; c < geom.cout; ++c) db[c] += dY.row(ei(c)).sum();
    }
    if (g.needs_grad(xid)) {
      ConstMatMap<T> W(g.value(wid).data.data(), ei(geom.cout), ei(K));
      if (geom.pointwise()) {
        MatMap<T> dX(g.grad(xid).data(), ei(K), ei(P));
        dX.noalias() += W.transpose() * dY;
      } else {
        AlignedVector<T> dcol(K * P);
        MatMap<T>(dcol.data(), ei(K), ei(P)).noalias() = W.transpose() * dY;
        col2im(geom, dcol.data(), g.grad(xid).data());
      }
    }
  };
  if (bias) return g.record(std::move(y), {x, w, *bias}, back);
  return g.record(std::move(y), {x, w}, back);
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  Graph<T>& g = *a.graph;
  require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  BasicTensor<T> y = a.value();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  const std::size_t aid = a.id, bid = b.id;
  return g.record(std::move(y), {a, b}, [aid, bid](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    for (std::size_t id : {aid, bid})
      if (g.needs_grad(id)) {
        auto& d = g.grad(id);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i];
      }
  });
}

template <class T>
Var<T> scale(Var<T> x, T factor) {
  Graph<T>& g = *x.graph;
  BasicTensor<T> y = x.value();
  for (auto& v : y.data) v *= factor;
  const std::size_t xid = x.id;
  return g.record(std::move(y), {x}, [xid, factor](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    auto& dx = g.grad(xid);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += factor * dy[i];
  });
}

template <class T>
Var<T> add_channel_bias(Var<T> x, Var<T> b) {
  Graph<T>& g = *x.graph;
  const std::size_t C = x.shape().at(0);
  require(b.value().size() == C, "channel bias width " + std::to_string(b.value().size()) +
                                     " does not match " + std::to_string(C) + " channels");
  const std::size_t inner = x.value().size() / C;
  BasicTensor<T> y = x.value();
  const auto& bv = b.value().data;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < inner; ++i) y[c * inner + i] += bv[c];
  const std::size_t xid = x.id, bid = b.id;
  return g.record(std::move(y), {x, b}, [xid, bid, C, inner](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    if (g.needs_grad(xid)) {
      auto& dx = g.grad(xid);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
    }
    if (g.needs_grad(bid)) {
      auto& db = g.grad(bid);
      for (std::size_t c = 0; c < C; ++c) {
        T s{0};
        for (std::size_t i = 0; i < inner; ++i) s += dy[c * inner + i];
        db[c] += s;
      }
    }
  });
}

template <class T>
Var<T> silu(Var<T> x) {
  Graph<T>& g = *x.graph;
  BasicTensor<T> y = x.value();
  for (auto& v : y.data) v = v / (T{1} + std::exp(-v));
  const std::size_t xid = x.id;
  return g.record(std::move(y), {x}, [xid](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    const auto& xv = g.value(xid).data;
    auto& dx = g.grad(xid);
    for (std::size_t i = 0; i < dx.size(); ++i) {
      const T s = T{1} / (T{1} + std::exp(-xv[i]));
      dx[i] += dy[i] * s * (T{1} + xv[i] * (T{1} - s));
    }
  });
}

template <class T>
Var<T> group_norm(Var<T> x, Var<T> gamma, Var<T> beta, std::size_t groups, T eps) {
  Graph<T>& g = *x.graph;
  const std::size_t C = x.shape().at(0);
  require(groups >= 1 && C % groups == 0,
          "group_norm: " + std::to_string(C) + " channels not divisible into " + std::to_string(groups) + " groups");
  require(gamma.value().size() == C && beta.value().size() == C, "group_norm affine width mismatch");
  const std::size_t inner = x.value().size() / C, per = C / groups, count = per * inner;
  auto stats = std::make_shared<AlignedVector<T>>(2 * groups);  // mean, rstd
  auto xhat = std::make_shared<AlignedVector<T>>(x.value().size());
  BasicTensor<T> y(x.shape());
  const auto& xv = x.value().data;
  const auto& gv = gamma.value().data;
  const auto& bv = beta.value().data;
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const std::size_t off = gi * count;
    double mean = 0.0;
    for (std::size_t i = 0; i < count; ++i) mean += xv[off + i];
    mean /= static_cast<double>(count);
    double var = 0.0;
    for (std::size_t i = 0; i < count; ++i) var += (xv[off + i] - mean) * (xv[off + i] - mean);
    var /= static_cast<double>(count);
    const double rstd = 1.0 / std::sqrt(var + static_cast<double>(eps));
    (*stats)[2 * gi] = static_cast<T>(mean);
    (*stats)[2 * gi + 1] = static_cast<T>(rstd);
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t c = gi * per + i / inner;
      const T h = static_cast<T>((xv[off + i] - mean) * rstd);
      (*xhat)[off + i] = h;
      y[off + i] = gv[c] * h + bv[c];
    }
  }
  const std::size_t xid = x.id, gid = gamma.id, bid = beta.id;
  return g.record(std::move(y), {x, gamma, beta},
                  [xid, gid, bid, groups, per, inner, count, stats, xhat](Graph<T>& g, std::size_t self) {
                    const auto& dy = g.grad(self);
                    const auto& gv = g.value(gid).data;
                    const auto& h = *xhat;
                    if (g.needs_grad(gid) || g.needs_grad(bid)) {
                      auto& dg = g.grad(gid);
                      auto& db = g.grad(bid);
                      for (std::size_t i = 0; i < dy.size(); ++i) {
                        const std::size_t c = i / inner;
                        dg[c] += dy[i] * h[i];
                        db[c] += dy[i];
                      }
                    }
                    if (!g.needs_grad(xid)) return;
                    auto& dx = g.grad(xid);
                    for (std::size_t gi = 0; gi < groups; ++gi) {
                      const std::size_t off = gi * count;
                      double sum_d = 0.0, sum_dh = 0.0;
                      for (std::size_t i = 0; i < count; ++i) {
                        const T dh = dy[off + i] * gv[gi * per + i / inner];
                        sum_d += dh;
                        sum_dh += dh * h[off + i];
                      }
                      const double mean_d = sum_d / static_cast<double>(count);
                      const double mean_dh = sum_dh / static_cast<double>(count);
                      const double rstd = (*stats)[2 * gi + 1];
                      for (std::size_t i = 0; i < count; ++i) {
                        const double dh = dy[off + i] * gv[gi * per + i / inner];
                        dx[off + i] += static_cast<T>(rstd * (dh - mean_d - h[off + i] * mean_dh));
                      }
                    }
                  });
}

template <class T>
Var<T> concat0(Var<T> a, Var<T> b) {
  Graph<T>& g = *a.graph;
  Shape sa = a.shape(), sb = b.shape();
  require(sa.size() == sb.size() && std::equal(sa.begin() + 1, sa.end(), sb.begin() + 1),
          "concat0: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  Shape so = sa;
  so[0] += sb[0];
  BasicTensor<T> y(so);
  std::copy(a.value().data.begin(), a.value().data.end(), y.data.begin());
  std::copy(b.value().data.begin(), b.value().data.end(),
            y.data.begin() + static_cast<std::ptrdiff_t>(a.value().size()));
  const std::size_t aid = a.id, bid = b.id, na = a.value().size();
  return g.record(std::move(y), {a, b}, [aid, bid, na](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    if (g.needs_grad(aid)) {
      auto& da = g.grad(aid);
      for (std::size_t i = 0; i < na; ++i) da[i] += dy[i];
    }
    if (g.needs_grad(bid)) {
      auto& db = g.grad(bid);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += dy[na + i];
    }
  });
}

template <class T>
Var<T> avg_pool2d(Var<T> x, std::size_t f) {
  Graph<T>& g = *x.graph;
  const auto& s = x.shape();
  require(s.size() == 4, "avg_pool2d needs [C, D, H, W]");
  require(f >= 1 && s[2] % f == 0 && s[3] % f == 0,
          "avg_pool2d: " + shape_str(s) + " not divisible by " + std::to_string(f));
  if (f == 1) return x;
  const std::size_t lead = s[0] * s[1], H = s[2], W = s[3], h = H / f, w = W / f;
  BasicTensor<T> y({s[0], s[1], h, w});
  const auto& xv = x.value().data;
  const T inv = T{1} / static_cast<T>(f * f);
  for (std::size_t l = 0; l < lead; ++l)
    for (std::size_t yy = 0; yy < h; ++yy)
      for (std::size_t xx = 0; xx < w; ++xx) {
        T acc{0};
        for (std::size_t a = 0; a < f; ++a)
          for (std::size_t b = 0; b < f; ++b) acc += xv[(l * H + yy * f + a) * W + xx * f + b];
        y[(l * h + yy) * w + xx] = acc * inv;
      }
  const std::size_t xid = x.id;
  return g.record(std::move(y), {x}, [xid, lead, H, W, h, w, f, inv](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    auto& dx = g.grad(xid);
    for (std::size_t l = 0; l < lead; ++l)
      for (std::size_t yy = 0; yy < H; ++yy)
        for (std::size_t xx = 0; xx < W; ++xx) dx[(l * H + yy) * W + xx] += dy[(l * h + yy / f) * w + xx / f] * inv;
  });
}

template <class T>
Var<T> upsample2d(Var<T> x, std::size_t f) {
  Graph<T>& g = *x.graph;
  const auto& s = x.shape();
  require(s.size() == 4, "upsample2d needs [C, D, H, W]");
  if (f == 1) return x;
  const std::size_t lead = s[0] * s[1], h = s[2], w = s[3], H = h * f, W = w * f;
  BasicTensor<T> y({s[0], s[1], H, W});
  const auto& xv = x.value().data;
  for (std::size_t l = 0; l < lead; ++l)
    for (std::size_t yy = 0; yy < H; ++yy)
      for (std::size_t xx = 0; xx < W; ++xx) y[(l * H + yy) * W + xx] = xv[(l * h + yy / f) * w + xx / f];
  const std::size_t xid = x.id;
  return g.record(std::move(y), {x}, [xid, lead, H, W, h, w, f](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    auto& dx = g.grad(xid);
    for (std::size_t l = 0; l < lead; ++l)
      for (std::size_t yy = 0; yy < H; ++yy)
        for (std::size_t xx = 0; xx < W; ++xx) dx[(l * h + yy / f) * w + xx / f] += dy[(l * H + yy) * W + xx];
  });
}

namespace {

// Maps each output flat index to its source flat index under `perm`.
std::vector<std::size_t> permutation_index(const Shape& in, const std::vector<std::size_t>& perm) {
  const std::size_t rank = in.size();
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
  Shape out(rank);
  std::vector<std::size_t> src_stride(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out[i] = in[perm[i]];
    src_stride[i] = in_stride[perm[i]];
  }
  const std::size_t total = shape_numel(in);
  std::vector<std::size_t> map(total);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < total; ++o) {
    map[o] = src;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      src += src_stride[d];
      if (idx[d] < out[d]) break;
      src -= src_stride[d] * out[d];
      idx[d] = 0;
    }
  }
  return map;
}

}  // namespace

template <class T>
Var<T> permute(Var<T> x, const std::vector<std::size_t>& perm) {
  Graph<T>& g = *x.graph;
  const Shape& s = x.shape();
  require(perm.size() == s.size(), "permute: rank mismatch");
  Shape out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out[i] = s.at(perm[i]);
  auto map = std::make_shared<std::vector<std::size_t>>(permutation_index(s, perm));
  BasicTensor<T> y(out);
  const auto& xv = x.value().data;
  for (std::size_t o = 0; o < y.size(); ++o) y[o] = xv[(*map)[o]];
  const std::size_t xid = x.id;
  return g.record(std::move(y), {x}, [xid, map](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    auto& dx = g.grad(xid);
    for (std::size_t o = 0; o < dy.size(); ++o) dx[(*map)[o]] += dy[o];
  });
}

template <class T>
Var<T> reshape(Var<T> x, Shape shape) {
  Graph<T>& g = *x.graph;
  require(shape_numel(shape) == x.value().size(),
          "reshape: " + shape_str(x.shape()) + " cannot become " + shape_str(shape));
  BasicTensor<T> y(std::move(shape), x.value().data);
  const std::size_t xid = x.id;
  return g.record(std::move(y), {x}, [xid](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    auto& dx = g.grad(xid);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
  });
}

template <class T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v) {
  Graph<T>& g = *q.graph;
  const auto &qs = q.shape(), &ks = k.shape(), &vs = v.shape();
  require(qs.size() == 3 && ks.size() == 3 && vs == ks && qs[0] == ks[0] && qs[2] == ks[2],
          "attention: incompatible q " + shape_str(qs) + ", k " + shape_str(ks) + ", v " + shape_str(vs));
  const std::size_t G = qs[0], Lq = qs[1], Lk = ks[1], d = qs[2];
  const T sc = T{1} / std::sqrt(static_cast<T>(d));
  const auto ei = [](std::size_t n) { return static_cast<Eigen::Index>(n); };
  auto probs = std::make_shared<AlignedVector<T>>(G * Lq * Lk);
  BasicTensor<T> y({G, Lq, d});
  for (std::size_t gi = 0; gi < G; ++gi) {
    ConstMatMap<T> Q(q.value().data.data() + gi * Lq * d, ei(Lq), ei(d));
    ConstMatMap<T> K(k.value().data.data() + gi * Lk * d, ei(Lk), ei(d));
    ConstMatMap<T> V(v.value().data.data() + gi * Lk * d, ei(Lk), ei(d));
    MatMap<T> P(probs->data() + gi * Lq * Lk, ei(Lq), ei(Lk));
    P.noalias() = (Q * K.transpose()) * sc;
    for (Eigen::Index r = 0; r < P.rows(); ++r) {
      auto row = P.row(r);
      const T mx = row.maxCoeff();
      row = (row.array() - mx).exp();
      row /= row.sum();
    }
    MatMap<T>(y.data.data() + gi * Lq * d, ei(Lq), ei(d)).noalias() = P * V;
  }
  const std::size_t qid = q.id, kid = k.id, vid = v.id;
  return g.record(std::move(y), {q, k, v}, [=](Graph<T>& g, std::size_t self) {
    const auto& dyv = g.grad(self);
    AlignedVector<T> dP(Lq * Lk);
    for (std::size_t gi = 0; gi < G; ++gi) {
      ConstMatMap<T> dO(dyv.data() + gi * Lq * d, ei(Lq), ei(d));
      ConstMatMap<T> P(probs->data() + gi * Lq * Lk, ei(Lq), ei(Lk));
      ConstMatMap<T> Q(g.value(qid).data.data() + gi * Lq * d, ei(Lq), ei(d));
      ConstMatMap<T> K(g.value(kid).data.data() + gi * Lk * d, ei(Lk), ei(d));
      ConstMatMap<T> V(g.value(vid).data.data() + gi * Lk * d, ei(Lk), ei(d));
      if (g.needs_grad(vid)) MatMap<T>(g.grad(vid).data() + gi * Lk * d, ei(Lk), ei(d)).noalias() += P.transpose() * dO;
      if (!g.needs_grad(qid) && !g.needs_grad(kid)) continue;
      MatMap<T> dS(dP.data(), ei(Lq), ei(Lk));
      dS.noalias() = dO * V.transpose();
      for (Eigen::Index r = 0; r < dS.rows(); ++r) {
        const T dot = (dS.row(r).array() * P.row(r).array()).sum();
        dS.row(r) = (P.row(r).array() * (dS.row(r).array() - dot)).matrix();
      }
      if (g.needs_grad(qid))
        MatMap<T>(g.grad(qid).data() + gi * Lq * d, ei(Lq), ei(d)).noalias() += (dS * K) * sc;
      if (g.needs_grad(kid))
        MatMap<T>(g.grad(kid).data() + gi * Lk * d, ei(Lk), ei(d)).noalias() += (dS.transpose() * Q) * sc;
    }
  });
}

template <class T>
Var<T> dense(Var<T> x, Var<T> w, Var<T> b) {
  Graph<T>& g = *x.graph;
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  require(ws.size() == 2 && !xs.empty() && xs.back() == ws[1],
          "dense: input " + shape_str(xs) + " does not match weight " + shape_str(ws));
  require(b.value().size() == ws[0], "dense: bias width mismatch");
  const std::size_t in = ws[1], out = ws[0], rows = x.value().size() / in;
  const auto ei = [](std::size_t n) { return static_cast<Eigen::Index>(n); };
  Shape ys = xs;
  ys.back() = out;
  BasicTensor<T> y(ys);
  MatMap<T> Y(y.data.data(), ei(rows), ei(out));
  Y.noalias() = ConstMatMap<T>(x.value().data.data(), ei(rows), ei(in)) *
                ConstMatMap<T>(w.value().data.data(), ei(out), ei(in)).transpose();
  const auto& bv = b.value().data;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < out; ++c) Y(ei(r), ei(c)) += bv[c];
  const std::size_t xid = x.id, wid = w.id, bid = b.id;
  return g.record(std::move(y), {x, w, b}, [=](Graph<T>& g, std::size_t self) {
    ConstMatMap<T> dY(g.grad(self).data(), ei(rows), ei(out));
    if (g.needs_grad(xid))
      MatMap<T>(g.grad(xid).data(), ei(rows), ei(in)).noalias() +=
          dY * ConstMatMap<T>(g.value(wid).data.data(), ei(out), ei(in));
    if (g.needs_grad(wid))
      MatMap<T>(g.grad(wid).data(), ei(out), ei(in)).noalias() +=
          dY.transpose() * ConstMatMap<T>(g.value(xid).data.data(), ei(rows), ei(in));
    if (g.needs_grad(bid)) {
      auto& db = g.grad(bid);
      for (std::size_t c = 0; c < out; ++c) db[c] += dY.col(ei(c)).sum();
    }
  });
}

template <class T>
Var<T> mean0(Var<T> x) {
  Graph<T>& g = *x.graph;
  const Shape& s = x.shape();
  require(!s.empty() && s[0] >= 1, "mean0 on an empty tensor");
  const std::size_t L = s[0], inner = x.value().size() / L;
  BasicTensor<T> y(Shape(s.begin() + 1, s.end()));
  if (y.shape.empty()) y = BasicTensor<T>(Shape{1});
  const auto& xv = x.value().data;
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t i = 0; i < inner; ++i) y[i] += xv[l * inner + i];
  for (auto& v : y.data) v /= static_cast<T>(L);
  const std::size_t xid = x.id;
  return g.record(std::move(y), {x}, [xid, L, inner](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    auto& dx = g.grad(xid);
    const T inv = T{1} / static_cast<T>(L);
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t i = 0; i < inner; ++i) dx[l * inner + i] += dy[i] * inv;
  });
}

template <class T>
Var<T> mean_trailing(Var<T> x) {
  Graph<T>& g = *x.graph;
  const std::size_t C = x.shape().at(0), inner = x.value().size() / C;
  BasicTensor<T> y({C});
  const auto& xv = x.value().data;
  for (std::size_t c = 0; c < C; ++c) {
    T s{0};
    for (std::size_t i = 0; i < inner; ++i) s += xv[c * inner + i];
    y[c] = s / static_cast<T>(inner);
  }
  const std::size_t xid = x.id;
  return g.record(std::move(y), {x}, [xid, C, inner](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    auto& dx = g.grad(xid);
    const T inv = T{1} / static_cast<T>(inner);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < inner; ++i) dx[c * inner + i] += dy[c] * inv;
  });
}

template <class T>
Var<T> mse(Var<T> x, const BasicTensor<T>& target) {
  Graph<T>& g = *x.graph;
  require(x.shape() == target.shape, "mse: prediction " + shape_str(x.shape()) + " vs target " +
                                         shape_str(target.shape));
  const auto& xv = x.value().data;
  double acc = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double d = static_cast<double>(xv[i]) - static_cast<double>(target[i]);
    acc += d * d;
  }
  BasicTensor<T> y({1});
  y[0] = static_cast<T>(acc / static_cast<double>(xv.size()));
  const std::size_t xid = x.id;
  auto tgt = std::make_shared<AlignedVector<T>>(target.data);
  return g.record(std::move(y), {x}, [xid, tgt](Graph<T>& g, std::size_t self) {
    const T dy = g.grad(self)[0];
    const auto& xv = g.value(xid).data;
    auto& dx = g.grad(xid);
    const T k = T{2} * dy / static_cast<T>(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) dx[i] += k * (xv[i] - (*tgt)[i]);
  });
}

#define TCPDIFF_INSTANTIATE(T)                                                                  \
  template class Graph<T>;                                                                      \
  template struct Var<T>;                                                                       \
  template Var<T> conv3d<T>(Var<T>, Var<T>, const Var<T>*);                                     \
  template Var<T> add<T>(Var<T>, Var<T>);                                                       \
  template Var<T> scale<T>(Var<T>, T);                                                          \
  template Var<T> add_channel_bias<T>(Var<T>, Var<T>);                                          \
  template Var<T> silu<T>(Var<T>);                                                              \
  template Var<T> group_norm<T>(Var<T>, Var<T>, Var<T>, std::size_t, T);                        \
  template Var<T> concat0<T>(Var<T>, Var<T>);                                                   \
  template Var<T> avg_pool2d<T>(Var<T>, std::size_t);                                           \
  template Var<T> upsample2d<T>(Var<T>, std::size_t);                                           \
  template Var<T> permute<T>(Var<T>, const std::vector<std::size_t>&);                          \
  template Var<T> reshape<T>(Var<T>, Shape);                                                    \
  template Var<T> attention<T>(Var<T>, Var<T>, Var<T>);                                         \
  template Var<T> dense<T>(Var<T>, Var<T>, Var<T>);                                             \
  template Var<T> mean0<T>(Var<T>);                                                             \
  template Var<T> mean_trailing<T>(Var<T>);                                                     \
  template Var<T> mse<T>(Var<T>, const BasicTensor<T>&);

TCPDIFF_INSTANTIATE(float)
TCPDIFF_INSTANTIATE(double)

}  // namespace tcpdiff::nn
