#pragma once

// Tape-based reverse-mode differentiation over dense tensors. Network
// activations are 5-D [B, C, D, H, W]; every op here is templated on the
// scalar so gradient checks can run the same code in double.

#include "spct/common.hpp"

#include <Eigen/Core>

#include <deque>
#include <functional>
#include <numeric>

namespace spct::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? ", " : "") + std::to_string(s[i]);
  return out + "]";
}

template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(ad::numel(shape), fill) {}
  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != ad::numel(shape))
      throw std::invalid_argument("Tensor: " + std::to_string(data.size()) + " values for shape " +
                                  ad::to_string(shape));
  }
  std::size_t numel() const { return data.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  template <class U>
  Tensor<U> cast() const {
    return Tensor<U>(shape, std::vector<U>(data.begin(), data.end()));
  }
};

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  std::vector<T> grad;
};

/// Named parameters with stable addresses.
template <class T>
struct ParamSet {
  std::deque<Parameter<T>> items;

  Parameter<T>& add(std::string name, Shape shape) {
    if (find(name)) throw std::invalid_argument("duplicate parameter " + name);
    items.push_back({std::move(name), Tensor<T>(shape), std::vector<T>(ad::numel(shape), T(0))});
    return items.back();
  }
  Parameter<T>* find(const std::string& name) {
    for (auto& p : items)
      if (p.name == name) return &p;
    return nullptr;
  }
  Parameter<T>& at(const std::string& name) {
    if (auto* p = find(name)) return *p;
    throw std::out_of_range("no parameter " + name);
  }
  const Parameter<T>& at(const std::string& name) const { return const_cast<ParamSet*>(this)->at(name); }
  void zero_grad() {
    for (auto& p : items) std::fill(p.grad.begin(), p.grad.end(), T(0));
  }
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : items) n += p.value.numel();
    return n;
  }

  template <class U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& p : items) {
      auto& q = out.add(p.name, p.value.shape);
      q.value = p.value.template cast<U>();
    }
    return out;
  }
};

template <class T>
class Graph {
public:
  using Backward = std::function<void(Graph&, int)>;

  struct Node {
    Tensor<T> value;
    std::vector<T> grad;
    std::vector<int> parents;
    Backward backward;
    Parameter<T>* param = nullptr;
    bool needsGrad = false;
  };

  int add(Tensor<T> value, std::vector<int> parents, Backward backward) {
    const int id = static_cast<int>(nodes_.size());
    bool needs = false;
    for (int p : parents) {
      if (p < 0 || p >= id) throw std::logic_error("graph: node " + std::to_string(id) + " references node " +
                                                   std::to_string(p) + " (cycle or dangling edge)");
      needs = needs || nodes_[static_cast<std::size_t>(p)].needsGrad;
    }
    nodes_.push_back({std::move(value), {}, std::move(parents), std::move(backward), nullptr, needs});
    return id;
  }

  int input(Tensor<T> value, bool needsGrad = false) {
    int id = add(std::move(value), {}, nullptr);
    nodes_.back().needsGrad = needsGrad;
    return id;
  }

  int param(Parameter<T>& p) {
    int id = add(p.value, {}, nullptr);
    nodes_.back().param = &p;
    nodes_.back().needsGrad = true;
    return id;
  }

  const Tensor<T>& value(int id) const { return nodes_.at(static_cast<std::size_t>(id)).value; }
  const Shape& shape(int id) const { return value(id).shape; }
  bool needs_grad(int id) const { return nodes_.at(static_cast<std::size_t>(id)).needsGrad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer of a node, zero-allocated on first use.
  std::vector<T>& grad(int id) {
    auto& n = nodes_.at(static_cast<std::size_t>(id));
    if (n.grad.empty()) n.grad.assign(n.value.numel(), T(0));
    return n.grad;
  }
  bool has_grad(int id) const { return !nodes_.at(static_cast<std::size_t>(id)).grad.empty(); }

  /// Reverse sweep from a scalar node; parameter gradients are accumulated
  /// into their Parameter::grad.
  void backward(int loss) {
    if (value(loss).numel() != 1) throw std::invalid_argument("backward: loss must be a scalar");
    grad(loss)[0] = T(1);
    for (int id = loss; id >= 0; --id) {
      auto& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.needsGrad || n.grad.empty()) continue;
      for (int p : n.parents)
        if (p >= id) throw std::logic_error("graph: cycle at node " + std::to_string(id));
      if (n.backward) n.backward(*this, id);
      if (n.param)
        for (std::size_t i = 0; i < n.grad.size(); ++i) n.param->grad[i] += n.grad[i];
    }
  }

  /// Drops activations of nodes that are no longer needed.
  void clear() { nodes_.clear(); }

private:
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Elementwise and structural ops

template <class T>
int add(Graph<T>& g, int a, int b) {
  if (g.shape(a) != g.shape(b))
    throw std::invalid_argument("add: shapes " + to_string(g.shape(a)) + " and " + to_string(g.shape(b)));
  Tensor<T> out = g.value(a);
  const auto& vb = g.value(b).data;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += vb[i];
  return g.add(std::move(out), {a, b}, [a, b](Graph<T>& G, int self) {
    const auto& gs = G.grad(self);
    for (int p : {a, b})
      if (G.needs_grad(p)) {
        auto& gp = G.grad(p);
        for (std::size_t i = 0; i < gs.size(); ++i) gp[i] += gs[i];
      }
  });
}

/// Same data, new shape.
template <class T>
int reshape(Graph<T>& g, int x, Shape shape) {
  if (numel(shape) != g.value(x).numel())
    throw std::invalid_argument("reshape: " + to_string(g.shape(x)) + " -> " + to_string(shape));
  Tensor<T> out(std::move(shape), g.value(x).data);
  return g.add(std::move(out), {x}, [x](Graph<T>& G, int self) {
    if (!G.needs_grad(x)) return;
    const auto& gs = G.grad(self);
    auto& gx = G.grad(x);
    for (std::size_t i = 0; i < gs.size(); ++i) gx[i] += gs[i];
  });
}

namespace detail {
// View of a tensor as [outer, axis, inner] around the channel axis 1.
inline std::array<std::size_t, 3> channel_split(const Shape& s) {
  if (s.size() < 2) throw std::invalid_argument("channel op needs rank >= 2");
  std::size_t inner = 1;
  for (std::size_t i = 2; i < s.size(); ++i) inner *= s[i];
  return {s[0], s[1], inner};
}
} // namespace detail

/// Channels [c0, c1) of x.
template <class T>
int slice_channels(Graph<T>& g, int x, std::size_t c0, std::size_t c1) {
  const auto [B, C, I] = detail::channel_split(g.shape(x));
  if (!(c0 < c1 && c1 <= C))
    throw std::invalid_argument("slice_channels: [" + std::to_string(c0) + ", " + std::to_string(c1) +
                                ") of " + std::to_string(C));
  Shape s = g.shape(x);
  s[1] = c1 - c0;
  Tensor<T> out(s);
  const auto& v = g.value(x).data;
  for (std::size_t b = 0; b < B; ++b)
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>((b * C + c0) * I), (c1 - c0) * I,
                out.data.begin() + static_cast<std::ptrdiff_t>(b * (c1 - c0) * I));
  return g.add(std::move(out), {x}, [x, c0, c1, B = B, C = C, I = I](Graph<T>& G, int self) {
    if (!G.needs_grad(x)) return;
    const auto& gs = G.grad(self);
    auto& gx = G.grad(x);
    const std::size_t w = c1 - c0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < w * I; ++i) gx[(b * C + c0) * I + i] += gs[b * w * I + i];
  });
}

/// Concatenation along the channel axis; all other dims must agree.
template <class T>
int concat_channels(Graph<T>& g, const std::vector<int>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_channels: no inputs");
  Shape s = g.shape(xs[0]);
  const auto [B, C0, I] = detail::channel_split(s);
  std::size_t C = 0;
  std::vector<std::size_t> widths;
  for (int x : xs) {
    Shape t = g.shape(x);
    const auto [b, c, i] = detail::channel_split(t);
    t[1] = s[1];
    if (t != s)
      throw std::invalid_argument("concat_channels: " + to_string(g.shape(x)) + " vs " + to_string(g.shape(xs[0])));
    widths.push_back(c);
    C += c;
  }
  s[1] = C;
  Tensor<T> out(s);
  std::size_t off = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const auto& v = g.value(xs[k]).data;
    for (std::size_t b = 0; b < B; ++b)
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(b * widths[k] * I), widths[k] * I,
                  out.data.begin() + static_cast<std::ptrdiff_t>((b * C + off) * I));
    off += widths[k];
  }
  return g.add(std::move(out), xs, [xs, widths, B = B, C, I = I](Graph<T>& G, int self) {
    const auto& gs = G.grad(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
      if (G.needs_grad(xs[k])) {
        auto& gx = G.grad(xs[k]);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t i = 0; i < widths[k] * I; ++i) gx[b * widths[k] * I + i] += gs[(b * C + off) * I + i];
      }
      off += widths[k];
    }
  });
}

/// y = x (x >= 0), c x (x < 0), one slope per channel.
template <class T>
int prelu(Graph<T>& g, int x, int slope) {
  const auto [B, C, I] = detail::channel_split(g.shape(x));
  if (g.value(slope).numel() != C)
    throw std::invalid_argument("prelu: " + std::to_string(g.value(slope).numel()) + " slopes for " +
                                std::to_string(C) + " channels");
  Tensor<T> out = g.value(x);
  const auto& c = g.value(slope).data;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t ch = 0; ch < C; ++ch) {
      T* p = out.data.data() + (b * C + ch) * I;
      for (std::size_t i = 0; i < I; ++i)
        if (p[i] < T(0)) p[i] *= c[ch];
    }
  return g.add(std::move(out), {x, slope}, [x, slope, B = B, C = C, I = I](Graph<T>& G, int self) {
    const auto& gs = G.grad(self);
    const auto& xv = G.value(x).data;
    const auto& c = G.value(slope).data;
    if (G.needs_grad(x)) {
      auto& gx = G.grad(x);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t ch = 0; ch < C; ++ch)
          for (std::size_t i = 0, o = (b * C + ch) * I; i < I; ++i, ++o)
            gx[o] += xv[o] < T(0) ? c[ch] * gs[o] : gs[o];
    }
    if (G.needs_grad(slope)) {
      auto& gc = G.grad(slope);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t ch = 0; ch < C; ++ch) {
          T s = T(0);
          for (std::size_t i = 0, o = (b * C + ch) * I; i < I; ++i, ++o)
            if (xv[o] < T(0)) s += xv[o] * gs[o];
          gc[ch] += s;
        }
    }
  });
}

/// Mean squared error against a constant target.
template <class T>
int mse(Graph<T>& g, int pred, const Tensor<T>& target) {
  if (g.value(pred).numel() != target.numel())
    throw std::invalid_argument("mse: shapes " + to_string(g.shape(pred)) + " and " + to_string(target.shape));
  const auto& p = g.value(pred).data;
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = static_cast<double>(p[i]) - static_cast<double>(target.data[i]);
    s += d * d;
  }
  const double n = static_cast<double>(p.size());
  Tensor<T> out(Shape{1}, static_cast<T>(s / n));
  return g.add(std::move(out), {pred}, [pred, target, n](Graph<T>& G, int self) {
    if (!G.needs_grad(pred)) return;
    const T gs = G.grad(self)[0];
    const auto& p = G.value(pred).data;
    auto& gp = G.grad(pred);
    const T k = static_cast<T>(2.0 / n) * gs;
    for (std::size_t i = 0; i < p.size(); ++i) gp[i] += k * (p[i] - target.data[i]);
  });
}

/// 0.5 ||x||^2.
template <class T>
int half_sq_norm(Graph<T>& g, int x) {
  double s = 0.0;
  for (T v : g.value(x).data) s += static_cast<double>(v) * static_cast<double>(v);
  return g.add(Tensor<T>(Shape{1}, static_cast<T>(0.5 * s)), {x}, [x](Graph<T>& G, int self) {
    if (!G.needs_grad(x)) return;
    const T gs = G.grad(self)[0];
    const auto& v = G.value(x).data;
    auto& gx = G.grad(x);
    for (std::size_t i = 0; i < v.size(); ++i) gx[i] += gs * v[i];
  });
}

// ---------------------------------------------------------------------------
// Convolution: stride 1, zero "same" padding, cross-correlation.
// x [B, Cin, D, H, W], w [F, Cin, kd, kh, kw] with odd kernel sizes, b [F].

namespace detail {

struct ConvDims {
  std::size_t B, Cin, D, H, W, F, kd, kh, kw;
  std::size_t K() const { return Cin * kd * kh * kw; }
  std::size_t P() const { return D * H * W; }
};

template <class T>
void im2col(const T* x, T* col, const ConvDims& d) {
  const long pd = static_cast<long>(d.kd / 2), ph = static_cast<long>(d.kh / 2), pw = static_cast<long>(d.kw / 2);
  const long D = static_cast<long>(d.D), H = static_cast<long>(d.H), W = static_cast<long>(d.W);
  std::size_t row = 0;
  for (std::size_t c = 0; c < d.Cin; ++c)
    for (long a = 0; a < static_cast<long>(d.kd); ++a)
      for (long bb = 0; bb < static_cast<long>(d.kh); ++bb)
        for (long e = 0; e < static_cast<long>(d.kw); ++e, ++row) {
          T* out = col + row * d.P();
          const T* xc = x + c * d.P();
          for (long z = 0; z < D; ++z) {
            const long iz = z + a - pd;
            for (long y = 0; y < H; ++y) {
              const long iy = y + bb - ph;
              T* o = out + (z * H + y) * W;
              if (iz < 0 || iz >= D || iy < 0 || iy >= H) {
                std::fill(o, o + W, T(0));
                continue;
              }
              const T* src = xc + (iz * H + iy) * W;
              for (long xx = 0; xx < W; ++xx) {
                const long ix = xx + e - pw;
                o[xx] = (ix < 0 || ix >= W) ? T(0) : src[ix];
              }
            }
          }
        }
}

template <class T>
void col2im_add(const T* col, T* x, const ConvDims& d) {
  const long pd = static_cast<long>(d.kd / 2), ph = static_cast<long>(d.kh / 2), pw = static_cast<long>(d.kw / 2);
  const long D = static_cast<long>(d.D), H = static_cast<long>(d.H), W = static_cast<long>(d.W);
  std::size_t row = 0;
  for (std::size_t c = 0; c < d.Cin; ++c)
    for (long a = 0; a < static_cast<long>(d.kd); ++a)
      for (long bb = 0; bb < static_cast<long>(d.kh); ++bb)
        for (long e = 0; e < static_cast<long>(d.kw); ++e, ++row) {
          const T* in = col + row * d.P();
          T* xc = x + c * d.P();
          for (long z = 0; z < D; ++z) {
            const long iz = z + a - pd;
            if (iz < 0 || iz >= D) continue;
            for (long y = 0; y < H; ++y) {
              const long iy = y + bb - ph;
              if (iy < 0 || iy >= H) continue;
              const T* o = in + (z * H + y) * W;
              T* dst = xc + (iz * H + iy) * W;
              const long lo = std::max(0L, pw - e), hi = std::min(W, W + pw - e);
              for (long xx = lo; xx < hi; ++xx) dst[xx + e - pw] += o[xx];
            }
          }
        }
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

} // namespace detail

template <class T>
int conv(Graph<T>& g, int x, int w, int b) {
  const auto& xs = g.shape(x);
  const auto& ws = g.shape(w);
  if (xs.size() != 5 || ws.size() != 5)
    throw std::invalid_argument("conv: expected 5-D input and kernel, got " + to_string(xs) + " and " + to_string(ws));
  if (ws[1] != xs[1])
    throw std::invalid_argument("conv: kernel expects " + std::to_string(ws[1]) + " channels, input has " +
                                std::to_string(xs[1]));
  if (ws[2] % 2 == 0 || ws[3] % 2 == 0 || ws[4] % 2 == 0) throw std::invalid_argument("conv: kernel sizes must be odd");
  if (g.value(b).numel() != ws[0]) throw std::invalid_argument("conv: bias count mismatch");
  detail::ConvDims d{xs[0], xs[1], xs[2], xs[3], xs[4], ws[0], ws[2], ws[3], ws[4]};
  if (d.P() == 0) throw std::invalid_argument("conv: empty spatial extent");

  Tensor<T> out(Shape{d.B, d.F, d.D, d.H, d.W});
  std::vector<T> col(d.K() * d.P());
  Eigen::Map<const detail::RowMat<T>> Wm(g.value(w).data.data(), static_cast<Eigen::Index>(d.F),
                                         static_cast<Eigen::Index>(d.K()));
  const auto& bias = g.value(b).data;
  for (std::size_t n = 0; n < d.B; ++n) {
    detail::im2col(g.value(x).data.data() + n * d.Cin * d.P(), col.data(), d);
    Eigen::Map<const detail::RowMat<T>> Cm(col.data(), static_cast<Eigen::Index>(d.K()),
                                           static_cast<Eigen::Index>(d.P()));
    Eigen::Map<detail::RowMat<T>> Om(out.data.data() + n * d.F * d.P(), static_cast<Eigen::Index>(d.F),
                                     static_cast<Eigen::Index>(d.P()));
    Om.noalias() = Wm * Cm;
    for (std::size_t f = 0; f < d.F; ++f) Om.row(static_cast<Eigen::Index>(f)).array() += bias[f];
  }
  return g.add(std::move(out), {x, w, b}, [x, w, b, d](Graph<T>& G, int self) {
    const auto& gs = G.grad(self);
    const Eigen::Index F = static_cast<Eigen::Index>(d.F), K = static_cast<Eigen::Index>(d.K()),
                       P = static_cast<Eigen::Index>(d.P());
    std::vector<T> col(d.K() * d.P());
    const bool gx = G.needs_grad(x), gw = G.needs_grad(w), gb = G.needs_grad(b);
    Eigen::Map<const detail::RowMat<T>> Wm(G.value(w).data.data(), F, K);
    for (std::size_t n = 0; n < d.B; ++n) {
      Eigen::Map<const detail::RowMat<T>> Gm(gs.data() + n * d.F * d.P(), F, P);
      if (gb) {
        auto& gbv = G.grad(b);
        // plain loop: a vectorised reduction would make the order depend on alignment
        for (std::size_t f = 0; f < d.F; ++f) {
          const T* r = gs.data() + (n * d.F + f) * d.P();
          double acc = 0.0;
          for (std::size_t i = 0; i < d.P(); ++i) acc += static_cast<double>(r[i]);
          gbv[f] += static_cast<T>(acc);
        }
      }
      if (gw) {
        detail::im2col(G.value(x).data.data() + n * d.Cin * d.P(), col.data(), d);
        Eigen::Map<const detail::RowMat<T>> Cm(col.data(), K, P);
        Eigen::Map<detail::RowMat<T>> GW(G.grad(w).data(), F, K);
        GW.noalias() += Gm * Cm.transpose();
      }
      if (gx) {
        Eigen::Map<detail::RowMat<T>> Cm(col.data(), K, P);
        Cm.noalias() = Wm.transpose() * Gm;
        detail::col2im_add(col.data(), G.grad(x).data() + n * d.Cin * d.P(), d);
      }
    }
  });
}

} // namespace spct::ad
