#include "saigformer/ops.hpp"

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>
#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <limits>
#include <numbers>

namespace saig::ops {

namespace {
std::atomic<bool> g_corrupt_gelu{false};
}  // namespace

void set_corrupt_gelu_backward(bool on) { g_corrupt_gelu = on; }
bool corrupt_gelu_backward() { return g_corrupt_gelu; }

namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<Mat<T>>;
template <typename T>
using CMapM = Eigen::Map<const Mat<T>>;

// Reductions over 64 bytes of independent lanes, combined in a fixed order; the
// result does not depend on how the buffers happen to be aligned.
template <typename T>
inline constexpr size_t kLanes = 64 / sizeof(T);

template <typename T>
T combine_lanes(T* s) {
  for (size_t width = kLanes<T> / 2; width > 0; width /= 2)
    for (size_t k = 0; k < width; ++k) s[k] += s[k + width];
  return s[0];
}

template <typename T>
T lane_dot(const T* a, const T* b, size_t n) {
  T s[kLanes<T>] = {};
  size_t i = 0;
  for (; i + kLanes<T> <= n; i += kLanes<T>)
    for (size_t k = 0; k < kLanes<T>; ++k) s[k] += a[i + k] * b[i + k];
  for (size_t k = 0; i < n; ++i, ++k) s[k] += a[i] * b[i];
  return combine_lanes(s);
}

template <typename T>
T lane_sum(const T* a, size_t n) {
  T s[kLanes<T>] = {};
  size_t i = 0;
  for (; i + kLanes<T> <= n; i += kLanes<T>)
    for (size_t k = 0; k < kLanes<T>; ++k) s[k] += a[i + k];
  for (size_t k = 0; i < n; ++i, ++k) s[k] += a[i];
  return combine_lanes(s);
}

template <typename T>
using Node = detail::Node<T>;

// Parents are recorded in input order whenever the result requires grad.
template <typename T>
Node<T>& parent(Node<T>& self, size_t i) {
  return *self.parents[i];
}

std::array<int, 4> dims(const Shape& s) { return {s.n, s.c, s.h, s.w}; }

void check_broadcast(const char* op, const Shape& a, const Shape& b) {
  const auto da = dims(a);
  const auto db = dims(b);
  static constexpr const char* names[] = {"N", "C", "H", "W"};
  for (int i = 0; i < 4; ++i) {
    if (db[i] != da[i] && db[i] != 1) throw ShapeError(op, names[i], da[i], db[i]);
  }
}

// Index of the broadcast operand element matching flat output index order.
struct BroadcastMap {
  std::array<size_t, 4> stride{};  // strides into b (0 where broadcast)
  std::array<int, 4> extent{};

  BroadcastMap(const Shape& a, const Shape& b) {
    const auto da = dims(a);
    const auto db = dims(b);
    extent = da;
    size_t s = 1;
    for (int i = 3; i >= 0; --i) {
      stride[i] = db[i] == 1 ? 0 : s;
      s *= static_cast<size_t>(db[i]);
    }
  }

  template <typename F>
  void for_each(F&& f) const {
    size_t out = 0;
    for (int n = 0; n < extent[0]; ++n)
      for (int c = 0; c < extent[1]; ++c)
        for (int h = 0; h < extent[2]; ++h) {
          const size_t base = n * stride[0] + c * stride[1] + h * stride[2];
          for (int w = 0; w < extent[3]; ++w) f(out++, base + w * stride[3]);
        }
  }
};

enum class BinOp { add, sub, mul, div };

// Applies f(i, j) over output index i and broadcast index j; a same-shape
// operand takes a flat loop the compiler can vectorize.
template <typename F>
void for_each_pair(const BroadcastMap& map, bool same, size_t count, F&& f) {
  if (same) {
    for (size_t i = 0; i < count; ++i) f(i, i);
  } else {
    map.for_each(f);
  }
}

template <BinOp op, typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* name) {
  check_broadcast(name, a.shape(), b.shape());
  BroadcastMap map(a.shape(), b.shape());
  const bool same = a.shape() == b.shape();
  const T* A = a.data().data();
  const T* B = b.data().data();
  const size_t count = a.numel();
  std::vector<T> out(count);
  T* O = out.data();
  for_each_pair(map, same, count, [&](size_t i, size_t j) {
    if constexpr (op == BinOp::add) O[i] = A[i] + B[j];
    if constexpr (op == BinOp::sub) O[i] = A[i] - B[j];
    if constexpr (op == BinOp::mul) O[i] = A[i] * B[j];
    if constexpr (op == BinOp::div) O[i] = A[i] / B[j];
  });
  return Tensor<T>::make_result(
      a.shape(), std::move(out), {a, b},
      [map, same](Node<T>& self) {
        const T* g = self.grad.data();
        const size_t count = self.grad.size();
        Node<T>& pa = parent(self, 0);
        Node<T>& pb = parent(self, 1);
        const T* A = pa.data.data();
        const T* B = pb.data.data();
        if (pa.requires_grad) {
          T* ga = pa.ensure_grad().data();
          for_each_pair(map, same, count, [&](size_t i, size_t j) {
            if constexpr (op == BinOp::add || op == BinOp::sub) ga[i] += g[i];
            if constexpr (op == BinOp::mul) ga[i] += g[i] * B[j];
            if constexpr (op == BinOp::div) ga[i] += g[i] / B[j];
          });
        }
        if (pb.requires_grad) {
          T* gb = pb.ensure_grad().data();
          for_each_pair(map, same, count, [&](size_t i, size_t j) {
            if constexpr (op == BinOp::add) gb[j] += g[i];
            if constexpr (op == BinOp::sub) gb[j] -= g[i];
            if constexpr (op == BinOp::mul) gb[j] += g[i] * A[i];
            if constexpr (op == BinOp::div) gb[j] -= g[i] * A[i] / (B[j] * B[j]);
          });
        }
      },
      name);
}

template <typename T>
Tensor<T> unary(const Tensor<T>& x, const char* name, auto&& fwd, auto&& deriv) {
  const auto X = x.data();
  std::vector<T> out(X.size());
  for (size_t i = 0; i < X.size(); ++i) out[i] = fwd(X[i]);
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x},
      [deriv](Node<T>& self) {
        Node<T>& px = parent(self, 0);
        T* gx = px.ensure_grad().data();
        const T* g = self.grad.data();
        const T* xv = px.data.data();
        const T* yv = self.data.data();
        const size_t count = self.grad.size();
        for (size_t i = 0; i < count; ++i) gx[i] += g[i] * deriv(xv[i], yv[i]);
      },
      name);
}

// out[i] = in[index[i]]
template <typename T>
Tensor<T> gather(const Tensor<T>& x, Shape shape, std::vector<size_t> index, const char* name) {
  const auto X = x.data();
  std::vector<T> out(index.size());
  for (size_t i = 0; i < index.size(); ++i) out[i] = X[index[i]];
  return Tensor<T>::make_result(
      shape, std::move(out), {x},
      [index = std::move(index)](Node<T>& self) {
        auto& gx = parent(self, 0).ensure_grad();
        for (size_t i = 0; i < index.size(); ++i) gx[index[i]] += self.grad[i];
      },
      name);
}

template <typename T>
T sigmoid_value(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<BinOp::add>(a, b, "add");
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<BinOp::sub>(a, b, "sub");
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<BinOp::mul>(a, b, "mul");
}
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<BinOp::div>(a, b, "div");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary(
      x, "scale", [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T value) {
  return unary(
      x, "add_scalar", [value](T v) { return v + value; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  return unary(
      x, "abs", [](T v) { return std::abs(v); },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> reciprocal(const Tensor<T>& x) {
  return unary(
      x, "reciprocal", [](T v) { return T(1) / v; }, [](T, T y) { return -y * y; });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double acc = 0;
  for (T v : x.data()) acc += static_cast<double>(v);
  return Tensor<T>::make_result(
      {1, 1, 1, 1}, {static_cast<T>(acc)}, {x},
      [](Node<T>& self) {
        auto& gx = parent(self, 0).ensure_grad();
        for (auto& g : gx) g += self.grad[0];
      },
      "sum");
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean", "empty tensor");
  double acc = 0;
  for (T v : x.data()) acc += static_cast<double>(v);
  const double count = static_cast<double>(x.numel());
  return Tensor<T>::make_result(
      {1, 1, 1, 1}, {static_cast<T>(acc / count)}, {x},
      [count](Node<T>& self) {
        auto& gx = parent(self, 0).ensure_grad();
        const T g = static_cast<T>(static_cast<double>(self.grad[0]) / count);
        for (auto& v : gx) v += g;
      },
      "mean");
}

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  switch (kind) {
    case Activation::gelu:
      return unary(
          x, "gelu", [](T v) { return T(0.5) * v * (T(1) + Eigen::numext::erf(v * inv_sqrt2)); },
          [corrupt = corrupt_gelu_backward()](T v, T) {
            const T cdf = T(0.5) * (T(1) + Eigen::numext::erf(v * inv_sqrt2));
            return cdf + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v) + (corrupt ? T(0.01) : T(0));
          });
    case Activation::sigmoid:
      return unary(
          x, "sigmoid", [](T v) { return sigmoid_value(v); }, [](T, T y) { return y * (T(1) - y); });
    case Activation::softplus:
      return unary(
          x, "softplus",
          [](T v) { return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v))); },
          [](T v, T) { return sigmoid_value(v); });
  }
  throw ValueError("activation: unknown kind");
}

namespace {

// Elementwise kernels run over fixed-size aligned blocks, zero-padded at the
// end, so every element takes the same vectorized path whatever the buffer
// alignment.
constexpr size_t kBlock = 64;

template <typename T>
using Block = Eigen::Array<T, kBlock, 1>;

template <typename T>
Block<T> load_block(const T* p, size_t n) {
  Block<T> b = Block<T>::Zero();
  std::copy_n(p, n, b.data());
  return b;
}

template <typename T>
void store_block(const Block<T>& b, T* p, size_t n) {
  std::copy_n(b.data(), n, p);
}

template <typename T>
void add_block(const Block<T>& b, T* p, size_t n) {
  for (size_t k = 0; k < n; ++k) p[k] += b[k];
}

}  // namespace

template <typename T>
Tensor<T> dual_gate(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape() == b.shape())) throw ShapeError("dual_gate", "shapes " + a.shape().str() + " and " + b.shape().str() + " differ");
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  const T* A = a.data().data();
  const T* B = b.data().data();
  const size_t count = a.numel();
  std::vector<T> out(count);
  std::vector<T> cdf(count);
  std::vector<T> gate(count);
  for (size_t i = 0; i < count; i += kBlock) {
    const size_t m = std::min(kBlock, count - i);
    const Block<T> av = load_block(A + i, m);
    const Block<T> bv = load_block(B + i, m);
    const Block<T> c = T(0.5) * (T(1) + (av * inv_sqrt2).erf());
    const Block<T> e = (-bv.abs()).exp();
    const Block<T> s = (bv >= T(0)).select(T(1) / (T(1) + e), e / (T(1) + e));
    store_block<T>(c, cdf.data() + i, m);
    store_block<T>(s, gate.data() + i, m);
    store_block<T>(av * c * bv + s * av, out.data() + i, m);
  }
  return Tensor<T>::make_result(
      a.shape(), std::move(out), {a, b},
      [cdf = std::move(cdf), gate = std::move(gate), corrupt = corrupt_gelu_backward()](Node<T>& self) {
        constexpr T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
        Node<T>& pa = parent(self, 0);
        Node<T>& pb = parent(self, 1);
        const T* A = pa.data.data();
        const T* B = pb.data.data();
        const T* g = self.grad.data();
        T* ga = pa.requires_grad ? pa.ensure_grad().data() : nullptr;
        T* gb = pb.requires_grad ? pb.ensure_grad().data() : nullptr;
        const T bump = corrupt ? T(0.01) : T(0);
        const size_t count = self.grad.size();
        for (size_t i = 0; i < count; i += kBlock) {
          const size_t m = std::min(kBlock, count - i);
          const Block<T> av = load_block(A + i, m);
          const Block<T> bv = load_block(B + i, m);
          const Block<T> gv = load_block(g + i, m);
          const Block<T> c = load_block(cdf.data() + i, m);
          const Block<T> s = load_block(gate.data() + i, m);
          if (ga) {
            const Block<T> dgelu = c + av * inv_sqrt2pi * (T(-0.5) * av * av).exp() + bump;
            add_block<T>(gv * (dgelu * bv + s), ga + i, m);
          }
          if (gb) add_block<T>(gv * (av * c + s * (T(1) - s) * av), gb + i, m);
        }
      },
      "dual_gate");
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeom {
  int n, cin, h, w;
  int cout, kh, kw;
  int stride, pad, groups;
  int oh, ow;
  int cin_g, cout_g;
  size_t in_plane() const { return static_cast<size_t>(h) * w; }
  size_t out_plane() const { return static_cast<size_t>(oh) * ow; }
  size_t k() const { return static_cast<size_t>(cin_g) * kh * kw; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
  bool depthwise() const { return cin_g == 1 && cout_g == 1; }
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const size_t L = g.out_plane();
  for (int ci = 0; ci < g.cin_g; ++ci)
    for (int ky = 0; ky < g.kh; ++ky)
      for (int kx = 0; kx < g.kw; ++kx) {
        T* row = col + ((static_cast<size_t>(ci) * g.kh + ky) * g.kw + kx) * L;
        const T* plane = x + static_cast<size_t>(ci) * g.in_plane();
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          T* dst = row + static_cast<size_t>(oy) * g.ow;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.ow, T(0));
            continue;
          }
          const T* src = plane + static_cast<size_t>(iy) * g.w;
          for (int ox = 0; ox < g.ow; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T(0);
          }
        }
      }
}

template <typename T>
void col2im(const T* col, const ConvGeom& g, T* x) {
  const size_t L = g.out_plane();
  for (int ci = 0; ci < g.cin_g; ++ci)
    for (int ky = 0; ky < g.kh; ++ky)
      for (int kx = 0; kx < g.kw; ++kx) {
        const T* row = col + ((static_cast<size_t>(ci) * g.kh + ky) * g.kw + kx) * L;
        T* plane = x + static_cast<size_t>(ci) * g.in_plane();
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          const T* src = row + static_cast<size_t>(oy) * g.ow;
          T* dst = plane + static_cast<size_t>(iy) * g.w;
          for (int ox = 0; ox < g.ow; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
}

// Valid output column range [lo, hi) for kernel tap kx.
inline void tap_range(const ConvGeom& g, int k, int in_extent, int out_extent, int& lo, int& hi) {
  // need 0 <= o*stride - pad + k < in_extent
  lo = 0;
  while (lo < out_extent && lo * g.stride - g.pad + k < 0) ++lo;
  hi = out_extent;
  while (hi > lo && (hi - 1) * g.stride - g.pad + k >= in_extent) --hi;
}

template <typename T>
void depthwise_forward(const T* x, const T* w, const ConvGeom& g, T* y) {
  for (int ky = 0; ky < g.kh; ++ky) {
    int oy0, oy1;
    tap_range(g, ky, g.h, g.oh, oy0, oy1);
    for (int kx = 0; kx < g.kw; ++kx) {
      int ox0, ox1;
      tap_range(g, kx, g.w, g.ow, ox0, ox1);
      const T wv = w[ky * g.kw + kx];
      const int shift = kx - g.pad;
      for (int oy = oy0; oy < oy1; ++oy) {
        const T* src = x + static_cast<size_t>(oy * g.stride - g.pad + ky) * g.w;
        T* dst = y + static_cast<size_t>(oy) * g.ow;
        if (g.stride == 1) {
          for (int ox = ox0; ox < ox1; ++ox) dst[ox] += wv * src[ox + shift];
        } else {
          for (int ox = ox0; ox < ox1; ++ox) dst[ox] += wv * src[ox * g.stride + shift];
        }
      }
    }
  }
}

template <typename T>
void depthwise_backward(const T* x, const T* w, const T* dy, const ConvGeom& g, T* dx, T* dw) {
  for (int ky = 0; ky < g.kh; ++ky) {
    int oy0, oy1;
    tap_range(g, ky, g.h, g.oh, oy0, oy1);
    for (int kx = 0; kx < g.kw; ++kx) {
      int ox0, ox1;
      tap_range(g, kx, g.w, g.ow, ox0, ox1);
      const T wv = w[ky * g.kw + kx];
      T acc = 0;
      const int shift = kx - g.pad;
      for (int oy = oy0; oy < oy1; ++oy) {
        const size_t off = static_cast<size_t>(oy * g.stride - g.pad + ky) * g.w;
        const T* src = x + off;
        const T* gy = dy + static_cast<size_t>(oy) * g.ow;
        if (dx) {
          T* gx = dx + off;
          if (g.stride == 1) {
            for (int ox = ox0; ox < ox1; ++ox) gx[ox + shift] += wv * gy[ox];
          } else {
            for (int ox = ox0; ox < ox1; ++ox) gx[ox * g.stride + shift] += wv * gy[ox];
          }
        }
        if (g.stride == 1 && ox1 > ox0) {
          acc += lane_dot(gy + ox0, src + ox0 + shift, static_cast<size_t>(ox1 - ox0));
        } else {
          for (int ox = ox0; ox < ox1; ++ox) acc += gy[ox] * src[ox * g.stride + shift];
        }
      }
      if (dw) dw[ky * g.kw + kx] += acc;
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const std::optional<Tensor<T>>& bias,
                 int stride, int padding, int groups) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (stride < 1) throw ShapeError("conv2d", "stride", 1, stride);
  if (padding < 0) throw ShapeError("conv2d", "padding", 0, padding);
  if (groups < 1) throw ShapeError("conv2d", "groups", 1, groups);
  if (xs.c % groups != 0) throw ShapeError("conv2d", "input channels not divisible by groups");
  if (ws.n % groups != 0) throw ShapeError("conv2d", "output channels not divisible by groups");
  if (ws.c * groups != xs.c) throw ShapeError("conv2d", "weight in-channels", xs.c / groups, ws.c);
  if (bias && bias->numel() != static_cast<size_t>(ws.n)) {
    throw ShapeError("conv2d", "bias length", ws.n, static_cast<long>(bias->numel()));
  }
  ConvGeom g{xs.n, xs.c, xs.h, xs.w, ws.n, ws.h, ws.w, stride, padding, groups, 0, 0, 0, 0};
  g.oh = (xs.h + 2 * padding - ws.h) / stride + 1;
  g.ow = (xs.w + 2 * padding - ws.w) / stride + 1;
  if (xs.h + 2 * padding < ws.h) throw ShapeError("conv2d", "H", ws.h, xs.h + 2 * padding);
  if (xs.w + 2 * padding < ws.w) throw ShapeError("conv2d", "W", ws.w, xs.w + 2 * padding);
  g.cin_g = xs.c / groups;
  g.cout_g = ws.n / groups;

  const size_t L = g.out_plane();
  const size_t K = g.k();
  const auto X = x.data();
  const auto Wt = weight.data();
  std::vector<T> out(static_cast<size_t>(g.n) * g.cout * L, T(0));
  std::vector<T> col;
  if (!g.pointwise() && !g.depthwise()) col.resize(K * L);

  for (int n = 0; n < g.n; ++n) {
    for (int gi = 0; gi < groups; ++gi) {
      const T* xg = X.data() + (static_cast<size_t>(n) * g.cin + static_cast<size_t>(gi) * g.cin_g) * g.in_plane();
      T* yg = out.data() + (static_cast<size_t>(n) * g.cout + static_cast<size_t>(gi) * g.cout_g) * L;
      const T* wg = Wt.data() + static_cast<size_t>(gi) * g.cout_g * K;
      if (g.depthwise()) {
        depthwise_forward(xg, wg, g, yg);
        continue;
      }
      const T* src = xg;
      if (!g.pointwise()) {
        im2col(xg, g, col.data());
        src = col.data();
      }
      MapM<T>(yg, g.cout_g, L).noalias() = CMapM<T>(wg, g.cout_g, K) * CMapM<T>(src, K, L);
      op_counters().matmul_macs += static_cast<std::uint64_t>(g.cout_g) * K * L;
    }
  }
  if (bias) {
    const auto B = bias->data();
    for (int n = 0; n < g.n; ++n)
      for (int o = 0; o < g.cout; ++o) {
        T* yo = out.data() + (static_cast<size_t>(n) * g.cout + o) * L;
        for (size_t i = 0; i < L; ++i) yo[i] += B[o];
      }
  }

  std::vector<Tensor<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return Tensor<T>::make_result(
      {g.n, g.cout, g.oh, g.ow}, std::move(out), std::move(inputs),
      [g](Node<T>& self) {
        const size_t L = g.out_plane();
        const size_t K = g.k();
        Node<T>& px = parent(self, 0);
        Node<T>& pw = parent(self, 1);
        const bool gx = px.requires_grad;
        const bool gw = pw.requires_grad;
        T* dx = gx ? px.ensure_grad().data() : nullptr;
        T* dw = gw ? pw.ensure_grad().data() : nullptr;
        const T* dy = self.grad.data();
        std::vector<T> col;
        std::vector<T> dcol;
        if (!g.pointwise() && !g.depthwise()) {
          if (gw) col.resize(K * L);
          if (gx) dcol.resize(K * L);
        }
        for (int n = 0; n < g.n; ++n) {
          for (int gi = 0; gi < g.groups; ++gi) {
            const size_t xoff = (static_cast<size_t>(n) * g.cin + static_cast<size_t>(gi) * g.cin_g) * g.in_plane();
            const size_t yoff = (static_cast<size_t>(n) * g.cout + static_cast<size_t>(gi) * g.cout_g) * L;
            const size_t woff = static_cast<size_t>(gi) * g.cout_g * K;
            const T* xg = px.data.data() + xoff;
            const T* wg = pw.data.data() + woff;
            const T* dyg = dy + yoff;
            if (g.depthwise()) {
              depthwise_backward(xg, wg, dyg, g, dx ? dx + xoff : nullptr, dw ? dw + woff : nullptr);
              continue;
            }
            CMapM<T> DY(dyg, g.cout_g, L);
            if (g.pointwise()) {
              if (gw) MapM<T>(dw + woff, g.cout_g, K).noalias() += DY * CMapM<T>(xg, K, L).transpose();
              if (gx) MapM<T>(dx + xoff, K, L).noalias() += CMapM<T>(wg, g.cout_g, K).transpose() * DY;
            } else {
              if (gw) {
                im2col(xg, g, col.data());
                MapM<T>(dw + woff, g.cout_g, K).noalias() += DY * CMapM<T>(col.data(), K, L).transpose();
              }
              if (gx) {
                MapM<T>(dcol.data(), K, L).noalias() = CMapM<T>(wg, g.cout_g, K).transpose() * DY;
                col2im(dcol.data(), g, dx + xoff);
              }
            }
          }
        }
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
          auto& db = self.parents[2]->ensure_grad();
          for (int n = 0; n < g.n; ++n)
            for (int o = 0; o < g.cout; ++o) {
              db[o] += lane_sum(dy + (static_cast<size_t>(n) * g.cout + o) * L, L);
            }
        }
      },
      "conv2d");
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  const Shape s = x.shape();
  if (s.c == 0) throw ShapeError("layer_norm", "C", 1, 0);
  if (gain.numel() != static_cast<size_t>(s.c)) throw ShapeError("layer_norm", "gain length", s.c, static_cast<long>(gain.numel()));
  if (bias.numel() != static_cast<size_t>(s.c)) throw ShapeError("layer_norm", "bias length", s.c, static_cast<long>(bias.numel()));
  const size_t L = s.plane();
  const auto X = x.data();
  const auto G = gain.data();
  const auto B = bias.data();
  std::vector<T> xhat(X.size());
  std::vector<T> rstd(static_cast<size_t>(s.n) * L);
  std::vector<T> out(X.size());
  std::vector<T> mu(L);
  std::vector<T> var(L);
  const T inv_c = T(1) / static_cast<T>(s.c);
  for (int n = 0; n < s.n; ++n) {
    const T* xn = X.data() + static_cast<size_t>(n) * s.c * L;
    std::fill(mu.begin(), mu.end(), T(0));
    std::fill(var.begin(), var.end(), T(0));
    for (int c = 0; c < s.c; ++c)
      for (size_t p = 0; p < L; ++p) mu[p] += xn[c * L + p];
    for (size_t p = 0; p < L; ++p) mu[p] *= inv_c;
    for (int c = 0; c < s.c; ++c)
      for (size_t p = 0; p < L; ++p) {
        const T d = xn[c * L + p] - mu[p];
        var[p] += d * d;
      }
    T* rs = rstd.data() + static_cast<size_t>(n) * L;
    for (size_t p = 0; p < L; ++p) rs[p] = T(1) / std::sqrt(var[p] * inv_c + eps);
    for (int c = 0; c < s.c; ++c) {
      const size_t off = (static_cast<size_t>(n) * s.c + c) * L;
      for (size_t p = 0; p < L; ++p) {
        const T xh = (xn[c * L + p] - mu[p]) * rs[p];
        xhat[off + p] = xh;
        out[off + p] = xh * G[c] + B[c];
      }
    }
  }
  return Tensor<T>::make_result(
      s, std::move(out), {x, gain, bias},
      [s, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
        const size_t L = s.plane();
        const T inv_c = T(1) / static_cast<T>(s.c);
        const auto& dy = self.grad;
        Node<T>& px = parent(self, 0);
        Node<T>& pg = parent(self, 1);
        Node<T>& pb = parent(self, 2);
        const auto& G = pg.data;
        if (pg.requires_grad || pb.requires_grad) {
          std::vector<T> dg(s.c, T(0)), db(s.c, T(0));
          for (int n = 0; n < s.n; ++n)
            for (int c = 0; c < s.c; ++c) {
              const size_t off = (static_cast<size_t>(n) * s.c + c) * L;
              dg[c] += lane_dot(dy.data() + off, xhat.data() + off, L);
              db[c] += lane_sum(dy.data() + off, L);
            }
          if (pg.requires_grad) {
            auto& g = pg.ensure_grad();
            for (int c = 0; c < s.c; ++c) g[c] += dg[c];
          }
          if (pb.requires_grad) {
            auto& g = pb.ensure_grad();
            for (int c = 0; c < s.c; ++c) g[c] += db[c];
          }
        }
        if (!px.requires_grad) return;
        auto& dx = px.ensure_grad();
        std::vector<T> m1(L), m2(L);
        for (int n = 0; n < s.n; ++n) {
          std::fill(m1.begin(), m1.end(), T(0));
          std::fill(m2.begin(), m2.end(), T(0));
          for (int c = 0; c < s.c; ++c) {
            const size_t off = (static_cast<size_t>(n) * s.c + c) * L;
            for (size_t p = 0; p < L; ++p) {
              const T dxh = dy[off + p] * G[c];
              m1[p] += dxh;
              m2[p] += dxh * xhat[off + p];
            }
          }
          const T* rs = rstd.data() + static_cast<size_t>(n) * L;
          for (int c = 0; c < s.c; ++c) {
            const size_t off = (static_cast<size_t>(n) * s.c + c) * L;
            for (size_t p = 0; p < L; ++p) {
              const T dxh = dy[off + p] * G[c];
              dx[off + p] += rs[p] * (dxh - m1[p] * inv_c - xhat[off + p] * m2[p] * inv_c);
            }
          }
        }
      },
      "layer_norm");
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  if (axis < 0 || axis > 3) throw ShapeError("softmax", "axis", 3, axis);
  const auto d = dims(x.shape());
  size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= d[i];
  for (int i = axis + 1; i < 4; ++i) inner *= d[i];
  const size_t len = d[axis];
  const auto X = x.data();
  std::vector<T> out(X.size());
  for (size_t o = 0; o < outer; ++o)
    for (size_t i = 0; i < inner; ++i) {
      const size_t base = o * len * inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (size_t k = 0; k < len; ++k) mx = std::max(mx, X[base + k * inner]);
      T z = 0;
      for (size_t k = 0; k < len; ++k) {
        const T e = std::exp(X[base + k * inner] - mx);
        out[base + k * inner] = e;
        z += e;
      }
      for (size_t k = 0; k < len; ++k) out[base + k * inner] /= z;
    }
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x},
      [outer, inner, len](Node<T>& self) {
        auto& gx = parent(self, 0).ensure_grad();
        const auto& y = self.data;
        const auto& g = self.grad;
        for (size_t o = 0; o < outer; ++o)
          for (size_t i = 0; i < inner; ++i) {
            const size_t base = o * len * inner + i;
            T dot = 0;
            for (size_t k = 0; k < len; ++k) dot += g[base + k * inner] * y[base + k * inner];
            for (size_t k = 0; k < len; ++k) {
              const size_t j = base + k * inner;
              gx[j] += y[j] * (g[j] - dot);
            }
          }
      },
      "softmax");
}

template <typename T>
Tensor<T> pixel_resample(const Tensor<T>& x, int r, Resample direction) {
  const Shape s = x.shape();
  if (r < 1) throw ShapeError("pixel_resample", "factor", 1, r);
  if (direction == Resample::unshuffle) {
    if (s.h % r != 0) throw ShapeError("pixel_unshuffle", "H not divisible by factor " + std::to_string(r));
    if (s.w % r != 0) throw ShapeError("pixel_unshuffle", "W not divisible by factor " + std::to_string(r));
    const Shape o{s.n, s.c * r * r, s.h / r, s.w / r};
    std::vector<size_t> idx(o.numel());
    size_t i = 0;
    for (int n = 0; n < o.n; ++n)
      for (int c = 0; c < o.c; ++c) {
        const int ci = c / (r * r), dy = (c / r) % r, dx = c % r;
        for (int y = 0; y < o.h; ++y)
          for (int xx = 0; xx < o.w; ++xx)
            idx[i++] = ((static_cast<size_t>(n) * s.c + ci) * s.h + (y * r + dy)) * s.w + (xx * r + dx);
      }
    return gather(x, o, std::move(idx), "pixel_unshuffle");
  }
  if (s.c % (r * r) != 0) throw ShapeError("pixel_shuffle", "C not divisible by factor^2 = " + std::to_string(r * r));
  const Shape o{s.n, s.c / (r * r), s.h * r, s.w * r};
  std::vector<size_t> idx(o.numel());
  size_t i = 0;
  for (int n = 0; n < o.n; ++n)
    for (int c = 0; c < o.c; ++c)
      for (int y = 0; y < o.h; ++y)
        for (int xx = 0; xx < o.w; ++xx) {
          const int ci = c * r * r + (y % r) * r + (xx % r);
          idx[i++] = ((static_cast<size_t>(n) * s.c + ci) * s.h + y / r) * s.w + xx / r;
        }
  return gather(x, o, std::move(idx), "pixel_shuffle");
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels", "no inputs");
  const Shape s0 = parts[0].shape();
  int total = 0;
  for (const auto& p : parts) {
    const Shape s = p.shape();
    if (s.n != s0.n) throw ShapeError("concat_channels", "N", s0.n, s.n);
    if (s.h != s0.h) throw ShapeError("concat_channels", "H", s0.h, s.h);
    if (s.w != s0.w) throw ShapeError("concat_channels", "W", s0.w, s.w);
    total += s.c;
  }
  const Shape o{s0.n, total, s0.h, s0.w};
  const size_t L = o.plane();
  std::vector<T> out(o.numel());
  std::vector<int> channels;
  for (int n = 0; n < o.n; ++n) {
    T* dst = out.data() + static_cast<size_t>(n) * total * L;
    for (const auto& p : parts) {
      const size_t chunk = static_cast<size_t>(p.shape().c) * L;
      std::copy_n(p.data().data() + n * chunk, chunk, dst);
      dst += chunk;
    }
  }
  for (const auto& p : parts) channels.push_back(p.shape().c);
  return Tensor<T>::make_result(
      o, std::move(out), parts,
      [channels, o](Node<T>& self) {
        const size_t L = o.plane();
        for (int n = 0; n < o.n; ++n) {
          const T* src = self.grad.data() + static_cast<size_t>(n) * o.c * L;
          for (size_t k = 0; k < channels.size(); ++k) {
            const size_t chunk = static_cast<size_t>(channels[k]) * L;
            Node<T>& pk = parent(self, k);
            if (pk.requires_grad) {
              T* dst = pk.ensure_grad().data() + n * chunk;
              for (size_t i = 0; i < chunk; ++i) dst[i] += src[i];
            }
            src += chunk;
          }
        }
      },
      "concat_channels");
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int begin, int count) {
  const Shape s = x.shape();
  if (begin < 0 || count < 0 || begin + count > s.c) {
    throw ShapeError("slice_channels", "C", s.c, begin + count);
  }
  const Shape o{s.n, count, s.h, s.w};
  const size_t block = static_cast<size_t>(count) * s.plane();
  const size_t stride = static_cast<size_t>(s.c) * s.plane();
  const size_t offset = static_cast<size_t>(begin) * s.plane();
  const auto X = x.data();
  std::vector<T> out(o.numel());
  for (int n = 0; n < s.n; ++n) std::copy_n(X.data() + n * stride + offset, block, out.data() + n * block);
  return Tensor<T>::make_result(
      o, std::move(out), {x},
      [n = s.n, block, stride, offset](Node<T>& self) {
        T* gx = parent(self, 0).ensure_grad().data();
        const T* g = self.grad.data();
        for (int b = 0; b < n; ++b) {
          T* dst = gx + b * stride + offset;
          const T* src = g + b * block;
          for (size_t i = 0; i < block; ++i) dst[i] += src[i];
        }
      },
      "slice_channels");
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape.numel() != x.numel()) {
    throw ShapeError("reshape", "numel", static_cast<long>(x.numel()), static_cast<long>(shape.numel()));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return Tensor<T>::make_result(
      shape, std::move(out), {x},
      [](Node<T>& self) {
        auto& gx = parent(self, 0).ensure_grad();
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
      },
      "reshape");
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_a, bool transpose_b) {
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  if (sa.n != sb.n) throw ShapeError("bmm", "N", sa.n, sb.n);
  if (sa.c != sb.c) throw ShapeError("bmm", "C", sa.c, sb.c);
  const int m = transpose_a ? sa.w : sa.h;
  const int k = transpose_a ? sa.h : sa.w;
  const int kb = transpose_b ? sb.w : sb.h;
  const int p = transpose_b ? sb.h : sb.w;
  if (k != kb) throw ShapeError("bmm", "inner", k, kb);
  const Shape o{sa.n, sa.c, m, p};
  std::vector<T> out(o.numel());
  const size_t planes = static_cast<size_t>(sa.n) * sa.c;
  for (size_t i = 0; i < planes; ++i) {
    CMapM<T> A(a.data().data() + i * sa.plane(), sa.h, sa.w);
    CMapM<T> B(b.data().data() + i * sb.plane(), sb.h, sb.w);
    MapM<T> C(out.data() + i * o.plane(), m, p);
    if (!transpose_a && !transpose_b) C.noalias() = A * B;
    else if (transpose_a && !transpose_b) C.noalias() = A.transpose() * B;
    else if (!transpose_a && transpose_b) C.noalias() = A * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
  }
  op_counters().matmul_macs += static_cast<std::uint64_t>(planes) * m * k * p;
  return Tensor<T>::make_result(
      o, std::move(out), {a, b},
      [sa, sb, o, transpose_a, transpose_b, planes](Node<T>& self) {
        Node<T>& pa = parent(self, 0);
        Node<T>& pb = parent(self, 1);
        for (size_t i = 0; i < planes; ++i) {
          CMapM<T> A(pa.data.data() + i * sa.plane(), sa.h, sa.w);
          CMapM<T> B(pb.data.data() + i * sb.plane(), sb.h, sb.w);
          CMapM<T> G(self.grad.data() + i * o.plane(), o.h, o.w);
          if (pa.requires_grad) {
            MapM<T> GA(pa.ensure_grad().data() + i * sa.plane(), sa.h, sa.w);
            // d op(A) = G op(B)^T
            if (!transpose_a && !transpose_b) GA.noalias() += G * B.transpose();
            else if (!transpose_a && transpose_b) GA.noalias() += G * B;
            else if (transpose_a && !transpose_b) GA.noalias() += B * G.transpose();
            else GA.noalias() += B.transpose() * G.transpose();
          }
          if (pb.requires_grad) {
            MapM<T> GB(pb.ensure_grad().data() + i * sb.plane(), sb.h, sb.w);
            // d op(B) = op(A)^T G
            if (!transpose_a && !transpose_b) GB.noalias() += A.transpose() * G;
            else if (transpose_a && !transpose_b) GB.noalias() += A * G;
            else if (!transpose_a && transpose_b) GB.noalias() += G.transpose() * A;
            else GB.noalias() += G.transpose() * A.transpose();
          }
        }
      },
      "bmm");
}

#define SAIG_INSTANTIATE_OPS(T)                                                                     \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> scale(const Tensor<T>&, T);                                                    \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                               \
  template Tensor<T> abs(const Tensor<T>&);                                                         \
  template Tensor<T> reciprocal(const Tensor<T>&);                                                  \
  template Tensor<T> sum(const Tensor<T>&);                                                         \
  template Tensor<T> mean(const Tensor<T>&);                                                        \
  template Tensor<T> activation(const Tensor<T>&, Activation);                                      \
  template Tensor<T> dual_gate(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const std::optional<Tensor<T>>&,    \
                            int, int, int);                                                         \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);           \
  template Tensor<T> softmax(const Tensor<T>&, int);                                                \
  template Tensor<T> pixel_resample(const Tensor<T>&, int, Resample);                               \
  template Tensor<T> concat_channels(const std::vector<Tensor<T>>&);                                \
  template Tensor<T> slice_channels(const Tensor<T>&, int, int);                                    \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                              \
  template Tensor<T> bmm(const Tensor<T>&, const Tensor<T>&, bool, bool);

SAIG_INSTANTIATE_OPS(float)
SAIG_INSTANTIATE_OPS(double)

}  // namespace saig::ops
