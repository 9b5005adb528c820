#pragma once

// Random inputs and brute-force reference implementations shared by the
// test suites. Nothing here calls into the library's numerics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "saigformer/tensor.hpp"

namespace testing {

inline double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

template <typename T = double>
saig::Tensor<T> random_tensor(saig::Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::vector<T> v(s.numel());
  for (auto& x : v) x = static_cast<T>(lo + (hi - lo) * unit(rng));
  return saig::Tensor<T>::from(s, std::move(v));
}

inline std::vector<double> to_vec(const saig::Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Scratch directory removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path = std::filesystem::temp_directory_path() / ("saig_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

namespace oracle {

// Sum of img[y][x] over y0 <= y < y1, x0 <= x < x1 by direct iteration.
template <typename Int>
std::int64_t box_sum(const std::vector<Int>& img, int W, int y0, int x0, int y1, int x1) {
  std::int64_t s = 0;
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) s += static_cast<std::int64_t>(img[static_cast<size_t>(y) * W + x]);
  return s;
}

// Integral of the piecewise-constant image over a real box by point-sampling
// every pixel at k x k sub-cell centres. Exact when the box corners lie on the
// 1/k lattice.
inline double supersampled_box(const std::vector<double>& img, int H, int W, double x0, double y0, double x1,
                               double y1, int k = 16) {
  const double cell = 1.0 / k;
  double s = 0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      int hits = 0;
      for (int sy = 0; sy < k; ++sy) {
        const double py = y + (sy + 0.5) * cell;
        if (py < y0 || py >= y1) continue;
        for (int sx = 0; sx < k; ++sx) {
          const double px = x + (sx + 0.5) * cell;
          if (px >= x0 && px < x1) ++hits;
        }
      }
      s += img[static_cast<size_t>(y) * W + x] * hits * cell * cell;
    }
  return s;
}

// Exact integral from per-axis interval overlaps.
inline double exact_box(const std::vector<double>& img, int H, int W, double x0, double y0, double x1, double y1) {
  auto overlap = [](double a0, double a1, double b0, double b1) { return std::max(0.0, std::min(a1, b1) - std::max(a0, b0)); };
  double s = 0;
  for (int y = 0; y < H; ++y) {
    const double oy = overlap(y, y + 1, y0, y1);
    if (oy == 0) continue;
    for (int x = 0; x < W; ++x) s += img[static_cast<size_t>(y) * W + x] * oy * overlap(x, x + 1, x0, x1);
  }
  return s;
}

// Direct 2-D convolution with zero padding.
inline std::vector<double> conv2d(const std::vector<double>& x, saig::Shape xs, const std::vector<double>& w,
                                  saig::Shape ws, const std::vector<double>* bias, int stride, int pad, int groups) {
  const int oc = ws.n, icg = ws.c, kh = ws.h, kw = ws.w;
  const int oh = (xs.h + 2 * pad - kh) / stride + 1, ow = (xs.w + 2 * pad - kw) / stride + 1;
  const int ocg = oc / groups;
  std::vector<double> out(static_cast<size_t>(xs.n) * oc * oh * ow);
  for (int n = 0; n < xs.n; ++n)
    for (int o = 0; o < oc; ++o) {
      const int g = o / ocg;
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          double s = bias ? (*bias)[o] : 0.0;
          for (int ci = 0; ci < icg; ++ci)
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                const int iy = y * stride - pad + ky, ix = xx * stride - pad + kx;
                if (iy < 0 || ix < 0 || iy >= xs.h || ix >= xs.w) continue;
                const int c = g * icg + ci;
                s += w[((static_cast<size_t>(o) * icg + ci) * kh + ky) * kw + kx] *
                     x[((static_cast<size_t>(n) * xs.c + c) * xs.h + iy) * xs.w + ix];
              }
          out[((static_cast<size_t>(n) * oc + o) * oh + y) * ow + xx] = s;
        }
    }
  return out;
}

inline double gelu(double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); }
inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// SSIM written out literally: 2-D Gaussian window weights, per-window moments,
// the product formula, averaged over channels and valid positions.
inline double ssim(const std::vector<double>& x, const std::vector<double>& y, int N, int C, int H, int W,
                   int win = 11, double sigma = 1.5) {
  std::vector<double> g(win);
  double gs = 0;
  for (int i = 0; i < win; ++i) {
    const double d = i - (win - 1) / 2.0;
    g[i] = std::exp(-d * d / (2 * sigma * sigma));
    gs += g[i];
  }
  for (auto& v : g) v /= gs;
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double total = 0;
  long count = 0;
  for (int p = 0; p < N * C; ++p) {
    const double* a = x.data() + static_cast<size_t>(p) * H * W;
    const double* b = y.data() + static_cast<size_t>(p) * H * W;
    for (int i = 0; i + win <= H; ++i)
      for (int j = 0; j + win <= W; ++j) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int u = 0; u < win; ++u)
          for (int v = 0; v < win; ++v) {
            const double wt = g[u] * g[v];
            const double va = a[(i + u) * W + j + v], vb = b[(i + u) * W + j + v];
            ma += wt * va;
            mb += wt * vb;
            saa += wt * va * va;
            sbb += wt * vb * vb;
            sab += wt * va * vb;
          }
        const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
  }
  return total / count;
}

}  // namespace oracle
}  // namespace testing
