#include "saigformer/sai2e.hpp"

#include <algorithm>
#include <cmath>

#include "saigformer/sat.hpp"

namespace saig::sai2e {

namespace {

template <typename T>
Tensor<T> subnet(const Tensor<T>& image, const SubNetWeights<T>& w) {
  if (image.shape().c != 3) throw ShapeError("sai2e", "image channels", 3, image.shape().c);
  auto hidden = ops::gelu(ops::conv2d(image, w.conv3_w, std::optional{w.conv3_b}, 1, 1));
  return ops::conv2d(hidden, w.conv1_w, std::optional{w.conv1_b});
}

struct Window {
  double x0, y0, x1, y1, area;
};

// Channel order of extents / offsets.
enum { kTop = 0, kLeft = 1, kBottom = 2, kRight = 3 };

inline Window window_at(double t, double l, double b, double r, int y, int x) {
  const double xc = x + 0.5;
  const double yc = y + 0.5;
  return {xc - l, yc - t, xc + r, yc + b, (t + b) * (l + r)};
}

}  // namespace

template <typename T>
Tensor<T> predict_offsets(const Tensor<T>& image, const SubNetWeights<T>& w) {
  auto out = ops::sigmoid(subnet(image, w));
  if (out.shape().c != 4) throw ShapeError("predict_offsets", "output channels", 4, out.shape().c);
  return out;
}

template <typename T>
Tensor<T> predict_modulation(const Tensor<T>& image, const SubNetWeights<T>& w) {
  auto out = ops::add_scalar(ops::softplus(subnet(image, w)), static_cast<T>(kModulationEps));
  if (out.shape().c != 3) throw ShapeError("predict_modulation", "output channels", 3, out.shape().c);
  return out;
}

template <typename T>
Tensor<T> offsets_to_extents(const Tensor<T>& offsets, int height, int width) {
  if (offsets.shape().c != 4) throw ShapeError("offsets_to_extents", "C", 4, offsets.shape().c);
  const T hh = static_cast<T>(height) / T(2);
  const T hw = static_cast<T>(width) / T(2);
  auto factors = Tensor<T>::from({1, 4, 1, 1}, {hh, hw, hh, hw});
  return ops::mul(offsets, factors);
}

template <typename T>
Tensor<T> avgpool_extents(int batch, int height, int width) {
  std::vector<T> e(static_cast<size_t>(batch) * 4 * height * width);
  const size_t L = static_cast<size_t>(height) * width;
  for (int n = 0; n < batch; ++n)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const size_t base = static_cast<size_t>(n) * 4 * L + static_cast<size_t>(y) * width + x;
        // Window [2*floor(x/2), +2) seen from the pixel centre x + 0.5.
        const bool odd_y = (y % 2) == 1;
        const bool odd_x = (x % 2) == 1;
        e[base + kTop * L] = odd_y ? T(1.5) : T(0.5);
        e[base + kBottom * L] = odd_y ? T(0.5) : T(1.5);
        e[base + kLeft * L] = odd_x ? T(1.5) : T(0.5);
        e[base + kRight * L] = odd_x ? T(0.5) : T(1.5);
      }
  return Tensor<T>::from({batch, 4, height, width}, std::move(e));
}

template <typename T>
Tensor<T> dynamic_box_mean(const Tensor<T>& image, const Tensor<T>& extents) {
  const Shape is = image.shape();
  const Shape es = extents.shape();
  if (es.c != 4) throw ShapeError("dynamic_box_mean", "extent channels", 4, es.c);
  if (es.n != is.n) throw ShapeError("dynamic_box_mean", "N", is.n, es.n);
  if (es.h != is.h) throw ShapeError("dynamic_box_mean", "H", is.h, es.h);
  if (es.w != is.w) throw ShapeError("dynamic_box_mean", "W", is.w, es.w);
  const int H = is.h;
  const int W = is.w;
  const size_t L = is.plane();
  const auto img = image.data();
  const auto ext = extents.data();

  std::vector<sat::SummedAreaTable> tables;
  tables.reserve(static_cast<size_t>(is.n) * is.c);
  std::vector<T> out(is.numel());
  for (int n = 0; n < is.n; ++n) {
    const T* e = ext.data() + static_cast<size_t>(n) * 4 * L;
    for (int c = 0; c < is.c; ++c) {
      const size_t off = (static_cast<size_t>(n) * is.c + c) * L;
      tables.push_back(sat::SummedAreaTable::build(img.subspan(off, L), H, W));
      const auto& table = tables.back();
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const size_t p = static_cast<size_t>(y) * W + x;
          const Window win = window_at(e[kTop * L + p], e[kLeft * L + p], e[kBottom * L + p],
                                       e[kRight * L + p], y, x);
          const double s = sat::box_sum_fractional(table, {win.x0, win.y0, win.x1, win.y1});
          out[off + p] = static_cast<T>(s / win.area);
        }
    }
  }

  return Tensor<T>::make_result(
      is, std::move(out), {image, extents},
      [is, tables = std::move(tables)](detail::Node<T>& self) {
        const int H = is.h;
        const int W = is.w;
        const size_t L = is.plane();
        auto& pimg = *self.parents[0];
        auto& pext = *self.parents[1];
        const auto& ext = pext.data;
        T* dext = pext.requires_grad ? pext.ensure_grad().data() : nullptr;
        T* dimg = pimg.requires_grad ? pimg.ensure_grad().data() : nullptr;
        const size_t stride = static_cast<size_t>(W) + 1;
        std::vector<double> dtable;
        for (int n = 0; n < is.n; ++n) {
          const T* e = ext.data() + static_cast<size_t>(n) * 4 * L;
          T* de = dext ? dext + static_cast<size_t>(n) * 4 * L : nullptr;
          for (int c = 0; c < is.c; ++c) {
            const size_t off = (static_cast<size_t>(n) * is.c + c) * L;
            const auto& table = tables[static_cast<size_t>(n) * is.c + c];
            if (dimg) dtable.assign((static_cast<size_t>(H) + 1) * stride, 0.0);
            for (int y = 0; y < H; ++y)
              for (int x = 0; x < W; ++x) {
                const size_t p = static_cast<size_t>(y) * W + x;
                const double g = static_cast<double>(self.grad[off + p]);
                if (g == 0.0) continue;
                const double t = e[kTop * L + p], l = e[kLeft * L + p];
                const double b = e[kBottom * L + p], r = e[kRight * L + p];
                const Window win = window_at(t, l, b, r, y, x);
                if (de) {
                  sat::CornerGradient cg;
                  const double s = sat::box_sum_fractional(table, {win.x0, win.y0, win.x1, win.y1}, &cg);
                  const double inv_a = 1.0 / win.area;
                  const double mean = s * inv_a;
                  // x0 = xc - l, x1 = xc + r, y0 = yc - t, y1 = yc + b.
                  de[kTop * L + p] += static_cast<T>(g * (-cg.dy0 * inv_a - mean * (l + r) * inv_a));
                  de[kBottom * L + p] += static_cast<T>(g * (cg.dy1 * inv_a - mean * (l + r) * inv_a));
                  de[kLeft * L + p] += static_cast<T>(g * (-cg.dx0 * inv_a - mean * (t + b) * inv_a));
                  de[kRight * L + p] += static_cast<T>(g * (cg.dx1 * inv_a - mean * (t + b) * inv_a));
                }
                if (dimg) {
                  const double scale = g / win.area;
                  auto scatter = [&](double cx, double cy, double sign) {
                    const auto st = sat::stencil(W, H, cx, cy);
                    double* row0 = dtable.data() + static_cast<size_t>(st.iy) * stride + st.ix;
                    double* row1 = row0 + stride;
                    const double v = sign * scale;
                    row0[0] += v * (1.0 - st.fy) * (1.0 - st.fx);
                    row0[1] += v * (1.0 - st.fy) * st.fx;
                    row1[0] += v * st.fy * (1.0 - st.fx);
                    row1[1] += v * st.fy * st.fx;
                  };
                  scatter(win.x1, win.y1, 1.0);
                  scatter(win.x0, win.y0, 1.0);
                  scatter(win.x1, win.y0, -1.0);
                  scatter(win.x0, win.y1, -1.0);
                }
              }
            if (dimg) {
              // table(Y, X) sums pixels y < Y, x < X, so pixel (y, x) receives
              // the suffix sum of dtable over Y > y, X > x.
              std::vector<double> acc(stride, 0.0);
              for (int y = H - 1; y >= 0; --y) {
                const double* drow = dtable.data() + static_cast<size_t>(y + 1) * stride;
                double run = 0.0;
                for (int x = W - 1; x >= 0; --x) {
                  run += drow[x + 1];
                  acc[x] += run;
                  dimg[off + static_cast<size_t>(y) * W + x] += static_cast<T>(acc[x]);
                }
              }
            }
          }
        }
      },
      "dynamic_box_mean");
}

template <typename T>
Estimate<T> estimate_illumination(const Tensor<T>& image, const EstimatorWeights<T>& w, Variant variant) {
  const Shape s = image.shape();
  if (s.c != 3) throw ShapeError("estimate_illumination", "C", 3, s.c);
  op_counters().illumination_estimates += 1;
  Estimate<T> est;
  if (variant == Variant::avgpool2x2) {
    est.extents = avgpool_extents<T>(s.n, s.h, s.w);
  } else {
    est.offsets = predict_offsets(image, w.offset);
    est.extents = offsets_to_extents(est.offsets, s.h, s.w);
  }
  est.box_mean = dynamic_box_mean(image, est.extents);
  if (variant == Variant::adaptive) {
    est.modulation = predict_modulation(image, w.modulation);
    est.illumination = ops::div(est.box_mean, est.modulation);
  } else {
    est.illumination = est.box_mean;
  }
  return est;
}

template <typename T>
Tensor<T> downsample_illumination(const Tensor<T>& level, const DownsamplerWeights<T>& w) {
  const Shape s = level.shape();
  if (s.h % 2 != 0) throw ShapeError("downsample_illumination", "H must be even, got " + std::to_string(s.h));
  if (s.w % 2 != 0) throw ShapeError("downsample_illumination", "W must be even, got " + std::to_string(s.w));
  op_counters().illumination_downsamples += 1;
  auto dw = ops::conv2d(level, w.dw_w, std::optional{w.dw_b}, 2, 1, s.c);
  return ops::conv2d(dw, w.pw_w, std::optional{w.pw_b});
}

// ---------------------------------------------------------------------------

template <typename T>
CornerField corner_field(const Tensor<T>& offsets, int crop_h, int crop_w) {
  const Shape s = offsets.shape();
  if (s.c != 4) throw ShapeError("corner_field", "C", 4, s.c);
  if (crop_h <= 0 || crop_w <= 0) throw ValueError("corner_field: crop dimensions must be positive");
  if (crop_h > s.h || crop_w > s.w) throw ValueError("corner_field: crop larger than the offset map");
  const size_t L = s.plane();
  const double hh = crop_h / 2.0;
  const double hw = crop_w / 2.0;
  const auto o = offsets.data();
  CornerField field;
  field.batch = s.n;
  field.height = s.h;
  field.width = s.w;
  field.windows.resize(static_cast<size_t>(s.n) * L);
  for (int n = 0; n < s.n; ++n)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        const size_t p = static_cast<size_t>(y) * s.w + x;
        const T* e = o.data() + static_cast<size_t>(n) * 4 * L + p;
        const double t = e[kTop * L] * hh, l = e[kLeft * L] * hw;
        const double b = e[kBottom * L] * hh, r = e[kRight * L] * hw;
        const Window win = window_at(t, l, b, r, y, x);
        const double x0 = std::clamp(win.x0, 0.0, double(s.w));
        const double x1 = std::clamp(win.x1, 0.0, double(s.w));
        const double y0 = std::clamp(win.y0, 0.0, double(s.h));
        const double y1 = std::clamp(win.y1, 0.0, double(s.h));
        PixelWindow& pw = field.windows[static_cast<size_t>(n) * L + p];
        pw.tl = {x0, y0};
        pw.tr = {x1, y0};
        pw.bl = {x0, y1};
        pw.br = {x1, y1};
        pw.area = (double(e[kTop * L]) + e[kBottom * L]) * (double(e[kLeft * L]) + e[kRight * L]) *
                  (double(crop_h) * crop_w) / 4.0;
      }
  return field;
}

template <typename T>
std::vector<double> integration_area_map(const Tensor<T>& offsets, int crop_h, int crop_w, int n) {
  const auto field = corner_field(offsets, crop_h, crop_w);
  if (n < 0 || n >= field.batch) throw ValueError("integration_area_map: batch index out of range");
  std::vector<double> area(static_cast<size_t>(field.height) * field.width);
  for (int y = 0; y < field.height; ++y)
    for (int x = 0; x < field.width; ++x) area[static_cast<size_t>(y) * field.width + x] = field.at(n, y, x).area;
  return area;
}

std::vector<double> minmax_normalize(const std::vector<double>& values) {
  std::vector<double> out(values.size(), 0.5);
  if (values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double range = *hi - *lo;
  if (!(range > 0.0)) return out;
  for (size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - *lo) / range;
  return out;
}

template <typename T>
OffsetStats offset_stats(const Tensor<T>& offsets, int crop_h, int crop_w) {
  const Shape s = offsets.shape();
  if (s.c != 4) throw ShapeError("offset_stats", "C", 4, s.c);
  const size_t L = s.plane();
  const auto o = offsets.data();
  const size_t count = static_cast<size_t>(s.n) * L;
  if (count == 0) return {};
  double sw = 0, sh = 0;
  for (int n = 0; n < s.n; ++n)
    for (size_t p = 0; p < L; ++p) {
      const T* e = o.data() + static_cast<size_t>(n) * 4 * L + p;
      sw += (double(e[kLeft * L]) + e[kRight * L]) * crop_w / 2.0;
      sh += (double(e[kTop * L]) + e[kBottom * L]) * crop_h / 2.0;
    }
  OffsetStats st;
  st.mean_w = sw / count;
  st.mean_h = sh / count;
  double vw = 0, vh = 0;
  for (int n = 0; n < s.n; ++n)
    for (size_t p = 0; p < L; ++p) {
      const T* e = o.data() + static_cast<size_t>(n) * 4 * L + p;
      const double dw = (double(e[kLeft * L]) + e[kRight * L]) * crop_w / 2.0 - st.mean_w;
      const double dh = (double(e[kTop * L]) + e[kBottom * L]) * crop_h / 2.0 - st.mean_h;
      vw += dw * dw;
      vh += dh * dh;
    }
  st.std_w = std::sqrt(vw / count);
  st.std_h = std::sqrt(vh / count);
  return st;
}

#define SAIG_INSTANTIATE_SAI2E(T)                                                                  \
  template Tensor<T> predict_offsets(const Tensor<T>&, const SubNetWeights<T>&);                   \
  template Tensor<T> predict_modulation(const Tensor<T>&, const SubNetWeights<T>&);                \
  template Tensor<T> offsets_to_extents(const Tensor<T>&, int, int);                               \
  template Tensor<T> avgpool_extents<T>(int, int, int);                                            \
  template Tensor<T> dynamic_box_mean(const Tensor<T>&, const Tensor<T>&);                         \
  template Estimate<T> estimate_illumination(const Tensor<T>&, const EstimatorWeights<T>&, Variant); \
  template Tensor<T> downsample_illumination(const Tensor<T>&, const DownsamplerWeights<T>&);      \
  template CornerField corner_field(const Tensor<T>&, int, int);                                   \
  template std::vector<double> integration_area_map(const Tensor<T>&, int, int, int);              \
  template OffsetStats offset_stats(const Tensor<T>&, int, int);

SAIG_INSTANTIATE_SAI2E(float)
SAIG_INSTANTIATE_SAI2E(double)

}  // namespace saig::sai2e
