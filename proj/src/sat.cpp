#include "saigformer/sat.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <string>

#include "saigformer/error.hpp"
#include "saigformer/tensor.hpp"

namespace saig::sat {

template <typename T>
SummedAreaTable SummedAreaTable::build(std::span<const T> channel, int height, int width) {
  if (height < 1 || width < 1) {
    throw ValueError("sat::build: empty image " + std::to_string(height) + "x" + std::to_string(width));
  }
  if (channel.size() != static_cast<size_t>(height) * width) {
    throw ShapeError("sat::build", "pixels", static_cast<long>(height) * width,
                     static_cast<long>(channel.size()));
  }
  SummedAreaTable sat;
  sat.width_ = width;
  sat.height_ = height;
  const size_t stride = sat.stride();
  sat.table_.assign((static_cast<size_t>(height) + 1) * stride, 0.0);
  std::uint64_t hash = 1469598103934665603ull;
  for (int y = 0; y < height; ++y) {
    double row = 0.0;
    const T* src = channel.data() + static_cast<size_t>(y) * width;
    const double* above = sat.table_.data() + static_cast<size_t>(y) * stride;
    double* dst = sat.table_.data() + static_cast<size_t>(y + 1) * stride;
    for (int x = 0; x < width; ++x) {
      const double v = static_cast<double>(src[x]);
      if (!std::isfinite(v)) throw ValueError("sat::build: non-finite pixel value");
      row += v;
      dst[x + 1] = above[x + 1] + row;
      hash = (hash ^ std::bit_cast<std::uint64_t>(v)) * 1099511628211ull;
    }
  }
  sat.checksum_ = hash;
  return sat;
}

template SummedAreaTable SummedAreaTable::build<float>(std::span<const float>, int, int);
template SummedAreaTable SummedAreaTable::build<double>(std::span<const double>, int, int);

namespace {

int checked_index(double v, int limit, const char* axis) {
  if (!(v >= 0.0) || v > limit || std::floor(v) != v) {
    throw ValueError(std::string("sat::box_sum: corner ") + axis + " = " + std::to_string(v) +
                     " is not an integer in [0, " + std::to_string(limit) + "]");
  }
  return static_cast<int>(v);
}

}  // namespace

double box_sum(const SummedAreaTable& sat, const BoxQuery& q) {
  const int x0 = checked_index(q.x0, sat.width(), "x0");
  const int x1 = checked_index(q.x1, sat.width(), "x1");
  const int y0 = checked_index(q.y0, sat.height(), "y0");
  const int y1 = checked_index(q.y1, sat.height(), "y1");
  if (x0 > x1 || y0 > y1) throw ValueError("sat::box_sum: corners out of order");
  auto& counters = op_counters();
  counters.sat_reads += 4;
  counters.sat_queries += 1;
  return (sat.at(y1, x1) + sat.at(y0, x0)) - sat.at(y0, x1) - sat.at(y1, x0);
}

Stencil stencil(int width, int height, double x, double y) {
  x = std::clamp(x, 0.0, static_cast<double>(width));
  y = std::clamp(y, 0.0, static_cast<double>(height));
  Stencil s;
  s.ix = std::min(static_cast<int>(std::floor(x)), width - 1);
  s.iy = std::min(static_cast<int>(std::floor(y)), height - 1);
  s.fx = x - s.ix;
  s.fy = y - s.iy;
  return s;
}

double interpolate(const SummedAreaTable& sat, double x, double y, double* dx, double* dy) {
  const int W = sat.width();
  const int H = sat.height();
  const bool x_free = x > 0.0 && x < W;
  const bool y_free = y > 0.0 && y < H;
  const auto [ix, iy, fx, fy] = stencil(W, H, x, y);
  const double s00 = sat.at(iy, ix);
  const double s01 = sat.at(iy, ix + 1);
  const double s10 = sat.at(iy + 1, ix);
  const double s11 = sat.at(iy + 1, ix + 1);
  op_counters().sat_reads += 4;
  if (dx) *dx = x_free ? (1.0 - fy) * (s01 - s00) + fy * (s11 - s10) : 0.0;
  if (dy) *dy = y_free ? (1.0 - fx) * (s10 - s00) + fx * (s11 - s01) : 0.0;
  return (1.0 - fy) * ((1.0 - fx) * s00 + fx * s01) + fy * ((1.0 - fx) * s10 + fx * s11);
}

double box_sum_fractional(const SummedAreaTable& sat, const BoxQuery& q, CornerGradient* grad) {
  if (std::isnan(q.x0) || std::isnan(q.x1) || std::isnan(q.y0) || std::isnan(q.y1)) {
    throw ValueError("sat::box_sum_fractional: NaN corner");
  }
  if (q.x0 > q.x1 || q.y0 > q.y1) throw ValueError("sat::box_sum_fractional: corners out of order");
  op_counters().sat_queries += 1;
  if (!grad) {
    return (interpolate(sat, q.x1, q.y1) + interpolate(sat, q.x0, q.y0)) -
           interpolate(sat, q.x1, q.y0) - interpolate(sat, q.x0, q.y1);
  }
  double br_x, br_y, tl_x, tl_y, tr_x, tr_y, bl_x, bl_y;
  const double br = interpolate(sat, q.x1, q.y1, &br_x, &br_y);
  const double tl = interpolate(sat, q.x0, q.y0, &tl_x, &tl_y);
  const double tr = interpolate(sat, q.x1, q.y0, &tr_x, &tr_y);
  const double bl = interpolate(sat, q.x0, q.y1, &bl_x, &bl_y);
  grad->dx0 = tl_x - bl_x;
  grad->dx1 = br_x - tr_x;
  grad->dy0 = tl_y - tr_y;
  grad->dy1 = br_y - bl_y;
  return (br + tl) - tr - bl;
}

}  // namespace saig::sat
