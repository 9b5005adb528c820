#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace saig::sat {

/// Zero-padded summed-area table of one image channel.
///
/// The table has (H+1) x (W+1) entries; `at(y, x)` is the sum of all source
/// pixels in rows < y and columns < x, so pixel (i, j) occupies the unit cell
/// whose top-left table corner is (i, j). Accumulation is always 64-bit.
class SummedAreaTable {
 public:
  template <typename T>
  static SummedAreaTable build(std::span<const T> channel, int height, int width);

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  double at(int y, int x) const noexcept { return table_[static_cast<size_t>(y) * stride() + x]; }
  std::span<const double> table() const noexcept { return table_; }
  size_t stride() const noexcept { return static_cast<size_t>(width_) + 1; }
  /// FNV-1a hash of the source values.
  std::uint64_t checksum() const noexcept { return checksum_; }

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<double> table_;
  std::uint64_t checksum_ = 0;
};

/// Rectangle [x0, x1) x [y0, y1) in table coordinates.
struct BoxQuery {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

/// Derivatives of a fractional box sum with respect to its corner coordinates.
struct CornerGradient {
  double dx0 = 0, dy0 = 0, dx1 = 0, dy1 = 0;
};

/// Exact sum over an integer-cornered box: four table reads.
double box_sum(const SummedAreaTable& sat, const BoxQuery& q);

/// Bilinear stencil of a table coordinate clamped to [0, W] x [0, H]: the
/// value is the (fx, fy)-weighted blend of cells (iy..iy+1, ix..ix+1).
struct Stencil {
  int ix = 0, iy = 0;
  double fx = 0, fy = 0;
};
Stencil stencil(int width, int height, double x, double y);

/// Bilinearly interpolated table value at a real table coordinate, clamped to
/// [0, W] x [0, H]. Optional partials are zero along a clamped axis.
double interpolate(const SummedAreaTable& sat, double x, double y, double* dx = nullptr,
                   double* dy = nullptr);

/// Box sum with real corners. Corners are clamped to the table domain and each
/// of the four lookups is interpolated; at integer corners the result is
/// bit-identical to box_sum.
double box_sum_fractional(const SummedAreaTable& sat, const BoxQuery& q,
                          CornerGradient* grad = nullptr);

}  // namespace saig::sat
