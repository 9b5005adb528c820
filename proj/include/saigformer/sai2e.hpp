#pragma once

#include <optional>
#include <vector>

#include "saigformer/ops.hpp"
#include "saigformer/tensor.hpp"

// Spatially-adaptive integral illumination estimation: per-pixel box filtering
// of the input image over windows predicted by a small offset network, followed
// by a learned per-pixel modulation.
namespace saig::sai2e {

/// Lower bound added to the softplus modulation so its reciprocal is finite.
inline constexpr double kModulationEps = 1e-4;

/// Estimator variants. `avgpool2x2` freezes every window to the pixel-aligned
/// 2x2 block containing the pixel; `no_modulation` fixes the coefficients to 1.
enum class Variant { adaptive, avgpool2x2, no_modulation };

/// Conv3x3 -> GELU -> Conv1x1 over the raw 3-channel image.
template <typename T>
struct SubNetWeights {
  Tensor<T> conv3_w, conv3_b;  // (hidden, 3, 3, 3), (hidden)
  Tensor<T> conv1_w, conv1_b;  // (out, hidden, 1, 1), (out)
};

template <typename T>
struct EstimatorWeights {
  SubNetWeights<T> offset;      // out = 4 channels (t, l, b, r)
  SubNetWeights<T> modulation;  // out = 3 channels; unused by no_modulation / avgpool2x2
};

/// Depthwise 4x4 stride-2 conv followed by a pointwise 3 -> 3 conv.
template <typename T>
struct DownsamplerWeights {
  Tensor<T> dw_w, dw_b;  // (3, 1, 4, 4), (3)
  Tensor<T> pw_w, pw_b;  // (3, 3, 1, 1), (3)
};

/// sigmoid(Conv1x1(GELU(Conv3x3(image)))): N x 4 x H x W, channels (t, l, b, r).
template <typename T>
Tensor<T> predict_offsets(const Tensor<T>& image, const SubNetWeights<T>& w);

/// softplus(Conv1x1(GELU(Conv3x3(image)))) + kModulationEps: N x 3 x H x W.
template <typename T>
Tensor<T> predict_modulation(const Tensor<T>& image, const SubNetWeights<T>& w);

/// Window extents in pixels: offsets scaled by half the input height (t, b)
/// and half the input width (l, r).
template <typename T>
Tensor<T> offsets_to_extents(const Tensor<T>& offsets, int height, int width);

/// Extents selecting the pixel-aligned 2x2 block around each pixel.
template <typename T>
Tensor<T> avgpool_extents(int batch, int height, int width);

/// Per-pixel box mean of every image channel over the window described by
/// `extents` (N x 4 x H x W, pixels). The window of pixel (i, j) spans
/// [j + 0.5 - l, j + 0.5 + r) x [i + 0.5 - t, i + 0.5 + b); it is clamped to the
/// image for the table lookups while the normalizing area stays (t + b)(l + r).
/// Differentiable with respect to both the image and the extents.
template <typename T>
Tensor<T> dynamic_box_mean(const Tensor<T>& image, const Tensor<T>& extents);

template <typename T>
struct Estimate {
  Tensor<T> illumination;  // I_L
  Tensor<T> box_mean;      // I'_L, before modulation
  Tensor<T> offsets;       // undefined for avgpool2x2
  Tensor<T> extents;
  Tensor<T> modulation;    // undefined unless adaptive
};

template <typename T>
Estimate<T> estimate_illumination(const Tensor<T>& image, const EstimatorWeights<T>& w,
                                  Variant variant = Variant::adaptive);

template <typename T>
Tensor<T> downsample_illumination(const Tensor<T>& level, const DownsamplerWeights<T>& w);

// ---------------------------------------------------------------------------
// Diagnostics

struct Point {
  double x = 0, y = 0;
};

struct PixelWindow {
  Point tl, tr, bl, br;  // clamped to the image, used for lookups
  double area = 0;       // (t + b)(l + r) h w / 4, unclamped
};

struct CornerField {
  int batch = 0, height = 0, width = 0;
  std::vector<PixelWindow> windows;  // (n, y, x) row-major

  const PixelWindow& at(int n, int y, int x) const {
    return windows[(static_cast<size_t>(n) * height + y) * width + x];
  }
};

/// Window geometry implied by an offset map when the current input is
/// crop_h x crop_w. Offsets must lie in (0, 1]; crop must be positive and no
/// larger than the map.
template <typename T>
CornerField corner_field(const Tensor<T>& offsets, int crop_h, int crop_w);

/// Per-pixel integration area (px^2) of batch element `n`, row-major H x W.
template <typename T>
std::vector<double> integration_area_map(const Tensor<T>& offsets, int crop_h, int crop_w, int n = 0);

/// Maps values to [0, 1]; a flat input maps to 0.5.
std::vector<double> minmax_normalize(const std::vector<double>& values);

struct OffsetStats {
  double mean_w = 0, std_w = 0, mean_h = 0, std_h = 0;
};

/// Mean and population standard deviation of window widths (l + r) w / 2 and
/// heights (t + b) h / 2 over all pixels of all batch elements.
template <typename T>
OffsetStats offset_stats(const Tensor<T>& offsets, int crop_h, int crop_w);

}  // namespace saig::sai2e
