#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "saigformer/tensor.hpp"

namespace saig::image {

/// 8-bit sRGB pixels, row-major RGB triples.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t& at(int y, int x, int c) { return pixels[(static_cast<size_t>(y) * width + x) * 3 + c]; }
  std::uint8_t at(int y, int x, int c) const { return pixels[(static_cast<size_t>(y) * width + x) * 3 + c]; }
};

/// Reads 8-bit RGB or grayscale (replicated to RGB). Other bit depths, palettes
/// and alpha channels raise FormatError.
RgbImage load_png(const std::string& path);
void save_png(const RgbImage& img, const std::string& path);

/// Writes values in [0, 1] as an 8-bit grayscale PNG, row-major height x width.
void save_gray_png(const std::vector<double>& values, int width, int height, const std::string& path);

/// Reads an 8-bit grayscale PNG back as bytes (used to check heatmaps).
std::vector<std::uint8_t> load_gray_png(const std::string& path, int* width, int* height);

/// 1 x 3 x H x W in [0, 1] (byte / 255).
template <typename T>
Tensor<T> to_tensor(const RgbImage& img);

/// Clamps to [0, 1] and quantizes with round(v * 255). Batch must be 1.
template <typename T>
RgbImage from_tensor(const Tensor<T>& t);

/// BT.601 luma Y = 0.299 R + 0.587 G + 0.114 B on [0, 1] data, row-major.
std::vector<double> luminance_y(const RgbImage& img);

template <typename T>
std::vector<double> luminance_y(const Tensor<T>& t, int n = 0);

template <typename T>
struct Padded {
  Tensor<T> tensor;
  int height = 0;  // original size
  int width = 0;
};

/// Reflects (without repeating the edge) on the bottom and right until both
/// sides are multiples of `multiple`.
template <typename T>
Padded<T> pad_reflect(const Tensor<T>& t, int multiple = 8);

/// Top-left height x width window.
template <typename T>
Tensor<T> crop_back(const Tensor<T>& t, int height, int width);

/// Mirror index into [0, n) for any integer i.
int reflect_index(int i, int n);

}  // namespace saig::image
