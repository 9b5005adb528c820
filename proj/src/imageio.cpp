#include "saigformer/imageio.hpp"

#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstdlib>
#include <cstring>

#include "saigformer/error.hpp"

namespace saig::image {

namespace {

struct ReadContext {
  char message[256] = {0};
};

void on_error(png_structp png, png_const_charp msg) {
  auto* ctx = static_cast<ReadContext*>(png_get_error_ptr(png));
  std::snprintf(ctx->message, sizeof(ctx->message), "%s", msg);
  png_longjmp(png, 1);
}

void on_warning(png_structp, png_const_charp) {}

enum class ReadStatus { ok, corrupt, unsupported };

struct RawImage {
  int width = 0, height = 0, channels = 0, bit_depth = 0, color_type = 0;
  unsigned char* data = nullptr;  // malloc'd, height * width * channels
};

// Plain C-style body: nothing with a destructor lives across setjmp.
ReadStatus read_raw(std::FILE* file, RawImage* out, ReadContext* ctx) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, ctx, on_error, on_warning);
  if (!png) return ReadStatus::corrupt;
  png_infop info = png_create_info_struct(png);
  unsigned char* volatile data = nullptr;
  png_bytep* volatile rows = nullptr;
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    std::free(data);
    std::free(rows);
    return ReadStatus::corrupt;
  }
  png_init_io(png, file);
  png_read_info(png, info);
  out->width = static_cast<int>(png_get_image_width(png, info));
  out->height = static_cast<int>(png_get_image_height(png, info));
  out->bit_depth = png_get_bit_depth(png, info);
  out->color_type = png_get_color_type(png, info);
  const bool supported_type = out->color_type == PNG_COLOR_TYPE_RGB || out->color_type == PNG_COLOR_TYPE_GRAY;
  if (out->bit_depth != 8 || !supported_type) {
    png_destroy_read_struct(&png, &info, nullptr);
    return ReadStatus::unsupported;
  }
  out->channels = out->color_type == PNG_COLOR_TYPE_RGB ? 3 : 1;
  png_set_interlace_handling(png);
  png_read_update_info(png, info);
  const size_t stride = png_get_rowbytes(png, info);
  if (stride != static_cast<size_t>(out->width) * out->channels) png_error(png, "unexpected row size");
  data = static_cast<unsigned char*>(std::malloc(stride * out->height));
  rows = static_cast<png_bytep*>(std::malloc(sizeof(png_bytep) * out->height));
  if (!data || !rows) png_error(png, "out of memory");
  for (int y = 0; y < out->height; ++y) rows[y] = data + stride * y;
  png_read_image(png, rows);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::free(rows);
  out->data = data;
  return ReadStatus::ok;
}

const char* color_type_name(int t) {
  switch (t) {
    case PNG_COLOR_TYPE_GRAY: return "grayscale";
    case PNG_COLOR_TYPE_RGB: return "RGB";
    case PNG_COLOR_TYPE_PALETTE: return "palette";
    case PNG_COLOR_TYPE_GRAY_ALPHA: return "grayscale+alpha";
    case PNG_COLOR_TYPE_RGB_ALPHA: return "RGBA";
  }
  return "unknown";
}

RawImage read_png(const std::string& path) {
  std::FILE* file = std::fopen(path.c_str(), "rb");
  if (!file) throw IoError("cannot open '" + path + "'");
  unsigned char sig[8];
  const bool is_png = std::fread(sig, 1, 8, file) == 8 && png_sig_cmp(sig, 0, 8) == 0;
  if (!is_png) {
    std::fclose(file);
    throw FormatError("'" + path + "' is not a PNG file");
  }
  std::rewind(file);
  RawImage raw;
  ReadContext ctx;
  const ReadStatus status = read_raw(file, &raw, &ctx);
  std::fclose(file);
  if (status == ReadStatus::unsupported) {
    throw FormatError("'" + path + "': unsupported PNG format (" + std::to_string(raw.bit_depth) + "-bit " +
                      color_type_name(raw.color_type) + "); expected 8-bit RGB or grayscale");
  }
  if (status == ReadStatus::corrupt) throw FormatError("'" + path + "': corrupt PNG: " + ctx.message);
  return raw;
}

void write_png(const std::string& path, const std::uint8_t* data, int width, int height, bool rgb) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(width);
  img.height = static_cast<png_uint_32>(height);
  img.format = rgb ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.c_str(), 0, data, 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw IoError("cannot write '" + path + "': " + msg);
  }
}

std::uint8_t quantize(double v) {
  if (!(v > 0.0)) return 0;  // also maps NaN to 0
  if (v >= 1.0) return 255;
  return static_cast<std::uint8_t>(std::lround(v * 255.0));
}

}  // namespace

RgbImage load_png(const std::string& path) {
  RawImage raw = read_png(path);
  RgbImage img;
  img.width = raw.width;
  img.height = raw.height;
  const size_t count = static_cast<size_t>(raw.width) * raw.height;
  img.pixels.resize(count * 3);
  for (size_t i = 0; i < count; ++i)
    for (int c = 0; c < 3; ++c) img.pixels[i * 3 + c] = raw.data[i * raw.channels + (raw.channels == 3 ? c : 0)];
  std::free(raw.data);
  return img;
}

void save_png(const RgbImage& img, const std::string& path) {
  if (img.width < 1 || img.height < 1 || img.pixels.size() != static_cast<size_t>(img.width) * img.height * 3) {
    throw ValueError("save_png: inconsistent image buffer");
  }
  write_png(path, img.pixels.data(), img.width, img.height, true);
}

void save_gray_png(const std::vector<double>& values, int width, int height, const std::string& path) {
  if (width < 1 || height < 1 || values.size() != static_cast<size_t>(width) * height) {
    throw ValueError("save_gray_png: expected " + std::to_string(width) + "x" + std::to_string(height) + " values");
  }
  std::vector<std::uint8_t> bytes(values.size());
  for (size_t i = 0; i < values.size(); ++i) bytes[i] = quantize(values[i]);
  write_png(path, bytes.data(), width, height, false);
}

std::vector<std::uint8_t> load_gray_png(const std::string& path, int* width, int* height) {
  RawImage raw = read_png(path);
  if (raw.channels != 1) {
    std::free(raw.data);
    throw FormatError("'" + path + "': expected a grayscale PNG");
  }
  std::vector<std::uint8_t> out(raw.data, raw.data + static_cast<size_t>(raw.width) * raw.height);
  std::free(raw.data);
  if (width) *width = raw.width;
  if (height) *height = raw.height;
  return out;
}

template <typename T>
Tensor<T> to_tensor(const RgbImage& img) {
  const size_t plane = static_cast<size_t>(img.width) * img.height;
  std::vector<T> values(plane * 3);
  for (size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) values[c * plane + i] = static_cast<T>(img.pixels[i * 3 + c] / 255.0);
  return Tensor<T>::from({1, 3, img.height, img.width}, std::move(values));
}

template <typename T>
RgbImage from_tensor(const Tensor<T>& t) {
  const Shape s = t.shape();
  if (s.n != 1) throw ShapeError("from_tensor", "N", 1, s.n);
  if (s.c != 3) throw ShapeError("from_tensor", "C", 3, s.c);
  RgbImage img;
  img.width = s.w;
  img.height = s.h;
  const size_t plane = s.plane();
  img.pixels.resize(plane * 3);
  const auto d = t.data();
  for (size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) img.pixels[i * 3 + c] = quantize(static_cast<double>(d[c * plane + i]));
  return img;
}

std::vector<double> luminance_y(const RgbImage& img) {
  const size_t plane = static_cast<size_t>(img.width) * img.height;
  std::vector<double> y(plane);
  for (size_t i = 0; i < plane; ++i) {
    y[i] = 0.299 * (img.pixels[i * 3] / 255.0) + 0.587 * (img.pixels[i * 3 + 1] / 255.0) +
           0.114 * (img.pixels[i * 3 + 2] / 255.0);
  }
  return y;
}

template <typename T>
std::vector<double> luminance_y(const Tensor<T>& t, int n) {
  const Shape s = t.shape();
  if (s.c != 3) throw ShapeError("luminance_y", "C", 3, s.c);
  if (n < 0 || n >= s.n) throw ValueError("luminance_y: batch index out of range");
  const size_t plane = s.plane();
  const T* d = t.data().data() + static_cast<size_t>(n) * 3 * plane;
  std::vector<double> y(plane);
  for (size_t i = 0; i < plane; ++i) {
    y[i] = 0.299 * static_cast<double>(d[i]) + 0.587 * static_cast<double>(d[plane + i]) +
           0.114 * static_cast<double>(d[2 * plane + i]);
  }
  return y;
}

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  int m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - m;
}

template <typename T>
Padded<T> pad_reflect(const Tensor<T>& t, int multiple) {
  if (multiple < 1) throw ValueError("pad_reflect: multiple must be >= 1");
  const Shape s = t.shape();
  const int H = (s.h + multiple - 1) / multiple * multiple;
  const int W = (s.w + multiple - 1) / multiple * multiple;
  if (H == s.h && W == s.w) return {t, s.h, s.w};
  const auto d = t.data();
  std::vector<T> out(static_cast<size_t>(s.n) * s.c * H * W);
  for (int p = 0; p < s.n * s.c; ++p) {
    const T* src = d.data() + static_cast<size_t>(p) * s.plane();
    T* dst = out.data() + static_cast<size_t>(p) * H * W;
    for (int y = 0; y < H; ++y) {
      const int sy = reflect_index(y, s.h);
      for (int x = 0; x < W; ++x) dst[static_cast<size_t>(y) * W + x] = src[static_cast<size_t>(sy) * s.w + reflect_index(x, s.w)];
    }
  }
  return {Tensor<T>::from({s.n, s.c, H, W}, std::move(out)), s.h, s.w};
}

template <typename T>
Tensor<T> crop_back(const Tensor<T>& t, int height, int width) {
  const Shape s = t.shape();
  if (height < 1 || width < 1 || height > s.h || width > s.w) {
    throw ValueError("crop_back: " + std::to_string(height) + "x" + std::to_string(width) + " does not fit in " + s.str());
  }
  if (height == s.h && width == s.w) return t;
  const auto d = t.data();
  std::vector<T> out(static_cast<size_t>(s.n) * s.c * height * width);
  for (int p = 0; p < s.n * s.c; ++p)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        out[(static_cast<size_t>(p) * height + y) * width + x] = d[static_cast<size_t>(p) * s.plane() + static_cast<size_t>(y) * s.w + x];
  return Tensor<T>::from({s.n, s.c, height, width}, std::move(out));
}

#define SAIG_INSTANTIATE_IMAGEIO(T)                                   \
  template Tensor<T> to_tensor<T>(const RgbImage&);                   \
  template RgbImage from_tensor(const Tensor<T>&);                    \
  template std::vector<double> luminance_y(const Tensor<T>&, int);    \
  template Padded<T> pad_reflect(const Tensor<T>&, int);              \
  template Tensor<T> crop_back(const Tensor<T>&, int, int);

SAIG_INSTANTIATE_IMAGEIO(float)
SAIG_INSTANTIATE_IMAGEIO(double)

}  // namespace saig::image
