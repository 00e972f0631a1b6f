// SPDX-License-Identifier: Apache-2.0
#include "io/image.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>

#include "common/error.hpp"

namespace dinolens::io {

namespace fs = std::filesystem;

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

FilePtr open_file(const fs::path& path, const char* mode) {
  FilePtr f(std::fopen(path.string().c_str(), mode));
  if (!f) throw IoError("cannot open " + path.string());
  return f;
}

std::string lower_ext(const fs::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

struct PngPixels {
  size_t height = 0;
  size_t width = 0;
  size_t channels = 0;  // after transforms
  bool palette = false;
  std::vector<uint8_t> bytes;
};

[[noreturn]] void png_error_fn(png_structp png, png_const_charp msg) {
  auto* what = static_cast<std::string*>(png_get_error_ptr(png));
  if (what) *what = msg;
  png_longjmp(png, 1);
}

void png_warning_fn(png_structp, png_const_charp) {}

PngPixels read_png_raw(const fs::path& path, bool keep_palette_indices) {
  FilePtr f = open_file(path, "rb");
  uint8_t sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw FormatError(path.string() + " is not a PNG file");
  }
  std::string message;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &message, png_error_fn, png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng initialization failed");
  }
  PngPixels out;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError(path.string() + ": " + message);
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  out.palette = color == PNG_COLOR_TYPE_PALETTE;
  if (depth == 16) png_set_strip_16(png);
  if (depth < 8) png_set_packing(png);
  if (out.palette && !keep_palette_indices) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8 && !keep_palette_indices) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  out.height = png_get_image_height(png, info);
  out.width = png_get_image_width(png, info);
  out.channels = png_get_channels(png, info);
  const size_t stride = png_get_rowbytes(png, info);
  out.bytes.resize(stride * out.height);
  rows.resize(out.height);
  for (size_t y = 0; y < out.height; ++y) rows[y] = out.bytes.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

struct PgmPixels {
  size_t height = 0;
  size_t width = 0;
  std::vector<uint8_t> bytes;
};

PgmPixels read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P5" && magic != "P2") throw FormatError(path.string() + " is not a PGM file");
  auto next_int = [&]() {
    while (true) {
      in >> std::ws;
      if (in.peek() == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      long v = -1;
      if (!(in >> v)) throw FormatError(path.string() + ": truncated PGM header");
      return v;
    }
  };
  const long w = next_int();
  const long h = next_int();
  const long maxval = next_int();
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) throw FormatError(path.string() + ": bad PGM header");
  PgmPixels out{static_cast<size_t>(h), static_cast<size_t>(w), {}};
  out.bytes.resize(out.height * out.width);
  auto scale = [&](long v) { return static_cast<uint8_t>(std::lround(255.0 * static_cast<double>(v) / maxval)); };
  if (magic == "P5") {
    in.get();
    for (auto& b : out.bytes) {
      long v = 0;
      if (maxval > 255) {
        const int hi = in.get();
        const int lo = in.get();
        v = (hi << 8) | lo;
      } else {
        v = in.get();
      }
      if (!in) throw FormatError(path.string() + ": truncated PGM payload");
      b = maxval == 255 ? static_cast<uint8_t>(v) : scale(v);
    }
  } else {
    for (auto& b : out.bytes) b = maxval == 255 ? static_cast<uint8_t>(next_int()) : scale(next_int());
  }
  return out;
}

void write_png(const fs::path& path, size_t height, size_t width, int color_type, std::span<const uint8_t> bytes,
               size_t channels, const std::vector<png_color>* palette = nullptr) {
  if (bytes.size() != height * width * channels) throw DimensionError("PNG pixel buffer size mismatch");
  FilePtr f = open_file(path, "wb");
  std::string message;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &message, png_error_fn, png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialization failed");
  }
  std::vector<png_bytep> rows(height);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError(path.string() + ": " + message);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  if (palette) png_set_PLTE(png, info, palette->data(), static_cast<int>(palette->size()));
  png_write_info(png, info);
  for (size_t y = 0; y < height; ++y) rows[y] = const_cast<png_bytep>(bytes.data() + y * width * channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

bool is_image_file(const fs::path& path) {
  const std::string ext = lower_ext(path);
  return ext == ".png" || ext == ".pgm";
}

std::vector<fs::path> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError(dir.string() + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && is_image_file(entry.path())) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

Image read_image(const fs::path& path) {
  if (lower_ext(path) == ".pgm") {
    const PgmPixels p = read_pgm(path);
    Image img(1, p.height, p.width);
    for (size_t i = 0; i < p.bytes.size(); ++i) img.data[i] = static_cast<float>(p.bytes[i]) / 255.0f;
    return img;
  }
  const PngPixels p = read_png_raw(path, false);
  Image img(p.channels, p.height, p.width);
  for (size_t y = 0; y < p.height; ++y) {
    for (size_t x = 0; x < p.width; ++x) {
      for (size_t c = 0; c < p.channels; ++c) {
        img.at(c, y, x) = static_cast<float>(p.bytes[(y * p.width + x) * p.channels + c]) / 255.0f;
      }
    }
  }
  return img;
}

LabelImage read_labels(const fs::path& path) {
  if (lower_ext(path) == ".pgm") {
    PgmPixels p = read_pgm(path);
    LabelImage out(p.height, p.width);
    out.labels = std::move(p.bytes);
    return out;
  }
  PngPixels p = read_png_raw(path, true);
  if (p.channels != 1) throw FormatError(path.string() + ": label PNG must be indexed or single-channel");
  LabelImage out(p.height, p.width);
  for (size_t y = 0; y < p.height; ++y) {
    for (size_t x = 0; x < p.width; ++x) out.at(y, x) = p.bytes[y * p.width + x];
  }
  return out;
}

void write_png_gray(const fs::path& path, size_t height, size_t width, std::span<const uint8_t> pixels) {
  write_png(path, height, width, PNG_COLOR_TYPE_GRAY, pixels, 1);
}

void write_png_rgb(const fs::path& path, size_t height, size_t width, std::span<const uint8_t> rgb) {
  write_png(path, height, width, PNG_COLOR_TYPE_RGB, rgb, 3);
}

void write_png_indexed(const fs::path& path, const LabelImage& labels) {
  static const png_color kPalette[8] = {{0, 0, 0},     {230, 25, 75},  {60, 180, 75},  {0, 130, 200},
                                        {255, 225, 25}, {145, 30, 180}, {70, 240, 240}, {245, 130, 48}};
  uint8_t max_label = 0;
  for (uint8_t v : labels.labels) max_label = std::max(max_label, v);
  std::vector<png_color> palette;
  for (size_t i = 0; i <= max_label; ++i) {
    palette.push_back(i < 8 ? kPalette[i]
                            : png_color{static_cast<png_byte>((i * 97) % 256), static_cast<png_byte>((i * 57) % 256),
                                        static_cast<png_byte>((i * 31) % 256)});
  }
  write_png(path, labels.height, labels.width, PNG_COLOR_TYPE_PALETTE, labels.labels, 1, &palette);
}

void write_pgm(const fs::path& path, size_t height, size_t width, std::span<const uint8_t> pixels) {
  if (pixels.size() != height * width) throw DimensionError("PGM pixel buffer size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P5\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

void write_image(const fs::path& path, const Image& image) {
  auto quantize = [](float v) { return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); };
  if (image.channels == 1) {
    std::vector<uint8_t> px(image.pixels());
    for (size_t i = 0; i < px.size(); ++i) px[i] = quantize(image.data[i]);
    if (lower_ext(path) == ".pgm") {
      write_pgm(path, image.height, image.width, px);
    } else {
      write_png_gray(path, image.height, image.width, px);
    }
    return;
  }
  if (image.channels != 3) throw DimensionError("write_image supports 1 or 3 channels");
  std::vector<uint8_t> px(image.pixels() * 3);
  for (size_t y = 0; y < image.height; ++y) {
    for (size_t x = 0; x < image.width; ++x) {
      for (size_t c = 0; c < 3; ++c) px[(y * image.width + x) * 3 + c] = quantize(image.at(c, y, x));
    }
  }
  write_png_rgb(path, image.height, image.width, px);
}

std::vector<uint8_t> to_gray8(std::span<const double> values) {
  std::vector<uint8_t> out(values.size(), 0);
  if (values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double span = *hi - *lo;
  if (span <= 0) return out;
  for (size_t i = 0; i < values.size(); ++i) {
    out[i] = static_cast<uint8_t>(std::lround(255.0 * (values[i] - *lo) / span));
  }
  return out;
}

Image to_gray(const Image& image) {
  if (image.channels == 1) return image;
  Image out(1, image.height, image.width);
  for (size_t y = 0; y < image.height; ++y) {
    for (size_t x = 0; x < image.width; ++x) {
      if (image.channels >= 3) {
        out.at(0, y, x) = 0.299f * image.at(0, y, x) + 0.587f * image.at(1, y, x) + 0.114f * image.at(2, y, x);
      } else {
        out.at(0, y, x) = image.at(0, y, x);
      }
    }
  }
  return out;
}

Image to_channels(const Image& image, size_t channels) {
  if (image.channels == channels) return image;
  if (channels == 1) return to_gray(image);
  const Image gray = to_gray(image);
  Image out(channels, image.height, image.width);
  for (size_t c = 0; c < channels; ++c) {
    std::copy(gray.data.begin(), gray.data.end(), out.data.begin() + static_cast<long>(c * image.pixels()));
  }
  return out;
}

Image resize_bilinear(const Image& image, size_t height, size_t width) {
  if (height == 0 || width == 0) throw DimensionError("resize to an empty image");
  if (height == image.height && width == image.width) return image;
  Image out(image.channels, height, width);
  const double sy = static_cast<double>(image.height) / static_cast<double>(height);
  const double sx = static_cast<double>(image.width) / static_cast<double>(width);
  for (size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(image.height - 1));
    const size_t y0 = static_cast<size_t>(fy);
    const size_t y1 = std::min(y0 + 1, image.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (size_t x = 0; x < width; ++x) {
      const double fx =
          std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(image.width - 1));
      const size_t x0 = static_cast<size_t>(fx);
      const size_t x1 = std::min(x0 + 1, image.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (size_t c = 0; c < image.channels; ++c) {
        const double v = (1 - wy) * ((1 - wx) * image.at(c, y0, x0) + wx * image.at(c, y0, x1)) +
                         wy * ((1 - wx) * image.at(c, y1, x0) + wx * image.at(c, y1, x1));
        out.at(c, y, x) = static_cast<float>(v);
      }
    }
  }
  return out;
}

Image crop(const Image& image, size_t top, size_t left, size_t height, size_t width) {
  if (top + height > image.height || left + width > image.width) throw DimensionError("crop outside the image");
  Image out(image.channels, height, width);
  for (size_t c = 0; c < image.channels; ++c) {
    for (size_t y = 0; y < height; ++y) {
      for (size_t x = 0; x < width; ++x) out.at(c, y, x) = image.at(c, top + y, left + x);
    }
  }
  return out;
}

Image resize_center_crop(const Image& image, size_t size) {
  if (size == 0) throw DimensionError("target size must be positive");
  const size_t short_side = std::min(image.height, image.width);
  if (short_side == 0) throw DimensionError("empty input image");
  const double factor = static_cast<double>(size) / static_cast<double>(short_side);
  const size_t h = image.height == short_side ? size
                                              : static_cast<size_t>(std::lround(static_cast<double>(image.height) * factor));
  const size_t w = image.width == short_side ? size
                                             : static_cast<size_t>(std::lround(static_cast<double>(image.width) * factor));
  const Image resized = resize_bilinear(image, h, w);
  return crop(resized, (h - size) / 2, (w - size) / 2, size, size);
}

Image roll(const Image& image, long dy, long dx) {
  Image out(image.channels, image.height, image.width);
  const long H = static_cast<long>(image.height);
  const long W = static_cast<long>(image.width);
  for (size_t c = 0; c < image.channels; ++c) {
    for (long y = 0; y < H; ++y) {
      const long ty = ((y + dy) % H + H) % H;
      for (long x = 0; x < W; ++x) {
        const long tx = ((x + dx) % W + W) % W;
        out.at(c, static_cast<size_t>(ty), static_cast<size_t>(tx)) = image.at(c, static_cast<size_t>(y), static_cast<size_t>(x));
      }
    }
  }
  return out;
}

Image flip_ud(const Image& image) {
  Image out(image.channels, image.height, image.width);
  for (size_t c = 0; c < image.channels; ++c) {
    for (size_t y = 0; y < image.height; ++y) {
      for (size_t x = 0; x < image.width; ++x) out.at(c, image.height - 1 - y, x) = image.at(c, y, x);
    }
  }
  return out;
}

Image rot90(const Image& image) {
  if (image.height != image.width) throw DimensionError("rot90 needs a square image");
  const size_t n = image.height;
  Image out(image.channels, n, n);
  // Counter-clockwise: out[n-1-x][y] = in[y][x].
  for (size_t c = 0; c < image.channels; ++c) {
    for (size_t y = 0; y < n; ++y) {
      for (size_t x = 0; x < n; ++x) out.at(c, n - 1 - x, y) = image.at(c, y, x);
    }
  }
  return out;
}

}  // namespace dinolens::io
