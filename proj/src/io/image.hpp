// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace dinolens::io {

/// Planar float image, channel-major then row-major, values nominally [0, 1].
struct Image {
  size_t channels = 0;
  size_t height = 0;
  size_t width = 0;
  std::vector<float> data;

  Image() = default;
  Image(size_t c, size_t h, size_t w, float fill = 0.0f) : channels(c), height(h), width(w), data(c * h * w, fill) {}

  float& at(size_t c, size_t y, size_t x) { return data[(c * height + y) * width + x]; }
  float at(size_t c, size_t y, size_t x) const { return data[(c * height + y) * width + x]; }
  size_t pixels() const { return height * width; }
};

/// Integer label map, row-major; 0 conventionally means "unlabeled".
struct LabelImage {
  size_t height = 0;
  size_t width = 0;
  std::vector<uint8_t> labels;

  LabelImage() = default;
  LabelImage(size_t h, size_t w, uint8_t fill = 0) : height(h), width(w), labels(h * w, fill) {}
  uint8_t& at(size_t y, size_t x) { return labels[y * width + x]; }
  uint8_t at(size_t y, size_t x) const { return labels[y * width + x]; }
};

/// PNG (gray, gray+alpha, RGB, RGBA, palette; 8 or 16 bit) or binary/ascii PGM.
/// Alpha is dropped; palette images are expanded to RGB.
Image read_image(const std::filesystem::path& path);

/// Indexed PNG (palette indices), 8-bit grayscale PNG or PGM as raw labels.
LabelImage read_labels(const std::filesystem::path& path);

void write_png_gray(const std::filesystem::path& path, size_t height, size_t width, std::span<const uint8_t> pixels);
void write_png_rgb(const std::filesystem::path& path, size_t height, size_t width, std::span<const uint8_t> rgb);
void write_png_indexed(const std::filesystem::path& path, const LabelImage& labels);
void write_pgm(const std::filesystem::path& path, size_t height, size_t width, std::span<const uint8_t> pixels);

/// Writes a float image: 1 channel as gray, 3 as RGB; values clamped to [0, 1].
void write_image(const std::filesystem::path& path, const Image& image);

/// Maps values to 8-bit gray by min-max over the span (constant input -> 0).
std::vector<uint8_t> to_gray8(std::span<const double> values);

bool is_image_file(const std::filesystem::path& path);
/// Image files of a directory in lexicographic order.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);

Image to_gray(const Image& image);
Image to_channels(const Image& image, size_t channels);

/// Bilinear resize with half-pixel centers.
Image resize_bilinear(const Image& image, size_t height, size_t width);
Image crop(const Image& image, size_t top, size_t left, size_t height, size_t width);
/// Shortest side resized to `size` (bilinear), then a centered size x size crop.
Image resize_center_crop(const Image& image, size_t size);

/// Toroidal shift: out[(y + dy) mod H][(x + dx) mod W] = in[y][x].
Image roll(const Image& image, long dy, long dx);
Image flip_ud(const Image& image);
/// Counter-clockwise quarter turn; square images only.
Image rot90(const Image& image);

}  // namespace dinolens::io
