// SPDX-License-Identifier: Apache-2.0
#pragma once

// Per-pixel feature banks for trainable segmentation: a classical
// multiscale filter bank and PCA-reduced, upsampled ViT features.

#include <span>
#include <string>
#include <vector>

#include "io/image.hpp"
#include "vit/vit.hpp"

namespace dinolens::seg {

struct FeatureBank {
  std::string image_id;
  size_t height = 0;
  size_t width = 0;
  std::vector<std::string> names;
  std::vector<float> data;  // feature-major: data[f * pixels + p]

  size_t pixels() const { return height * width; }
  size_t features() const { return names.size(); }
  float at(size_t pixel, size_t feature) const { return data[feature * pixels() + pixel]; }
  std::span<const float> channel(size_t f) const { return {data.data() + f * pixels(), pixels()}; }
};

inline constexpr double kBankSigmas[] = {0, 1, 2, 4, 8, 16};
inline constexpr size_t kLineLength = 17;
inline constexpr size_t kLineOrientations = 12;

/// Normalized Gaussian truncated at 4 sigma; sigma = 0 is the unit impulse.
std::vector<double> gaussian_kernel(double sigma);

/// Half-sample symmetric reflection of an index into [0, n).
size_t reflect_index(long i, size_t n);

/// Separable Gaussian blur with reflective boundaries.
std::vector<double> gaussian_blur(std::span<const double> image, size_t height, size_t width, double sigma);

/// 2D correlation with an odd-sized kernel and reflective boundaries.
std::vector<double> correlate(std::span<const double> image, size_t height, size_t width,
                              std::span<const double> kernel, size_t ksize);

/// A one-pixel-wide line through the centre of a size x size kernel at the
/// given angle, normalized to sum 1.
std::vector<double> line_kernel(size_t size, double angle_rad);

/// Per blur sigma: the blur, Sobel magnitude, Hessian xx / xy / yy and its
/// two eigenvalues (larger first). Then every pairwise difference of
/// Gaussians (smaller sigma minus larger) and line-kernel membrane
/// projections of the raw image aggregated over orientations by mean, max,
/// min and std. The first image channel is used.
FeatureBank classical_bank(const io::Image& image, const std::string& id = "");

/// Bilinear upsampling (half-pixel centres, edge clamping) of a
/// [rows, cols] grid to height x width.
std::vector<double> upsample_grid(std::span<const double> grid, pe::GridShape shape, size_t height, size_t width);

/// forward_features, channel standardization, per-image PCA to d
/// components, then bilinear upsampling to the image size.
FeatureBank deep_bank(const vit::ViTModel<float>& model, const io::Image& image, size_t d = 9,
                      const std::string& id = "");

/// Channels of `b` appended to `a`; sizes must match.
FeatureBank concat(const FeatureBank& a, const FeatureBank& b);

}  // namespace dinolens::seg
