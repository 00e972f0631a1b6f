// SPDX-License-Identifier: Apache-2.0
#pragma once

// Procedural stand-ins for homogeneous probe images and for a two-phase
// microstructure segmentation set. Every generator is a pure function of its
// arguments and wraps toroidally, so no location in an image is special.

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "io/image.hpp"

namespace dinolens::io {

enum class TextureKind { Noise, Voronoi, Blobs, Stripes };

const char* to_string(TextureKind kind) noexcept;
TextureKind texture_kind_from_string(std::string_view name);

/// Uniform white noise in [0, 1].
Image noise_image(size_t size, size_t channels, uint64_t seed);

Image texture_image(TextureKind kind, size_t size, size_t channels, uint64_t seed);

/// `count` images cycling through `kinds`, image i seeded from (seed, i).
std::vector<Image> homogeneous_set(size_t count, size_t size, size_t channels, uint64_t seed,
                                   const std::vector<TextureKind>& kinds);

struct LabeledImage {
  Image image;
  LabelImage truth;  // 1 = pore/background phase, 2 = particle phase
  std::string id;
};

/// Grayscale two-phase texture: particles from a thresholded smooth random
/// field over a pore background, with per-image exposure, contrast and noise
/// level drawn at random. Ground truth is exact and position independent.
LabeledImage two_phase_image(size_t size, uint64_t seed);

std::vector<LabeledImage> two_phase_set(size_t count, size_t size, uint64_t seed);

/// Separable Gaussian blur with periodic boundaries (sigma in pixels).
std::vector<double> periodic_blur(const std::vector<double>& field, size_t height, size_t width, double sigma);

}  // namespace dinolens::io
