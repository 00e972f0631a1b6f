// SPDX-License-Identifier: Apache-2.0
#include "io/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "common/error.hpp"
#include "common/rng.hpp"

namespace dinolens::io {

const char* to_string(TextureKind kind) noexcept {
  switch (kind) {
    case TextureKind::Noise: return "noise";
    case TextureKind::Voronoi: return "voronoi";
    case TextureKind::Blobs: return "blobs";
    case TextureKind::Stripes: return "stripes";
  }
  return "unknown";
}

TextureKind texture_kind_from_string(std::string_view name) {
  for (TextureKind k : {TextureKind::Noise, TextureKind::Voronoi, TextureKind::Blobs, TextureKind::Stripes}) {
    if (name == to_string(k)) return k;
  }
  throw ValidationError("unknown texture kind '" + std::string(name) + "'");
}

std::vector<double> periodic_blur(const std::vector<double>& field, size_t height, size_t width, double sigma) {
  if (sigma <= 0) return field;
  const long radius = static_cast<long>(std::ceil(4.0 * sigma));
  std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
  double total = 0;
  for (long i = -radius; i <= radius; ++i) {
    kernel[static_cast<size_t>(i + radius)] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    total += kernel[static_cast<size_t>(i + radius)];
  }
  for (double& k : kernel) k /= total;
  const long H = static_cast<long>(height);
  const long W = static_cast<long>(width);
  std::vector<double> tmp(field.size(), 0.0);
  std::vector<double> out(field.size(), 0.0);
  for (long y = 0; y < H; ++y) {
    for (long x = 0; x < W; ++x) {
      double acc = 0;
      for (long i = -radius; i <= radius; ++i) {
        const long xx = ((x + i) % W + W) % W;
        acc += kernel[static_cast<size_t>(i + radius)] * field[static_cast<size_t>(y * W + xx)];
      }
      tmp[static_cast<size_t>(y * W + x)] = acc;
    }
  }
  for (long y = 0; y < H; ++y) {
    for (long x = 0; x < W; ++x) {
      double acc = 0;
      for (long i = -radius; i <= radius; ++i) {
        const long yy = ((y + i) % H + H) % H;
        acc += kernel[static_cast<size_t>(i + radius)] * tmp[static_cast<size_t>(yy * W + x)];
      }
      out[static_cast<size_t>(y * W + x)] = acc;
    }
  }
  return out;
}

namespace {

void normalize01(std::vector<double>& v) {
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double a = *lo;
  const double span = *hi - *lo;
  for (double& x : v) x = span > 0 ? (x - a) / span : 0.5;
}

Image from_field(const std::vector<double>& field, size_t size, size_t channels, Rng& rng) {
  Image img(channels, size, size);
  for (size_t c = 0; c < channels; ++c) {
    // Mild per-channel tint keeps RGB inputs from being exactly gray.
    const double gain = channels == 1 ? 1.0 : rng.uniform(0.8, 1.0);
    const double offset = channels == 1 ? 0.0 : rng.uniform(0.0, 0.2);
    for (size_t i = 0; i < size * size; ++i) {
      img.data[c * size * size + i] = static_cast<float>(std::clamp(offset + gain * field[i], 0.0, 1.0));
    }
  }
  return img;
}

double torus_delta(double a, double b, double extent) {
  double d = std::fabs(a - b);
  return std::min(d, extent - d);
}

}  // namespace

Image noise_image(size_t size, size_t channels, uint64_t seed) {
  if (size == 0 || channels == 0) throw DimensionError("noise image needs positive size and channels");
  Rng rng(seed);
  Image img(channels, size, size);
  for (float& v : img.data) v = static_cast<float>(rng.uniform());
  return img;
}

Image texture_image(TextureKind kind, size_t size, size_t channels, uint64_t seed) {
  if (size == 0 || channels == 0) throw DimensionError("texture needs positive size and channels");
  if (kind == TextureKind::Noise) return noise_image(size, channels, seed);
  Rng rng(seed);
  const double S = static_cast<double>(size);
  std::vector<double> field(size * size, 0.0);
  switch (kind) {
    case TextureKind::Voronoi: {
      const size_t cells = 6 + rng.below(static_cast<uint64_t>(size / 4 + 1));
      std::vector<std::pair<double, double>> sites(cells);
      std::vector<double> shade(cells);
      for (size_t i = 0; i < cells; ++i) {
        sites[i] = {rng.uniform(0, S), rng.uniform(0, S)};
        shade[i] = rng.uniform();
      }
      for (size_t y = 0; y < size; ++y) {
        for (size_t x = 0; x < size; ++x) {
          double best = 1e300, second = 1e300;
          size_t owner = 0;
          for (size_t i = 0; i < cells; ++i) {
            const double dy = torus_delta(static_cast<double>(y), sites[i].first, S);
            const double dx = torus_delta(static_cast<double>(x), sites[i].second, S);
            const double d = std::sqrt(dy * dy + dx * dx);
            if (d < best) {
              second = best;
              best = d;
              owner = i;
            } else if (d < second) {
              second = d;
            }
          }
          // Dark boundaries between cells.
          const double edge = std::min(1.0, (second - best) / 1.5);
          field[y * size + x] = shade[owner] * (0.4 + 0.6 * edge);
        }
      }
      break;
    }
    case TextureKind::Blobs: {
      for (double& v : field) v = rng.normal();
      field = periodic_blur(field, size, size, rng.uniform(1.5, 3.5));
      break;
    }
    case TextureKind::Stripes: {
      const double angle = rng.uniform(0, std::numbers::pi);
      // Integer wave numbers keep the pattern periodic on the torus.
      const double ky = std::round(std::sin(angle) * rng.uniform(2, 8));
      const double kx = std::round(std::cos(angle) * rng.uniform(2, 8)) + (rng.uniform() < 0.5 ? 1 : 0);
      const double phase = rng.uniform(0, 2 * std::numbers::pi);
      for (size_t y = 0; y < size; ++y) {
        for (size_t x = 0; x < size; ++x) {
          const double t = 2 * std::numbers::pi * (ky * static_cast<double>(y) + kx * static_cast<double>(x)) / S;
          field[y * size + x] = std::sin(t + phase) + 0.3 * rng.normal();
        }
      }
      break;
    }
    case TextureKind::Noise: break;
  }
  normalize01(field);
  return from_field(field, size, channels, rng);
}

std::vector<Image> homogeneous_set(size_t count, size_t size, size_t channels, uint64_t seed,
                                   const std::vector<TextureKind>& kinds) {
  if (kinds.empty()) throw ValidationError("homogeneous_set needs at least one texture kind");
  std::vector<Image> out;
  out.reserve(count);
  for (size_t i = 0; i < count; ++i) {
    out.push_back(texture_image(kinds[i % kinds.size()], size, channels, derive_seed(seed, i)));
  }
  return out;
}

LabeledImage two_phase_image(size_t size, uint64_t seed) {
  if (size < 8) throw DimensionError("two-phase image needs size >= 8");
  Rng rng(seed);
  std::vector<double> field(size * size);
  for (double& v : field) v = rng.normal();
  field = periodic_blur(field, size, size, rng.uniform(2.5, 4.0));
  std::vector<double> sorted = field;
  std::sort(sorted.begin(), sorted.end());
  const double fraction = rng.uniform(0.35, 0.55);  // particle area fraction
  const double threshold = sorted[static_cast<size_t>((1.0 - fraction) * static_cast<double>(sorted.size() - 1))];

  LabeledImage out;
  out.truth = LabelImage(size, size);
  for (size_t i = 0; i < field.size(); ++i) out.truth.labels[i] = field[i] > threshold ? 2 : 1;

  // Particles are brighter on average but textured; pores carry coarse
  // out-of-plane structure. Exposure and contrast vary per image.
  std::vector<double> grain(size * size), back(size * size);
  for (double& v : grain) v = rng.normal();
  for (double& v : back) v = rng.normal();
  grain = periodic_blur(grain, size, size, 0.7);
  back = periodic_blur(back, size, size, 2.0);
  const double exposure = rng.uniform(-0.15, 0.15);
  const double contrast = rng.uniform(0.6, 1.2);
  const double noise = rng.uniform(0.02, 0.08);
  std::vector<double> pixels(size * size);
  for (size_t i = 0; i < pixels.size(); ++i) {
    const bool particle = out.truth.labels[i] == 2;
    const double base = particle ? 0.62 + 0.25 * grain[i] : 0.38 + 0.35 * back[i];
    pixels[i] = 0.5 + exposure + contrast * (base - 0.5) + noise * rng.normal();
  }
  out.image = Image(1, size, size);
  for (size_t i = 0; i < pixels.size(); ++i) out.image.data[i] = static_cast<float>(std::clamp(pixels[i], 0.0, 1.0));
  return out;
}

std::vector<LabeledImage> two_phase_set(size_t count, size_t size, uint64_t seed) {
  std::vector<LabeledImage> out;
  out.reserve(count);
  for (size_t i = 0; i < count; ++i) {
    out.push_back(two_phase_image(size, derive_seed(seed, i)));
    out.back().id = "twophase_" + std::to_string(i);
  }
  return out;
}

}  // namespace dinolens::io
