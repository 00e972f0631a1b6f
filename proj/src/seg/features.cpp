// SPDX-License-Identifier: Apache-2.0
#include "seg/features.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "analysis/analysis.hpp"
#include "common/error.hpp"
#include "common/format.hpp"

namespace dinolens::seg {

std::vector<double> gaussian_kernel(double sigma) {
  if (sigma < 0) throw ValidationError("negative blur sigma");
  if (sigma == 0) return {1.0};
  const long radius = long(std::ceil(4.0 * sigma));
  std::vector<double> k(size_t(2 * radius + 1));
  double sum = 0;
  for (long i = -radius; i <= radius; ++i) {
    k[size_t(i + radius)] = std::exp(-double(i * i) / (2 * sigma * sigma));
    sum += k[size_t(i + radius)];
  }
  for (double& v : k) v /= sum;
  return k;
}

size_t reflect_index(long i, size_t n) {
  const long period = 2 * long(n);
  long m = i % period;
  if (m < 0) m += period;
  return size_t(m < long(n) ? m : period - 1 - m);
}

std::vector<double> gaussian_blur(std::span<const double> image, size_t height, size_t width, double sigma) {
  const auto k = gaussian_kernel(sigma);
  if (k.size() == 1) return {image.begin(), image.end()};
  const long r = long(k.size() / 2);
  std::vector<double> tmp(image.size()), out(image.size());
  for (size_t y = 0; y < height; ++y) {
    for (size_t x = 0; x < width; ++x) {
      double s = 0;
      for (long j = -r; j <= r; ++j) s += k[size_t(j + r)] * image[y * width + reflect_index(long(x) + j, width)];
      tmp[y * width + x] = s;
    }
  }
  for (size_t y = 0; y < height; ++y) {
    for (size_t x = 0; x < width; ++x) {
      double s = 0;
      for (long j = -r; j <= r; ++j) s += k[size_t(j + r)] * tmp[reflect_index(long(y) + j, height) * width + x];
      out[y * width + x] = s;
    }
  }
  return out;
}

std::vector<double> correlate(std::span<const double> image, size_t height, size_t width,
                              std::span<const double> kernel, size_t ksize) {
  if (ksize % 2 == 0 || kernel.size() != ksize * ksize) throw DimensionError("kernel must be odd and square");
  const long r = long(ksize / 2);
  // Only nonzero taps matter; line kernels are sparse.
  struct Tap {
    long dy, dx;
    double w;
  };
  std::vector<Tap> taps;
  for (long dy = -r; dy <= r; ++dy) {
    for (long dx = -r; dx <= r; ++dx) {
      const double w = kernel[size_t((dy + r) * long(ksize) + dx + r)];
      if (w != 0) taps.push_back({dy, dx, w});
    }
  }
  std::vector<double> out(image.size());
  for (size_t y = 0; y < height; ++y) {
    for (size_t x = 0; x < width; ++x) {
      double s = 0;
      for (const Tap& t : taps) {
        s += t.w * image[reflect_index(long(y) + t.dy, height) * width + reflect_index(long(x) + t.dx, width)];
      }
      out[y * width + x] = s;
    }
  }
  return out;
}

std::vector<double> line_kernel(size_t size, double angle) {
  if (size % 2 == 0) throw DimensionError("line kernel size must be odd");
  const long c = long(size / 2);
  std::vector<double> k(size * size, 0.0);
  for (long t = -c; t <= c; ++t) {
    const long x = c + std::lround(double(t) * std::cos(angle));
    const long y = c - std::lround(double(t) * std::sin(angle));
    k[size_t(y) * size + size_t(x)] = 1.0;
  }
  double sum = 0;
  for (double v : k) sum += v;
  for (double& v : k) v /= sum;
  return k;
}

namespace {

struct Builder {
  FeatureBank& bank;
  void add(std::string name, const std::vector<double>& v) {
    bank.names.push_back(std::move(name));
    for (double x : v) bank.data.push_back(static_cast<float>(x));
  }
};

double at_reflect(const std::vector<double>& im, size_t h, size_t w, long y, long x) {
  return im[reflect_index(y, h) * w + reflect_index(x, w)];
}

}  // namespace

FeatureBank classical_bank(const io::Image& image, const std::string& id) {
  const size_t h = image.height, w = image.width, n = h * w;
  if (n == 0) throw DimensionError("empty image");
  std::vector<double> raw(n);
  for (size_t i = 0; i < n; ++i) raw[i] = image.data[i];

  FeatureBank bank;
  bank.image_id = id;
  bank.height = h;
  bank.width = w;
  Builder b{bank};
  std::vector<std::vector<double>> blurs;
  for (double sigma : kBankSigmas) {
    blurs.push_back(gaussian_blur(raw, h, w, sigma));
    const auto& g = blurs.back();
    const std::string tag = "g" + fmt_double(sigma) + "_";
    std::vector<double> sobel(n), hxx(n), hxy(n), hyy(n), l1(n), l2(n);
    for (size_t y = 0; y < h; ++y) {
      for (size_t x = 0; x < w; ++x) {
        const long Y = long(y), X = long(x);
        auto v = [&](long dy, long dx) { return at_reflect(g, h, w, Y + dy, X + dx); };
        const double gx = (v(-1, 1) + 2 * v(0, 1) + v(1, 1)) - (v(-1, -1) + 2 * v(0, -1) + v(1, -1));
        const double gy = (v(1, -1) + 2 * v(1, 0) + v(1, 1)) - (v(-1, -1) + 2 * v(-1, 0) + v(-1, 1));
        const size_t i = y * w + x;
        sobel[i] = std::sqrt(gx * gx + gy * gy);
        hxx[i] = v(0, 1) - 2 * v(0, 0) + v(0, -1);
        hyy[i] = v(1, 0) - 2 * v(0, 0) + v(-1, 0);
        hxy[i] = (v(1, 1) - v(1, -1) - v(-1, 1) + v(-1, -1)) / 4;
        const double mean = (hxx[i] + hyy[i]) / 2, half = (hxx[i] - hyy[i]) / 2;
        const double root = std::sqrt(half * half + hxy[i] * hxy[i]);
        l1[i] = mean + root;
        l2[i] = mean - root;
      }
    }
    b.add(tag + "blur", g);
    b.add(tag + "sobel", sobel);
    b.add(tag + "hxx", hxx);
    b.add(tag + "hxy", hxy);
    b.add(tag + "hyy", hyy);
    b.add(tag + "heig1", l1);
    b.add(tag + "heig2", l2);
  }
  const size_t ns = std::size(kBankSigmas);
  for (size_t i = 0; i < ns; ++i) {
    for (size_t j = i + 1; j < ns; ++j) {
      std::vector<double> d(n);
      for (size_t p = 0; p < n; ++p) d[p] = blurs[i][p] - blurs[j][p];
      b.add("dog_" + fmt_double(kBankSigmas[i]) + "_" + fmt_double(kBankSigmas[j]), d);
    }
  }
  std::vector<std::vector<double>> lines;
  for (size_t o = 0; o < kLineOrientations; ++o) {
    const double angle = double(o) * std::numbers::pi / double(kLineOrientations);
    lines.push_back(correlate(raw, h, w, line_kernel(kLineLength, angle), kLineLength));
  }
  std::vector<double> mean(n), mx(n), mn(n), sd(n);
  for (size_t p = 0; p < n; ++p) {
    double s = 0, lo = lines[0][p], hi = lines[0][p];
    for (const auto& l : lines) {
      s += l[p];
      lo = std::min(lo, l[p]);
      hi = std::max(hi, l[p]);
    }
    const double m = s / double(lines.size());
    double var = 0;
    for (const auto& l : lines) var += (l[p] - m) * (l[p] - m);
    mean[p] = m;
    mx[p] = hi;
    mn[p] = lo;
    sd[p] = std::sqrt(var / double(lines.size()));
  }
  b.add("membrane_mean", mean);
  b.add("membrane_max", mx);
  b.add("membrane_min", mn);
  b.add("membrane_std", sd);
  return bank;
}

std::vector<double> upsample_grid(std::span<const double> grid, pe::GridShape shape, size_t height, size_t width) {
  if (grid.size() != shape.tokens()) throw DimensionError("grid values do not match the grid shape");
  std::vector<double> out(height * width);
  const double sy = double(shape.rows) / double(height), sx = double(shape.cols) / double(width);
  for (size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((double(y) + 0.5) * sy - 0.5, 0.0, double(shape.rows - 1));
    const size_t y0 = size_t(fy), y1 = std::min(y0 + 1, shape.rows - 1);
    const double wy = fy - double(y0);
    for (size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((double(x) + 0.5) * sx - 0.5, 0.0, double(shape.cols - 1));
      const size_t x0 = size_t(fx), x1 = std::min(x0 + 1, shape.cols - 1);
      const double wx = fx - double(x0);
      out[y * width + x] = (1 - wy) * ((1 - wx) * grid[y0 * shape.cols + x0] + wx * grid[y0 * shape.cols + x1]) +
                           wy * ((1 - wx) * grid[y1 * shape.cols + x0] + wx * grid[y1 * shape.cols + x1]);
    }
  }
  return out;
}

FeatureBank deep_bank(const vit::ViTModel<float>& model, const io::Image& image, size_t d, const std::string& id) {
  const auto stack = vit::forward_features(model, image, {}, id);
  const Eigen::MatrixXd x = analysis::layer_matrix(stack);
  const auto pca = analysis::pca_fit(x, d, true);
  const Eigen::MatrixXd scores = analysis::pca_transform(pca, x);
  FeatureBank bank;
  bank.image_id = id;
  bank.height = image.height;
  bank.width = image.width;
  Builder b{bank};
  for (size_t k = 0; k < d; ++k) {
    const Eigen::VectorXd col = scores.col(long(k));
    b.add("deep_pc" + std::to_string(k),
          upsample_grid({col.data(), size_t(col.size())}, stack.grid, image.height, image.width));
  }
  return bank;
}

FeatureBank concat(const FeatureBank& a, const FeatureBank& b) {
  if (a.height != b.height || a.width != b.width) throw DimensionError("feature banks differ in size");
  FeatureBank out = a;
  out.names.insert(out.names.end(), b.names.begin(), b.names.end());
  out.data.insert(out.data.end(), b.data.begin(), b.data.end());
  return out;
}

}  // namespace dinolens::seg
