// SPDX-License-Identifier: Apache-2.0
#include "posenc/pos_encoding.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "common/error.hpp"
#include "common/rng.hpp"

namespace dinolens::pe {

const char* to_string(PEKind kind) noexcept {
  switch (kind) {
    case PEKind::Learned: return "learned";
    case PEKind::Sinusoidal: return "sinusoidal";
    case PEKind::NoPE: return "nope";
    case PEKind::RoPE2D: return "rope2d";
    case PEKind::Alibi2D: return "alibi2d";
  }
  return "unknown";
}

PEKind pe_kind_from_string(std::string_view name) {
  for (PEKind k : {PEKind::Learned, PEKind::Sinusoidal, PEKind::NoPE, PEKind::RoPE2D, PEKind::Alibi2D}) {
    if (name == to_string(k)) return k;
  }
  throw ValidationError("unknown positional encoding '" + std::string(name) +
                        "' (expected learned, sinusoidal, nope, rope2d or alibi2d)");
}

namespace {

size_t axis_offset(size_t a, size_t b, size_t extent, bool wrap) {
  const size_t d = a > b ? a - b : b - a;
  return wrap ? std::min(d, extent - d) : d;
}

void require_grid(size_t rows, size_t cols) {
  if (rows == 0 || cols == 0) {
    throw DimensionError("empty token grid " + std::to_string(rows) + "x" + std::to_string(cols));
  }
}

}  // namespace

double grid_distance(GridShape grid, bool wrap, size_t a, size_t b) {
  const size_t dr = axis_offset(a / grid.cols, b / grid.cols, grid.rows, wrap);
  const size_t dc = axis_offset(a % grid.cols, b % grid.cols, grid.cols, wrap);
  return std::sqrt(static_cast<double>(dr * dr + dc * dc));
}

double max_grid_distance(GridShape grid, bool wrap) {
  const size_t mr = wrap ? grid.rows / 2 : grid.rows - 1;
  const size_t mc = wrap ? grid.cols / 2 : grid.cols - 1;
  return std::sqrt(static_cast<double>(mr * mr + mc * mc));
}

std::vector<double> build_alibi(size_t rows, size_t cols, bool wrap) {
  require_grid(rows, cols);
  const GridShape grid{rows, cols};
  const size_t n = grid.tokens();
  std::vector<double> dist(n * n, 0.0);
  const double longest = max_grid_distance(grid, wrap);
  if (longest == 0.0) return dist;
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = i + 1; j < n; ++j) {
      const double v = grid_distance(grid, wrap, i, j) / longest;
      dist[i * n + j] = v;
      dist[j * n + i] = v;
    }
  }
  return dist;
}

AlibiBias make_alibi(GridShape grid, bool wrap, PerHeadSlopes slopes) {
  AlibiBias bias;
  bias.grid = grid;
  bias.wrap = wrap;
  bias.dist = build_alibi(grid.rows, grid.cols, wrap);
  bias.slopes = std::move(slopes);
  return bias;
}

std::vector<double> alibi_logit_offset(const AlibiBias& bias, size_t head) {
  if (head >= bias.slopes.values.size()) {
    throw DimensionError("head " + std::to_string(head) + " has no slope (" +
                         std::to_string(bias.slopes.values.size()) + " heads)");
  }
  const double m = bias.slopes.values[head];
  std::vector<double> offset(bias.dist.size());
  for (size_t i = 0; i < offset.size(); ++i) offset[i] = -m * bias.dist[i];
  return offset;
}

std::vector<std::vector<double>> jitter_alibi(const AlibiBias& bias, double sigma, uint64_t seed,
                                              size_t layers) {
  if (!(sigma >= 0.0)) throw ValidationError("jitter sigma must be >= 0");
  std::vector<std::vector<double>> out(layers, bias.dist);
  if (sigma == 0.0) return out;
  for (size_t l = 0; l < layers; ++l) {
    Rng rng(derive_seed(seed, l));
    for (double& v : out[l]) v += sigma * rng.normal();
  }
  return out;
}

std::vector<double> sinusoidal_pe(size_t rows, size_t cols, size_t d) {
  require_grid(rows, cols);
  if (d == 0 || d % 4 != 0) throw DimensionError("sinusoidal encoding needs d divisible by 4, got " + std::to_string(d));
  const size_t half = d / 2;  // channels per axis
  const size_t freqs = half / 2;
  std::vector<double> pe(rows * cols * d);
  for (size_t r = 0; r < rows; ++r) {
    for (size_t c = 0; c < cols; ++c) {
      double* out = pe.data() + (r * cols + c) * d;
      for (size_t k = 0; k < freqs; ++k) {
        const double omega = std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(half));
        out[2 * k] = std::sin(static_cast<double>(c) * omega);
        out[2 * k + 1] = std::cos(static_cast<double>(c) * omega);
        out[half + 2 * k] = std::sin(static_cast<double>(r) * omega);
        out[half + 2 * k + 1] = std::cos(static_cast<double>(r) * omega);
      }
    }
  }
  return pe;
}

std::vector<double> learned_pe_init(size_t rows, size_t cols, size_t d, uint64_t seed) {
  require_grid(rows, cols);
  Rng rng(seed);
  std::vector<double> pe(rows * cols * d);
  for (double& v : pe) v = 0.02 * rng.normal();
  return pe;
}

std::vector<double> interpolate_pe(std::span<const double> pe, GridShape from, GridShape to, size_t d) {
  require_grid(from.rows, from.cols);
  require_grid(to.rows, to.cols);
  if (pe.size() != from.tokens() * d) {
    throw DimensionError("encoding has " + std::to_string(pe.size()) + " values, grid needs " +
                         std::to_string(from.tokens() * d));
  }
  if (from == to) return {pe.begin(), pe.end()};
  auto source_coord = [](size_t i, size_t n_to, size_t n_from) {
    if (n_to == 1 || n_from == 1) return 0.0;
    return static_cast<double>(i) * static_cast<double>(n_from - 1) / static_cast<double>(n_to - 1);
  };
  std::vector<double> out(to.tokens() * d);
  for (size_t r = 0; r < to.rows; ++r) {
    const double y = source_coord(r, to.rows, from.rows);
    const size_t y0 = std::min(static_cast<size_t>(std::floor(y)), from.rows - 1);
    const size_t y1 = std::min(y0 + 1, from.rows - 1);
    const double wy = y - static_cast<double>(y0);
    for (size_t c = 0; c < to.cols; ++c) {
      const double x = source_coord(c, to.cols, from.cols);
      const size_t x0 = std::min(static_cast<size_t>(std::floor(x)), from.cols - 1);
      const size_t x1 = std::min(x0 + 1, from.cols - 1);
      const double wx = x - static_cast<double>(x0);
      const double* p00 = pe.data() + (y0 * from.cols + x0) * d;
      const double* p01 = pe.data() + (y0 * from.cols + x1) * d;
      const double* p10 = pe.data() + (y1 * from.cols + x0) * d;
      const double* p11 = pe.data() + (y1 * from.cols + x1) * d;
      double* o = out.data() + (r * to.cols + c) * d;
      for (size_t k = 0; k < d; ++k) {
        o[k] = (1 - wy) * ((1 - wx) * p00[k] + wx * p01[k]) + wy * ((1 - wx) * p10[k] + wx * p11[k]);
      }
    }
  }
  return out;
}

RopeTables rope_tables(GridShape grid, size_t head_dim, double base) {
  require_grid(grid.rows, grid.cols);
  if (head_dim == 0 || head_dim % 4 != 0) {
    throw DimensionError("2D RoPE needs a head dimension divisible by 4, got " + std::to_string(head_dim));
  }
  RopeTables t;
  t.tokens = grid.tokens();
  t.pairs = head_dim / 2;
  const size_t per_axis = head_dim / 4;
  t.cos.resize(t.tokens * t.pairs);
  t.sin.resize(t.tokens * t.pairs);
  for (size_t tok = 0; tok < t.tokens; ++tok) {
    const double row = static_cast<double>(tok / grid.cols);
    const double col = static_cast<double>(tok % grid.cols);
    for (size_t p = 0; p < t.pairs; ++p) {
      const size_t k = p % per_axis;
      const double theta = std::pow(base, -static_cast<double>(k) / static_cast<double>(per_axis));
      const double angle = (p < per_axis ? row : col) * theta;
      t.cos[tok * t.pairs + p] = std::cos(angle);
      t.sin[tok * t.pairs + p] = std::sin(angle);
    }
  }
  return t;
}

std::vector<double> rope_rotate(std::span<const double> x, size_t heads, GridShape grid, size_t head_dim,
                                double base) {
  const RopeTables t = rope_tables(grid, head_dim, base);
  if (x.size() != heads * t.tokens * head_dim) {
    throw DimensionError("rope_rotate expects [heads, tokens, head_dim] = " + std::to_string(heads) + "x" +
                         std::to_string(t.tokens) + "x" + std::to_string(head_dim));
  }
  std::vector<double> out(x.size());
  for (size_t h = 0; h < heads; ++h) {
    for (size_t tok = 0; tok < t.tokens; ++tok) {
      const double* in = x.data() + (h * t.tokens + tok) * head_dim;
      double* y = out.data() + (h * t.tokens + tok) * head_dim;
      for (size_t p = 0; p < t.pairs; ++p) {
        const double c = t.cos[tok * t.pairs + p];
        const double s = t.sin[tok * t.pairs + p];
        y[2 * p] = in[2 * p] * c - in[2 * p + 1] * s;
        y[2 * p + 1] = in[2 * p] * s + in[2 * p + 1] * c;
      }
    }
  }
  return out;
}

}  // namespace dinolens::pe
