// SPDX-License-Identifier: Apache-2.0
#pragma once

// Positional schemes for a 2D token grid: learned and sinusoidal absolute
// encodings, axial 2D RoPE, no encoding, and the wrapped, normalized 2D ALiBi
// distance bias.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dinolens::pe {

enum class PEKind { Learned, Sinusoidal, NoPE, RoPE2D, Alibi2D };

const char* to_string(PEKind kind) noexcept;
PEKind pe_kind_from_string(std::string_view name);

struct GridShape {
  size_t rows = 0;
  size_t cols = 0;
  size_t tokens() const { return rows * cols; }
  bool operator==(const GridShape&) const = default;
};

struct PerHeadSlopes {
  std::vector<double> values;
  bool trainable = false;

  static PerHeadSlopes fixed(size_t heads, double value = 1.0) { return {std::vector<double>(heads, value), false}; }
};

/// Normalized token distances for one grid plus the per-head slopes that
/// scale them into attention-logit offsets.
struct AlibiBias {
  GridShape grid;
  bool wrap = true;
  std::vector<double> dist;  // tokens x tokens, row-major
  PerHeadSlopes slopes;

  size_t tokens() const { return grid.tokens(); }
  double at(size_t i, size_t j) const { return dist[i * grid.tokens() + j]; }
};

/// Distance between two grid cells before normalization. Under wrap each
/// axis offset is min(|d|, extent - |d|).
double grid_distance(GridShape grid, bool wrap, size_t a, size_t b);

/// Largest grid_distance over all pairs, from the per-axis maxima.
double max_grid_distance(GridShape grid, bool wrap);

/// D[i][j] = grid_distance(i, j) / max_grid_distance; [[0]] for one token.
/// Throws DimensionError on an empty grid.
std::vector<double> build_alibi(size_t rows, size_t cols, bool wrap);

AlibiBias make_alibi(GridShape grid, bool wrap, PerHeadSlopes slopes);

/// -m_h * D for one head.
std::vector<double> alibi_logit_offset(const AlibiBias& bias, size_t head);

/// One perturbed copy of D per layer, each entry plus N(0, sigma^2) noise
/// drawn independently. sigma == 0 yields exact copies.
std::vector<std::vector<double>> jitter_alibi(const AlibiBias& bias, double sigma, uint64_t seed,
                                              size_t layers);

/// Axial sinusoidal encoding [tokens, d]; channels [0, d/2) encode the column
/// and [d/2, d) the row as interleaved sin/cos pairs with base-10000
/// wavelengths. d must be divisible by 4.
std::vector<double> sinusoidal_pe(size_t rows, size_t cols, size_t d);

/// Trainable encoding initialized from N(0, 0.02^2), [tokens, d].
std::vector<double> learned_pe_init(size_t rows, size_t cols, size_t d, uint64_t seed);

/// Bilinear resampling of a [from.tokens(), d] encoding onto a new grid, with
/// corner cells mapped onto corner cells.
std::vector<double> interpolate_pe(std::span<const double> pe, GridShape from, GridShape to, size_t d);

/// Rotation angles for axial 2D RoPE: for a head of dimension dh (divisible
/// by 4), pairs [0, dh/4) turn with the row index and [dh/4, dh/2) with the
/// column index, each axis on a geometric frequency ladder.
struct RopeTables {
  size_t tokens = 0;
  size_t pairs = 0;
  std::vector<double> cos;  // tokens x pairs
  std::vector<double> sin;
};

RopeTables rope_tables(GridShape grid, size_t head_dim, double base = 10000.0);

/// Applies RoPE to q or k laid out [heads, tokens, head_dim].
std::vector<double> rope_rotate(std::span<const double> x, size_t heads, GridShape grid, size_t head_dim,
                                double base = 10000.0);

}  // namespace dinolens::pe
