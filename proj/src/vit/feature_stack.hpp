// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "posenc/pos_encoding.hpp"

namespace dinolens::vit {

/// One layer's patch-token features as a [tokens, channels] row-major matrix,
/// tokens in raster order over the grid.
struct LayerView {
  pe::GridShape grid;
  size_t channels = 0;
  std::span<const float> values;

  size_t tokens() const { return grid.tokens(); }
  float at(size_t token, size_t channel) const { return values[token * channels + channel]; }
  std::span<const float> token(size_t t) const { return values.subspan(t * channels, channels); }
};

/// Per-layer patch-token feature grids of one image. Special tokens
/// (registers) are kept apart from the grids.
struct FeatureStack {
  std::string image_id;
  pe::GridShape grid;
  size_t channels = 0;
  std::vector<int> layer_ids;               // block index, or the block count for the final norm
  std::vector<std::vector<float>> layers;   // each tokens * channels
  std::vector<std::vector<float>> special;  // each registers * channels; may be empty

  size_t layer_count() const { return layers.size(); }
  size_t tokens() const { return grid.tokens(); }
  LayerView layer(size_t index) const { return {grid, channels, layers.at(index)}; }
  LayerView final_layer() const { return layer(layers.size() - 1); }
};

}  // namespace dinolens::vit
