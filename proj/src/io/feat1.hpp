// SPDX-License-Identifier: Apache-2.0
#pragma once

// FEAT1 embedding files:
//   bytes 0-5   magic "FEAT1\0"
//   byte  6     version (1)
//   byte  7     dtype (0 = fp32)
//   bytes 8-9   reserved u16 (0)
//   bytes 10-25 layers, h_t, w_t, channels as u32
//   payload     layers*h_t*w_t*channels fp32, layer-major, then row, column, channel
// All integers and floats little-endian.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "vit/feature_stack.hpp"

namespace dinolens::io {

inline constexpr size_t kFeat1HeaderBytes = 26;

vit::FeatureStack feat1_read(const std::filesystem::path& path);
vit::FeatureStack feat1_decode(std::span<const uint8_t> bytes, const std::string& source = "<memory>");
void feat1_write(const vit::FeatureStack& stack, const std::filesystem::path& path);
std::vector<uint8_t> feat1_encode(const vit::FeatureStack& stack);

}  // namespace dinolens::io
