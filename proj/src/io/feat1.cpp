// SPDX-License-Identifier: Apache-2.0
#include "io/feat1.hpp"

#include <array>
#include <fstream>
#include <limits>

#include "common/error.hpp"
#include "io/binary.hpp"

namespace dinolens::io {

namespace fs = std::filesystem;

namespace {
constexpr std::array<uint8_t, 6> kMagic{'F', 'E', 'A', 'T', '1', '\0'};
}

std::vector<uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = in.tellg();
  in.seekg(0);
  std::vector<uint8_t> bytes(static_cast<size_t>(size));
  in.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!in) throw IoError("failed reading " + path.string());
  return bytes;
}

void write_file(const fs::path& path, std::span<const uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

void write_text(const fs::path& path, const std::string& text) {
  write_file(path, {reinterpret_cast<const uint8_t*>(text.data()), text.size()});
}

vit::FeatureStack feat1_decode(std::span<const uint8_t> bytes, const std::string& source) {
  auto fail = [&](size_t offset, const std::string& what) -> FormatError {
    return FormatError(source + ": " + what + " at byte offset " + std::to_string(offset));
  };
  if (bytes.size() < kFeat1HeaderBytes) {
    throw FormatError(source + ": truncated header, expected " + std::to_string(kFeat1HeaderBytes) +
                      " bytes, got " + std::to_string(bytes.size()));
  }
  for (size_t i = 0; i < kMagic.size(); ++i) {
    if (bytes[i] != kMagic[i]) throw fail(i, "bad magic (expected \"FEAT1\\0\")");
  }
  if (bytes[6] != 1) throw fail(6, "unsupported version " + std::to_string(bytes[6]));
  if (bytes[7] != 0) throw fail(7, "unsupported dtype " + std::to_string(bytes[7]));
  if (get_u16(bytes, 8) != 0) throw fail(8, "nonzero reserved field");
  const uint32_t layers = get_u32(bytes, 10);
  const uint32_t rows = get_u32(bytes, 14);
  const uint32_t cols = get_u32(bytes, 18);
  const uint32_t channels = get_u32(bytes, 22);
  if (layers == 0) throw ValidationError(source + ": header declares zero layers");
  if (rows == 0 || cols == 0 || channels == 0) {
    throw ValidationError(source + ": header declares an empty grid (" + std::to_string(rows) + "x" +
                          std::to_string(cols) + "x" + std::to_string(channels) + ")");
  }
  const uint64_t values = uint64_t{layers} * rows * cols * channels;
  const uint64_t expected = kFeat1HeaderBytes + values * 4;
  if (bytes.size() != expected) {
    throw FormatError(source + ": payload size mismatch, expected " + std::to_string(expected) +
                      " bytes in total, got " + std::to_string(bytes.size()) + " (divergence at byte offset " +
                      std::to_string(std::min<uint64_t>(expected, bytes.size())) + ")");
  }
  vit::FeatureStack stack;
  stack.image_id = source;
  stack.grid = {rows, cols};
  stack.channels = channels;
  const size_t per_layer = size_t{rows} * cols * channels;
  size_t at = kFeat1HeaderBytes;
  for (uint32_t l = 0; l < layers; ++l) {
    std::vector<float> grid(per_layer);
    for (size_t i = 0; i < per_layer; ++i, at += 4) grid[i] = get_f32(bytes, at);
    stack.layers.push_back(std::move(grid));
    stack.layer_ids.push_back(static_cast<int>(l));
  }
  return stack;
}

vit::FeatureStack feat1_read(const fs::path& path) {
  const std::vector<uint8_t> bytes = read_file(path);
  vit::FeatureStack stack = feat1_decode(bytes, path.string());
  stack.image_id = path.stem().string();
  return stack;
}

std::vector<uint8_t> feat1_encode(const vit::FeatureStack& stack) {
  if (stack.layers.empty()) throw ValidationError("cannot encode a stack without layers");
  const size_t per_layer = stack.tokens() * stack.channels;
  if (per_layer == 0) throw ValidationError("cannot encode an empty grid");
  for (const auto& layer : stack.layers) {
    if (layer.size() != per_layer) throw DimensionError("layer size does not match the stack grid");
  }
  constexpr auto kMax = std::numeric_limits<uint32_t>::max();
  if (stack.layers.size() > kMax || stack.grid.rows > kMax || stack.grid.cols > kMax || stack.channels > kMax) {
    throw ValidationError("stack too large for FEAT1");
  }
  std::vector<uint8_t> out;
  out.reserve(kFeat1HeaderBytes + stack.layers.size() * per_layer * 4);
  out.insert(out.end(), kMagic.begin(), kMagic.end());
  out.push_back(1);
  out.push_back(0);
  put_u16(out, 0);
  put_u32(out, static_cast<uint32_t>(stack.layers.size()));
  put_u32(out, static_cast<uint32_t>(stack.grid.rows));
  put_u32(out, static_cast<uint32_t>(stack.grid.cols));
  put_u32(out, static_cast<uint32_t>(stack.channels));
  for (const auto& layer : stack.layers) {
    for (float v : layer) put_f32(out, v);
  }
  return out;
}

void feat1_write(const vit::FeatureStack& stack, const fs::path& path) { write_file(path, feat1_encode(stack)); }

}  // namespace dinolens::io
