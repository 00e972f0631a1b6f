// SPDX-License-Identifier: Apache-2.0
#pragma once

// Toy-scale vision transformer: patchify, optional absolute encoding,
// pre-norm attention blocks with optional per-layer ALiBi offsets or RoPE,
// and a final layernorm. Exposes per-layer patch-token features.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "io/image.hpp"
#include "posenc/pos_encoding.hpp"
#include "tensor/tensor.hpp"
#include "vit/feature_stack.hpp"

namespace dinolens::vit {

struct ViTConfig {
  size_t patch = 8;
  size_t dim = 64;
  size_t heads = 4;
  size_t layers = 4;
  size_t mlp_ratio = 4;
  size_t channels = 1;
  size_t registers = 0;
  pe::PEKind pe_kind = pe::PEKind::Learned;
  bool alibi_wrap = true;
  bool slopes_trainable = false;
  pe::GridShape pe_grid{8, 8};  // native grid of the learned encoding
  std::vector<double> norm_mean{0.5};
  std::vector<double> norm_std{0.5};

  size_t head_dim() const { return dim / heads; }
  /// Throws ValidationError when the configuration is inconsistent.
  void validate() const;
};

struct InitOptions {
  double weight_gain = 1.0;  // linear weights ~ N(0, (gain / sqrt(fan_in))^2)
  double pe_std = 0.02;
  double register_std = 0.02;
};

template <class T>
struct BlockParams {
  ad::Tensor<T> norm1_w, norm1_b;
  ad::Tensor<T> q_w, q_b, k_w, k_b, v_w, v_b;
  ad::Tensor<T> proj_w, proj_b;
  ad::Tensor<T> norm2_w, norm2_b;
  ad::Tensor<T> fc1_w, fc1_b, fc2_w, fc2_b;
};

/// Positional context shared by every block of one forward pass.
template <class T>
struct AttentionContext {
  size_t heads = 1;
  std::vector<ad::Tensor<T>> offsets;  // per layer [heads, tokens, tokens] or [tokens, tokens]; empty = none
  std::optional<ad::Tensor<T>> rope_cos;  // [tokens, head_dim/2]
  std::optional<ad::Tensor<T>> rope_sin;
};

/// Multi-head self-attention over already-normalized tokens x [tokens, dim],
/// with `offset` added to the scaled scores before the softmax. The attention
/// probabilities [heads, tokens, tokens] are written to `probs` when given.
template <class T>
ad::Tensor<T> multi_head_attention(const ad::Tensor<T>& x, const BlockParams<T>& p, size_t heads,
                                   const ad::Tensor<T>* offset, const AttentionContext<T>& ctx,
                                   ad::Tensor<T>* probs = nullptr);

/// Pre-norm block: x + MHSA(LN(x)), then + MLP(LN(.)).
template <class T>
ad::Tensor<T> attention_block(const ad::Tensor<T>& x, const BlockParams<T>& p, size_t heads,
                              const ad::Tensor<T>* offset, const AttentionContext<T>& ctx);

struct ForwardOptions {
  /// Block indices whose outputs are collected; the final-norm output is always
  /// appended. `all_layers` collects every block.
  std::vector<int> collect;
  bool all_layers = false;
  double jitter_sigma = 0.0;  // test-time noise on positional inputs
  uint64_t jitter_seed = 0;
};

template <class T>
struct ForwardResult {
  pe::GridShape grid;
  std::vector<int> layer_ids;
  std::vector<ad::Tensor<T>> layers;   // [tokens, dim] patch tokens only
  std::vector<ad::Tensor<T>> special;  // [registers, dim] per collected layer
};

template <class T>
class ViTModel {
 public:
  ViTModel() = default;

  static ViTModel random(const ViTConfig& config, uint64_t seed, const InitOptions& init = {});

  const ViTConfig& config() const { return config_; }

  /// Parameters in declaration order (the checkpoint order).
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<ad::Tensor<T>>& parameters() const { return params_; }
  std::vector<ad::Tensor<T>>& parameters() { return params_; }
  ad::Tensor<T>& parameter(const std::string& name);
  const ad::Tensor<T>& parameter(const std::string& name) const;
  bool has_parameter(const std::string& name) const;
  /// Whether the optimizer may update parameter i. The learned encoding is
  /// frozen unless pe_kind is Learned; ALiBi slopes unless slopes_trainable.
  bool trainable(size_t index) const;
  std::vector<size_t> trainable_indices() const;
  size_t parameter_count() const;

  /// Runs the network. `params` optionally substitutes parameter tensors
  /// (same order as parameters()), e.g. per-worker gradient aliases.
  ForwardResult<T> forward(const io::Image& image, const ForwardOptions& options = {},
                           std::span<const ad::Tensor<T>> params = {}) const;

  /// Copy with a different positional scheme: the learned encoding is zeroed
  /// and frozen for Alibi2D / NoPE / RoPE2D / Sinusoidal, slopes reset to 1.
  /// Leaving Learned adds the encoding's mean over positions to
  /// patch_embed.bias.
  ViTModel with_pe_kind(pe::PEKind kind, bool slopes_trainable = false) const;

  /// Deep copy with independent buffers.
  ViTModel clone() const;

  template <class U>
  ViTModel<U> cast() const;

 private:
  template <class U>
  friend class ViTModel;

  void add_param(std::string name, ad::Tensor<T> value);
  size_t index_of(const std::string& name) const;
  BlockParams<T> block(std::span<const ad::Tensor<T>> params, size_t b) const;
  ad::Tensor<T> input_tokens(const io::Image& image, std::span<const ad::Tensor<T>> params, pe::GridShape grid,
                             const ForwardOptions& options) const;

  ViTConfig config_;
  std::vector<std::string> names_;
  std::vector<ad::Tensor<T>> params_;
};

extern template class ViTModel<float>;
extern template class ViTModel<double>;

/// Image -> [tokens, channels * patch^2] in raster order; each row lists
/// channel, then pixel row, then pixel column within the patch.
template <class T>
ad::Tensor<T> patchify(const io::Image& image, size_t patch);

/// Collects the requested layers of one image as fp32 grids.
FeatureStack forward_features(const ViTModel<float>& model, const io::Image& image,
                              const ForwardOptions& options = {}, const std::string& image_id = "");

/// Largest |roll^-1(F(roll(img))) - F(img)| over the patch tokens of every
/// layer. Shifts are in pixels and must be multiples of the patch size.
template <class T>
double toroidal_shift_check(const ViTModel<T>& model, const io::Image& image, long shift_rows, long shift_cols);

/// Rearranges whole patches: output patch i is input patch perm[i].
io::Image permute_patches(const io::Image& image, size_t patch, std::span<const size_t> perm);

/// Largest |F(permute(img))[i] - F(img)[perm[i]]| over all layers.
template <class T>
double permutation_check(const ViTModel<T>& model, const io::Image& image, std::span<const size_t> perm);

/// VITW1 checkpoint: magic "VITW1", a config block, then each parameter as
/// (name, shape, fp32 values) in declaration order, all little-endian.
void save_checkpoint(const ViTModel<float>& model, const std::filesystem::path& path);
ViTModel<float> load_checkpoint(const std::filesystem::path& path);
std::vector<uint8_t> encode_checkpoint(const ViTModel<float>& model);
ViTModel<float> decode_checkpoint(std::span<const uint8_t> bytes, const std::string& source = "<memory>");

}  // namespace dinolens::vit
