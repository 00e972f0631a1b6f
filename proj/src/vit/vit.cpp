// SPDX-License-Identifier: Apache-2.0
#include "vit/vit.hpp"

#include <algorithm>
#include <cmath>

#include "common/error.hpp"
#include "common/rng.hpp"
#include "io/binary.hpp"

namespace dinolens::vit {

using ad::Shape;
using ad::Tensor;

void ViTConfig::validate() const {
  auto fail = [](const std::string& what) { throw ValidationError("invalid ViT config: " + what); };
  if (patch == 0 || dim == 0 || heads == 0 || layers == 0 || mlp_ratio == 0 || channels == 0) {
    fail("sizes must be positive");
  }
  if (dim % heads != 0) fail("dim " + std::to_string(dim) + " not divisible by heads " + std::to_string(heads));
  if (pe_kind == pe::PEKind::RoPE2D && head_dim() % 4 != 0) fail("2D RoPE needs head_dim divisible by 4");
  if (pe_kind == pe::PEKind::Sinusoidal && dim % 4 != 0) fail("sinusoidal encoding needs dim divisible by 4");
  if (pe_grid.rows == 0 || pe_grid.cols == 0) fail("empty positional grid");
  if (norm_mean.size() != channels || norm_std.size() != channels) fail("normalization needs one value per channel");
  for (double s : norm_std) {
    if (!(s > 0)) fail("normalization std must be positive");
  }
}

template <class T>
Tensor<T> patchify(const io::Image& image, size_t patch) {
  if (patch == 0 || image.height % patch != 0 || image.width % patch != 0) {
    throw DimensionError("image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                         " is not divisible into " + std::to_string(patch) + " px patches");
  }
  const size_t rows = image.height / patch;
  const size_t cols = image.width / patch;
  const size_t width = image.channels * patch * patch;
  std::vector<T> out(rows * cols * width);
  for (size_t r = 0; r < rows; ++r) {
    for (size_t c = 0; c < cols; ++c) {
      T* row = out.data() + (r * cols + c) * width;
      size_t k = 0;
      for (size_t ch = 0; ch < image.channels; ++ch) {
        for (size_t py = 0; py < patch; ++py) {
          for (size_t px = 0; px < patch; ++px) row[k++] = static_cast<T>(image.at(ch, r * patch + py, c * patch + px));
        }
      }
    }
  }
  return Tensor<T>::from({rows * cols, width}, std::move(out));
}

// ---- attention ---------------------------------------------------------------

template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& x, const BlockParams<T>& p, size_t heads, const Tensor<T>* offset,
                               const AttentionContext<T>& ctx, Tensor<T>* probs) {
  const size_t tokens = x.shape()[0];
  const size_t dim = x.shape()[1];
  const size_t hd = dim / heads;
  auto split = [&](const Tensor<T>& t) { return ad::permute(ad::reshape(t, {tokens, heads, hd}), {1, 0, 2}); };
  Tensor<T> q = split(ad::matmul(x, p.q_w) + p.q_b);
  Tensor<T> k = split(ad::matmul(x, p.k_w) + p.k_b);
  Tensor<T> v = split(ad::matmul(x, p.v_w) + p.v_b);
  if (ctx.rope_cos) {
    q = ad::rotate_pairs(q, *ctx.rope_cos, *ctx.rope_sin);
    k = ad::rotate_pairs(k, *ctx.rope_cos, *ctx.rope_sin);
  }
  Tensor<T> scores = ad::scale(ad::matmul(q, ad::transpose(k)), T(1) / std::sqrt(static_cast<T>(hd)));
  if (offset) scores = scores + *offset;
  Tensor<T> attn = ad::softmax_rows(scores);
  if (probs) *probs = attn;
  Tensor<T> out = ad::reshape(ad::permute(ad::matmul(attn, v), {1, 0, 2}), {tokens, dim});
  return ad::matmul(out, p.proj_w) + p.proj_b;
}

template <class T>
Tensor<T> attention_block(const Tensor<T>& x, const BlockParams<T>& p, size_t heads, const Tensor<T>* offset,
                          const AttentionContext<T>& ctx) {
  Tensor<T> h = x + multi_head_attention(ad::layernorm(x, p.norm1_w, p.norm1_b), p, heads, offset, ctx);
  Tensor<T> m = ad::gelu(ad::matmul(ad::layernorm(h, p.norm2_w, p.norm2_b), p.fc1_w) + p.fc1_b);
  return h + (ad::matmul(m, p.fc2_w) + p.fc2_b);
}

// ---- model -------------------------------------------------------------------

template <class T>
void ViTModel<T>::add_param(std::string name, Tensor<T> value) {
  names_.push_back(std::move(name));
  params_.push_back(std::move(value));
}

template <class T>
size_t ViTModel<T>::index_of(const std::string& name) const {
  const auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw ValidationError("model has no parameter '" + name + "'");
  return static_cast<size_t>(it - names_.begin());
}

template <class T>
bool ViTModel<T>::has_parameter(const std::string& name) const {
  return std::find(names_.begin(), names_.end(), name) != names_.end();
}

template <class T>
Tensor<T>& ViTModel<T>::parameter(const std::string& name) {
  return params_[index_of(name)];
}

template <class T>
const Tensor<T>& ViTModel<T>::parameter(const std::string& name) const {
  return params_[index_of(name)];
}

template <class T>
bool ViTModel<T>::trainable(size_t index) const {
  const std::string& name = names_.at(index);
  if (name == "pos_embed") return config_.pe_kind == pe::PEKind::Learned;
  if (name == "alibi.slopes") return config_.slopes_trainable;
  return true;
}

template <class T>
std::vector<size_t> ViTModel<T>::trainable_indices() const {
  std::vector<size_t> out;
  for (size_t i = 0; i < params_.size(); ++i) {
    if (trainable(i)) out.push_back(i);
  }
  return out;
}

template <class T>
size_t ViTModel<T>::parameter_count() const {
  size_t n = 0;
  for (const auto& p : params_) n += p.numel();
  return n;
}

template <class T>
ViTModel<T> ViTModel<T>::random(const ViTConfig& config, uint64_t seed, const InitOptions& init) {
  config.validate();
  ViTModel model;
  model.config_ = config;
  Rng rng(seed);
  auto normal = [&](Shape shape, double std) {
    std::vector<T> v(ad::numel(shape));
    for (T& x : v) x = static_cast<T>(std * rng.normal());
    return Tensor<T>::from(std::move(shape), std::move(v));
  };
  auto linear = [&](size_t in, size_t out) { return normal({in, out}, init.weight_gain / std::sqrt(double(in))); };
  const size_t d = config.dim;
  const size_t patch_in = config.channels * config.patch * config.patch;
  model.add_param("patch_embed.weight", linear(patch_in, d));
  model.add_param("patch_embed.bias", Tensor<T>::zeros({d}));
  if (config.pe_kind == pe::PEKind::Learned) {
    model.add_param("pos_embed", normal({config.pe_grid.tokens(), d}, init.pe_std));
  } else {
    model.add_param("pos_embed", Tensor<T>::zeros({config.pe_grid.tokens(), d}));
  }
  if (config.registers > 0) model.add_param("registers", normal({config.registers, d}, init.register_std));
  if (config.pe_kind == pe::PEKind::Alibi2D) model.add_param("alibi.slopes", Tensor<T>::full({config.heads}, T(1)));
  const size_t hidden = d * config.mlp_ratio;
  for (size_t b = 0; b < config.layers; ++b) {
    const std::string pre = "blocks." + std::to_string(b) + ".";
    model.add_param(pre + "norm1.weight", Tensor<T>::full({d}, T(1)));
    model.add_param(pre + "norm1.bias", Tensor<T>::zeros({d}));
    for (const char* n : {"attn.q", "attn.k", "attn.v"}) {
      model.add_param(pre + n + ".weight", linear(d, d));
      model.add_param(pre + n + ".bias", Tensor<T>::zeros({d}));
    }
    model.add_param(pre + "attn.proj.weight", linear(d, d));
    model.add_param(pre + "attn.proj.bias", Tensor<T>::zeros({d}));
    model.add_param(pre + "norm2.weight", Tensor<T>::full({d}, T(1)));
    model.add_param(pre + "norm2.bias", Tensor<T>::zeros({d}));
    model.add_param(pre + "mlp.fc1.weight", linear(d, hidden));
    model.add_param(pre + "mlp.fc1.bias", Tensor<T>::zeros({hidden}));
    model.add_param(pre + "mlp.fc2.weight", linear(hidden, d));
    model.add_param(pre + "mlp.fc2.bias", Tensor<T>::zeros({d}));
  }
  model.add_param("norm.weight", Tensor<T>::full({d}, T(1)));
  model.add_param("norm.bias", Tensor<T>::zeros({d}));
  for (size_t i = 0; i < model.params_.size(); ++i) model.params_[i].set_requires_grad(model.trainable(i));
  return model;
}

template <class T>
BlockParams<T> ViTModel<T>::block(std::span<const Tensor<T>> params, size_t b) const {
  const std::string pre = "blocks." + std::to_string(b) + ".";
  auto get = [&](const char* n) { return params[index_of(pre + n)]; };
  return BlockParams<T>{get("norm1.weight"),    get("norm1.bias"),   get("attn.q.weight"), get("attn.q.bias"),
                        get("attn.k.weight"),   get("attn.k.bias"),  get("attn.v.weight"), get("attn.v.bias"),
                        get("attn.proj.weight"), get("attn.proj.bias"), get("norm2.weight"), get("norm2.bias"),
                        get("mlp.fc1.weight"),  get("mlp.fc1.bias"), get("mlp.fc2.weight"), get("mlp.fc2.bias")};
}

template <class T>
Tensor<T> ViTModel<T>::input_tokens(const io::Image& image, std::span<const Tensor<T>> params, pe::GridShape grid,
                                    const ForwardOptions& options) const {
  io::Image normalized = image;
  for (size_t c = 0; c < image.channels; ++c) {
    const float mu = static_cast<float>(config_.norm_mean[c]);
    const float sd = static_cast<float>(config_.norm_std[c]);
    for (size_t i = 0; i < image.pixels(); ++i) {
      float& v = normalized.data[c * image.pixels() + i];
      v = (v - mu) / sd;
    }
  }
  Tensor<T> tokens = ad::matmul(patchify<T>(normalized, config_.patch), params[index_of("patch_embed.weight")]) +
                     params[index_of("patch_embed.bias")];
  const size_t d = config_.dim;
  if (config_.pe_kind == pe::PEKind::Learned) {
    const Tensor<T>& pos = params[index_of("pos_embed")];
    Tensor<T> added = pos;
    if (grid != config_.pe_grid || options.jitter_sigma > 0) {
      std::vector<double> src(pos.data().begin(), pos.data().end());
      std::vector<double> resampled = pe::interpolate_pe(src, config_.pe_grid, grid, d);
      if (options.jitter_sigma > 0) {
        Rng rng(options.jitter_seed);
        for (double& v : resampled) v += options.jitter_sigma * rng.normal();
      }
      added = Tensor<T>::from({grid.tokens(), d}, std::vector<T>(resampled.begin(), resampled.end()));
    }
    tokens = tokens + added;
  } else if (config_.pe_kind == pe::PEKind::Sinusoidal) {
    const std::vector<double> s = pe::sinusoidal_pe(grid.rows, grid.cols, d);
    tokens = tokens + Tensor<T>::from({grid.tokens(), d}, std::vector<T>(s.begin(), s.end()));
  }
  if (config_.registers > 0) tokens = ad::concat_rows<T>({params[index_of("registers")], tokens});
  return tokens;
}

template <class T>
ForwardResult<T> ViTModel<T>::forward(const io::Image& image, const ForwardOptions& options,
                                      std::span<const Tensor<T>> params) const {
  if (params.empty()) params = params_;
  if (params.size() != params_.size()) throw ContractError("forward: parameter override has the wrong length");
  if (image.channels != config_.channels) {
    throw DimensionError("model expects " + std::to_string(config_.channels) + " image channels, got " +
                         std::to_string(image.channels));
  }
  if (image.height % config_.patch != 0 || image.width % config_.patch != 0) {
    throw DimensionError("image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                         " is not divisible by patch size " + std::to_string(config_.patch));
  }
  const pe::GridShape grid{image.height / config_.patch, image.width / config_.patch};
  const size_t n = grid.tokens();
  const size_t r = config_.registers;
  const size_t total = n + r;

  AttentionContext<T> ctx;
  ctx.heads = config_.heads;
  if (config_.pe_kind == pe::PEKind::Alibi2D) {
    const pe::AlibiBias bias = pe::make_alibi(grid, config_.alibi_wrap, pe::PerHeadSlopes::fixed(config_.heads));
    const std::vector<std::vector<double>> per_layer =
        options.jitter_sigma > 0 ? pe::jitter_alibi(bias, options.jitter_sigma, options.jitter_seed, config_.layers)
                                 : std::vector<std::vector<double>>{bias.dist};
    const Tensor<T>& slopes = params[index_of("alibi.slopes")];
    for (const auto& dist : per_layer) {
      // Special tokens sit at distance zero from everything.
      std::vector<T> full(total * total, T(0));
      for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j < n; ++j) full[(r + i) * total + r + j] = static_cast<T>(dist[i * n + j]);
      }
      ctx.offsets.push_back(ad::head_bias(slopes, Tensor<T>::from({total, total}, std::move(full))));
    }
  } else if (config_.pe_kind == pe::PEKind::RoPE2D) {
    const pe::RopeTables tables = pe::rope_tables(grid, config_.head_dim());
    std::vector<T> cos(total * tables.pairs, T(1)), sin(total * tables.pairs, T(0));
    for (size_t i = 0; i < n * tables.pairs; ++i) {
      cos[r * tables.pairs + i] = static_cast<T>(tables.cos[i]);
      sin[r * tables.pairs + i] = static_cast<T>(tables.sin[i]);
    }
    ctx.rope_cos = Tensor<T>::from({total, tables.pairs}, std::move(cos));
    ctx.rope_sin = Tensor<T>::from({total, tables.pairs}, std::move(sin));
  }

  ForwardResult<T> result;
  result.grid = grid;
  auto collect = [&](const Tensor<T>& x, int id) {
    result.layer_ids.push_back(id);
    result.layers.push_back(r > 0 ? ad::slice_rows(x, r, total) : x);
    if (r > 0) result.special.push_back(ad::slice_rows(x, 0, r));
  };

  Tensor<T> x = input_tokens(image, params, grid, options);
  for (size_t b = 0; b < config_.layers; ++b) {
    const Tensor<T>* offset = nullptr;
    if (!ctx.offsets.empty()) offset = &ctx.offsets[std::min(b, ctx.offsets.size() - 1)];
    x = attention_block(x, block(params, b), config_.heads, offset, ctx);
    const bool wanted = options.all_layers ||
                        std::find(options.collect.begin(), options.collect.end(), static_cast<int>(b)) !=
                            options.collect.end();
    if (wanted) collect(x, static_cast<int>(b));
  }
  collect(ad::layernorm(x, params[index_of("norm.weight")], params[index_of("norm.bias")]),
          static_cast<int>(config_.layers));
  return result;
}

template <class T>
ViTModel<T> ViTModel<T>::clone() const {
  ViTModel out;
  out.config_ = config_;
  out.names_ = names_;
  for (size_t i = 0; i < params_.size(); ++i) out.params_.push_back(params_[i].clone(trainable(i)));
  return out;
}

template <class T>
ViTModel<T> ViTModel<T>::with_pe_kind(pe::PEKind kind, bool slopes_trainable) const {
  ViTModel out;
  out.config_ = config_;
  out.config_.pe_kind = kind;
  out.config_.slopes_trainable = kind == pe::PEKind::Alibi2D && slopes_trainable;
  out.config_.validate();
  // The token-constant part of a dropped learned encoding moves into the
  // patch-embedding bias; only the positional variation is lost.
  const bool fold = config_.pe_kind == pe::PEKind::Learned && kind != pe::PEKind::Learned;
  std::vector<T> pe_mean(config_.dim, T(0));
  if (fold) {
    const auto pos = parameter("pos_embed").data();
    const size_t tokens = pos.size() / config_.dim;
    for (size_t c = 0; c < config_.dim; ++c) {
      double s = 0.0;
      for (size_t t = 0; t < tokens; ++t) s += pos[t * config_.dim + c];
      pe_mean[c] = static_cast<T>(s / static_cast<double>(tokens));
    }
  }
  for (size_t i = 0; i < params_.size(); ++i) {
    if (names_[i] == "alibi.slopes") continue;
    Tensor<T> p = params_[i].clone();
    if (names_[i] == "pos_embed" && kind != pe::PEKind::Learned) {
      std::fill(p.mutable_data().begin(), p.mutable_data().end(), T(0));
    }
    if (names_[i] == "patch_embed.bias" && fold) {
      auto b = p.mutable_data();
      for (size_t c = 0; c < config_.dim; ++c) b[c] += pe_mean[c];
    }
    out.add_param(names_[i], p);
  }
  if (kind == pe::PEKind::Alibi2D) {
    // Insert slopes right after pos_embed / registers to match random().
    const size_t at = out.has_parameter("registers") ? out.index_of("registers") + 1 : out.index_of("pos_embed") + 1;
    out.names_.insert(out.names_.begin() + static_cast<long>(at), "alibi.slopes");
    out.params_.insert(out.params_.begin() + static_cast<long>(at), Tensor<T>::full({config_.heads}, T(1)));
  }
  for (size_t i = 0; i < out.params_.size(); ++i) out.params_[i].set_requires_grad(out.trainable(i));
  return out;
}

template <class T>
template <class U>
ViTModel<U> ViTModel<T>::cast() const {
  ViTModel<U> out;
  out.config_ = config_;
  out.names_ = names_;
  for (size_t i = 0; i < params_.size(); ++i) out.params_.push_back(ad::cast<U>(params_[i], trainable(i)));
  return out;
}

template class ViTModel<float>;
template class ViTModel<double>;
template ViTModel<double> ViTModel<float>::cast<double>() const;
template ViTModel<float> ViTModel<double>::cast<float>() const;
template ViTModel<float> ViTModel<float>::cast<float>() const;
template ViTModel<double> ViTModel<double>::cast<double>() const;

// ---- features and checks ------------------------------------------------------

FeatureStack forward_features(const ViTModel<float>& model, const io::Image& image, const ForwardOptions& options,
                              const std::string& image_id) {
  const ForwardResult<float> out = model.forward(image, options);
  FeatureStack stack;
  stack.image_id = image_id;
  stack.grid = out.grid;
  stack.channels = model.config().dim;
  stack.layer_ids = out.layer_ids;
  for (const auto& layer : out.layers) stack.layers.emplace_back(layer.data().begin(), layer.data().end());
  for (const auto& sp : out.special) stack.special.emplace_back(sp.data().begin(), sp.data().end());
  return stack;
}

template <class T>
double toroidal_shift_check(const ViTModel<T>& model, const io::Image& image, long shift_rows, long shift_cols) {
  const long s = static_cast<long>(model.config().patch);
  if (shift_rows % s != 0 || shift_cols % s != 0) {
    throw DimensionError("shift (" + std::to_string(shift_rows) + "," + std::to_string(shift_cols) +
                         ") is not a multiple of the patch size " + std::to_string(s));
  }
  ForwardOptions opts;
  opts.all_layers = true;
  const ForwardResult<T> base = model.forward(image, opts);
  const ForwardResult<T> moved = model.forward(io::roll(image, shift_rows, shift_cols), opts);
  const long rows = static_cast<long>(base.grid.rows);
  const long cols = static_cast<long>(base.grid.cols);
  const long tr = shift_rows / s;
  const long tc = shift_cols / s;
  const size_t d = model.config().dim;
  double worst = 0.0;
  for (size_t l = 0; l < base.layers.size(); ++l) {
    auto a = base.layers[l].data();
    auto b = moved.layers[l].data();
    for (long r = 0; r < rows; ++r) {
      for (long c = 0; c < cols; ++c) {
        const long mr = ((r + tr) % rows + rows) % rows;
        const long mc = ((c + tc) % cols + cols) % cols;
        const size_t src = static_cast<size_t>(r * cols + c) * d;
        const size_t dst = static_cast<size_t>(mr * cols + mc) * d;
        for (size_t k = 0; k < d; ++k) {
          worst = std::max(worst, std::fabs(static_cast<double>(b[dst + k]) - static_cast<double>(a[src + k])));
        }
      }
    }
  }
  return worst;
}

io::Image permute_patches(const io::Image& image, size_t patch, std::span<const size_t> perm) {
  if (image.height % patch != 0 || image.width % patch != 0) throw DimensionError("image not divisible into patches");
  const size_t cols = image.width / patch;
  const size_t n = (image.height / patch) * cols;
  if (perm.size() != n) throw DimensionError("permutation length does not match the patch count");
  io::Image out(image.channels, image.height, image.width);
  for (size_t i = 0; i < n; ++i) {
    const size_t src = perm[i];
    for (size_t c = 0; c < image.channels; ++c) {
      for (size_t py = 0; py < patch; ++py) {
        for (size_t px = 0; px < patch; ++px) {
          out.at(c, (i / cols) * patch + py, (i % cols) * patch + px) =
              image.at(c, (src / cols) * patch + py, (src % cols) * patch + px);
        }
      }
    }
  }
  return out;
}

template <class T>
double permutation_check(const ViTModel<T>& model, const io::Image& image, std::span<const size_t> perm) {
  ForwardOptions opts;
  opts.all_layers = true;
  const ForwardResult<T> base = model.forward(image, opts);
  const ForwardResult<T> moved = model.forward(permute_patches(image, model.config().patch, perm), opts);
  const size_t d = model.config().dim;
  double worst = 0.0;
  for (size_t l = 0; l < base.layers.size(); ++l) {
    auto a = base.layers[l].data();
    auto b = moved.layers[l].data();
    for (size_t i = 0; i < perm.size(); ++i) {
      for (size_t k = 0; k < d; ++k) {
        worst = std::max(worst, std::fabs(static_cast<double>(b[i * d + k]) - static_cast<double>(a[perm[i] * d + k])));
      }
    }
  }
  return worst;
}

template Tensor<float> patchify<float>(const io::Image&, size_t);
template Tensor<double> patchify<double>(const io::Image&, size_t);
template Tensor<float> multi_head_attention(const Tensor<float>&, const BlockParams<float>&, size_t,
                                            const Tensor<float>*, const AttentionContext<float>&, Tensor<float>*);
template Tensor<double> multi_head_attention(const Tensor<double>&, const BlockParams<double>&, size_t,
                                             const Tensor<double>*, const AttentionContext<double>&, Tensor<double>*);
template Tensor<float> attention_block(const Tensor<float>&, const BlockParams<float>&, size_t, const Tensor<float>*,
                                       const AttentionContext<float>&);
template Tensor<double> attention_block(const Tensor<double>&, const BlockParams<double>&, size_t,
                                        const Tensor<double>*, const AttentionContext<double>&);
template double toroidal_shift_check(const ViTModel<float>&, const io::Image&, long, long);
template double toroidal_shift_check(const ViTModel<double>&, const io::Image&, long, long);
template double permutation_check(const ViTModel<float>&, const io::Image&, std::span<const size_t>);
template double permutation_check(const ViTModel<double>&, const io::Image&, std::span<const size_t>);

// ---- checkpoints ---------------------------------------------------------------

namespace {
constexpr char kVitMagic[5] = {'V', 'I', 'T', 'W', '1'};
constexpr uint32_t kVitVersion = 1;
}  // namespace

std::vector<uint8_t> encode_checkpoint(const ViTModel<float>& model) {
  const ViTConfig& c = model.config();
  std::vector<uint8_t> block;
  for (uint32_t v : {kVitVersion, uint32_t(c.patch), uint32_t(c.dim), uint32_t(c.heads), uint32_t(c.layers),
                     uint32_t(c.mlp_ratio), uint32_t(c.channels), uint32_t(c.registers), uint32_t(c.pe_kind),
                     uint32_t(c.alibi_wrap), uint32_t(c.slopes_trainable), uint32_t(c.pe_grid.rows),
                     uint32_t(c.pe_grid.cols)}) {
    io::put_u32(block, v);
  }
  for (size_t ch = 0; ch < c.channels; ++ch) {
    io::put_f32(block, static_cast<float>(c.norm_mean[ch]));
    io::put_f32(block, static_cast<float>(c.norm_std[ch]));
  }
  std::vector<uint8_t> out(std::begin(kVitMagic), std::end(kVitMagic));
  io::put_u32(out, static_cast<uint32_t>(block.size()));
  out.insert(out.end(), block.begin(), block.end());
  io::put_u32(out, static_cast<uint32_t>(model.parameters().size()));
  for (size_t i = 0; i < model.parameters().size(); ++i) {
    const std::string& name = model.names()[i];
    const auto& p = model.parameters()[i];
    io::put_u32(out, static_cast<uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    io::put_u32(out, static_cast<uint32_t>(p.dim()));
    for (size_t e : p.shape()) io::put_u32(out, static_cast<uint32_t>(e));
    for (float v : p.data()) io::put_f32(out, v);
  }
  return out;
}

ViTModel<float> decode_checkpoint(std::span<const uint8_t> bytes, const std::string& source) {
  size_t at = 0;
  auto need = [&](size_t n, const char* what) {
    if (at + n > bytes.size()) {
      throw FormatError(source + ": truncated " + std::string(what) + " at byte offset " + std::to_string(at) +
                        " (need " + std::to_string(n) + " bytes, " + std::to_string(bytes.size() - at) + " left)");
    }
  };
  auto u32 = [&](const char* what) {
    need(4, what);
    const uint32_t v = io::get_u32(bytes, at);
    at += 4;
    return v;
  };
  need(5, "magic");
  if (!std::equal(std::begin(kVitMagic), std::end(kVitMagic), bytes.begin())) {
    throw FormatError(source + ": bad magic (expected \"VITW1\") at byte offset 0");
  }
  at = 5;
  const uint32_t block_len = u32("config length");
  const size_t block_end = at + block_len;
  need(block_len, "config block");
  const uint32_t version = u32("config");
  if (version != kVitVersion) throw FormatError(source + ": unsupported VITW1 config version " + std::to_string(version));
  ViTConfig c;
  c.patch = u32("config");
  c.dim = u32("config");
  c.heads = u32("config");
  c.layers = u32("config");
  c.mlp_ratio = u32("config");
  c.channels = u32("config");
  c.registers = u32("config");
  const uint32_t kind = u32("config");
  if (kind > static_cast<uint32_t>(pe::PEKind::Alibi2D)) throw FormatError(source + ": unknown positional encoding id");
  c.pe_kind = static_cast<pe::PEKind>(kind);
  c.alibi_wrap = u32("config") != 0;
  c.slopes_trainable = u32("config") != 0;
  c.pe_grid.rows = u32("config");
  c.pe_grid.cols = u32("config");
  c.norm_mean.clear();
  c.norm_std.clear();
  for (size_t ch = 0; ch < c.channels; ++ch) {
    need(8, "normalization");
    c.norm_mean.push_back(io::get_f32(bytes, at));
    c.norm_std.push_back(io::get_f32(bytes, at + 4));
    at += 8;
  }
  if (at != block_end) throw FormatError(source + ": config block length mismatch at byte offset " + std::to_string(at));
  c.validate();

  ViTModel<float> model = ViTModel<float>::random(c, 0);
  const uint32_t count = u32("parameter count");
  if (count != model.parameters().size()) {
    throw FormatError(source + ": expected " + std::to_string(model.parameters().size()) + " parameters, found " +
                      std::to_string(count));
  }
  for (size_t i = 0; i < count; ++i) {
    const uint32_t len = u32("name length");
    need(len, "name");
    const std::string name(bytes.begin() + static_cast<long>(at), bytes.begin() + static_cast<long>(at + len));
    at += len;
    if (name != model.names()[i]) {
      throw FormatError(source + ": parameter " + std::to_string(i) + " is '" + name + "', expected '" +
                        model.names()[i] + "'");
    }
    auto& p = model.parameters()[i];
    const uint32_t ndim = u32("rank");
    Shape shape;
    for (uint32_t k = 0; k < ndim; ++k) shape.push_back(u32("shape"));
    if (shape != p.shape()) {
      throw FormatError(source + ": parameter '" + name + "' has shape " + ad::shape_str(shape) + ", expected " +
                        ad::shape_str(p.shape()));
    }
    need(p.numel() * 4, "weights");
    auto dst = p.mutable_data();
    for (size_t k = 0; k < dst.size(); ++k, at += 4) dst[k] = io::get_f32(bytes, at);
  }
  if (at != bytes.size()) throw FormatError(source + ": trailing bytes at offset " + std::to_string(at));
  return model;
}

void save_checkpoint(const ViTModel<float>& model, const std::filesystem::path& path) {
  io::write_file(path, encode_checkpoint(model));
}

ViTModel<float> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path), path.string());
}

}  // namespace dinolens::vit
