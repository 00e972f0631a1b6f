// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <numeric>

#include "common/error.hpp"
#include "common/rng.hpp"
#include "doctest.h"
#include "io/synthetic.hpp"
#include "vit/vit.hpp"

using namespace dinolens;
using namespace dinolens::vit;
using ad::Tensor;

namespace {

ViTConfig toy(pe::PEKind kind, size_t registers = 0) {
  ViTConfig c;
  c.dim = 32;
  c.heads = 4;
  c.layers = 2;
  c.pe_kind = kind;
  c.registers = registers;
  c.pe_grid = {4, 4};
  return c;
}

template <class T>
BlockParams<T> zero_block(size_t d, size_t hidden) {
  auto z = [](ad::Shape s) { return Tensor<T>::zeros(std::move(s)); };
  return {z({d}), z({d}), z({d, d}), z({d}), z({d, d}), z({d}), z({d, d}), z({d}),
          z({d, d}), z({d}), z({d}), z({d}), z({d, hidden}), z({hidden}), z({hidden, d}), z({d})};
}

Tensor<double> random_tensor(ad::Shape shape, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(ad::numel(shape));
  for (double& x : v) x = rng.normal();
  return Tensor<double>::from(std::move(shape), std::move(v));
}

}  // namespace

TEST_CASE("patchify") {
  io::Image im(1, 32, 32);
  for (size_t i = 0; i < im.data.size(); ++i) im.data[i] = float(i);
  auto p = patchify<float>(im, 8);
  CHECK(p.shape() == ad::Shape{16, 64});
  // token 1 is the second patch of the first row
  CHECK(p.at({1, 0}) == im.at(0, 0, 8));
  CHECK(p.at({4, 9}) == im.at(0, 9, 1));
  CHECK(patchify<float>(io::Image(3, 224, 224), 14).shape() == ad::Shape{256, 3 * 196});
  CHECK_THROWS_AS(patchify<float>(io::Image(1, 30, 32), 8), DimensionError);

  const auto model = ViTModel<float>::random(toy(pe::PEKind::NoPE), 1);
  // constant image -> identical token embeddings before positional input
  auto emb = ad::matmul(patchify<float>(io::Image(1, 32, 32, 0.3f), 8), model.parameter("patch_embed.weight"));
  for (size_t t = 1; t < 16; ++t) {
    for (size_t k = 0; k < 32; ++k) CHECK(emb.at({t, k}) == emb.at({0, k}));
  }
}

TEST_CASE("attention block with zero weights is the identity") {
  auto x = random_tensor({5, 8}, 2);
  AttentionContext<double> ctx;
  auto y = attention_block<double>(x, zero_block<double>(8, 32), 2, nullptr, ctx);
  CHECK(y.data().size() == x.data().size());
  for (size_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("zero queries and keys attend uniformly") {
  const size_t d = 8, n = 5;
  auto p = zero_block<double>(d, 32);
  // v = identity projection, proj = identity
  std::vector<double> eye(d * d, 0.0);
  for (size_t i = 0; i < d; ++i) eye[i * d + i] = 1.0;
  p.v_w = Tensor<double>::from({d, d}, eye);
  p.proj_w = Tensor<double>::from({d, d}, eye);
  auto x = random_tensor({n, d}, 3);
  AttentionContext<double> ctx;
  auto out = multi_head_attention<double>(x, p, 2, nullptr, ctx);
  for (size_t k = 0; k < d; ++k) {
    double mean = 0;
    for (size_t t = 0; t < n; ++t) mean += x.at({t, k});
    mean /= double(n);
    for (size_t t = 0; t < n; ++t) CHECK(out.at({t, k}) == doctest::Approx(mean).epsilon(1e-12));
  }
}

TEST_CASE("zero queries and keys with an ALiBi offset follow softmax(-D)") {
  const size_t d = 8;
  auto p = zero_block<double>(d, 32);
  const auto bias = pe::make_alibi({2, 2}, true, pe::PerHeadSlopes::fixed(2));
  auto offset = ad::head_bias(Tensor<double>::full({2}, 1.0), Tensor<double>::from({4, 4}, bias.dist));
  AttentionContext<double> ctx;
  Tensor<double> probs;
  multi_head_attention(random_tensor({4, d}, 4), p, 2, &offset, ctx, &probs);
  const double expected[4] = {0.42481, 0.20946, 0.20946, 0.15628};
  for (size_t h = 0; h < 2; ++h) {
    for (size_t j = 0; j < 4; ++j) CHECK(probs.at({h, 0, j}) == doctest::Approx(expected[j]).epsilon(1e-4));
  }
}

TEST_CASE("forward_features collection and determinism") {
  const auto model = ViTModel<float>::random(toy(pe::PEKind::Learned), 5);
  const auto img = io::texture_image(io::TextureKind::Blobs, 32, 1, 6);
  const auto a = forward_features(model, img);
  CHECK(a.layer_count() == 1);
  CHECK(a.layer_ids == std::vector<int>{2});
  CHECK(a.grid == pe::GridShape{4, 4});
  const auto b = forward_features(model, img);
  CHECK(a.layers == b.layers);

  ForwardOptions all;
  all.all_layers = true;
  const auto c = forward_features(model, img, all);
  CHECK(c.layer_ids == std::vector<int>{0, 1, 2});
  CHECK(c.layers.back() == a.layers.back());

  // learned encoding resampled on a larger grid
  const auto big = forward_features(model, io::texture_image(io::TextureKind::Blobs, 48, 1, 6));
  CHECK(big.grid == pe::GridShape{6, 6});

  CHECK_THROWS_AS(forward_features(model, io::Image(1, 30, 32)), DimensionError);
  CHECK_THROWS_AS(forward_features(model, io::Image(3, 32, 32)), DimensionError);
}

TEST_CASE("registers never appear in feature grids") {
  const auto model = ViTModel<float>::random(toy(pe::PEKind::Alibi2D, 3), 7);
  ForwardOptions all;
  all.all_layers = true;
  const auto s = forward_features(model, io::texture_image(io::TextureKind::Noise, 32, 1, 1), all);
  for (const auto& layer : s.layers) CHECK(layer.size() == 16 * 32);
  REQUIRE(s.special.size() == s.layers.size());
  CHECK(s.special[0].size() == 3 * 32);
}

TEST_CASE("frozen encodings are zero and excluded from training") {
  for (auto kind : {pe::PEKind::Alibi2D, pe::PEKind::NoPE}) {
    const auto model = ViTModel<float>::random(toy(kind), 8);
    for (float v : model.parameter("pos_embed").data()) CHECK(v == 0.0f);
    for (size_t i : model.trainable_indices()) CHECK(model.names()[i] != "pos_embed");
  }
  const auto learned = ViTModel<float>::random(toy(pe::PEKind::Learned), 8);
  const auto student = learned.with_pe_kind(pe::PEKind::Alibi2D);
  CHECK(student.names().size() == learned.names().size() + 1);
  for (float v : student.parameter("pos_embed").data()) CHECK(v == 0.0f);
  for (float v : student.parameter("alibi.slopes").data()) CHECK(v == 1.0f);
  const auto fresh = ViTModel<float>::random(toy(pe::PEKind::Alibi2D), 8);
  CHECK(student.names() == fresh.names());
  CHECK(student.parameter("blocks.1.attn.q.weight").data()[3] == learned.parameter("blocks.1.attn.q.weight").data()[3]);
}

TEST_CASE("dropping a learned encoding keeps its token-constant part") {
  auto learned = ViTModel<float>::random(toy(pe::PEKind::Learned), 8);
  auto pos = learned.parameter("pos_embed").mutable_data();
  for (size_t t = 0; t < 16; ++t) {
    for (size_t c = 0; c < 32; ++c) pos[t * 32 + c] = 0.1f * float(c % 5) - 0.2f;
  }
  const auto nope = learned.with_pe_kind(pe::PEKind::NoPE);
  CHECK(nope.parameter("patch_embed.bias").data()[3] ==
        doctest::Approx(learned.parameter("patch_embed.bias").data()[3] + 0.1f));
  const auto img = io::texture_image(io::TextureKind::Voronoi, 32, 1, 4);
  const auto a = forward_features(learned, img, {}), b = forward_features(nope, img, {});
  for (size_t i = 0; i < a.layers.back().size(); ++i) {
    CHECK(b.layers.back()[i] == doctest::Approx(a.layers.back()[i]).epsilon(1e-5));
  }
}

TEST_CASE("toroidal shift equivariance") {
  const auto img = io::texture_image(io::TextureKind::Voronoi, 32, 1, 9);
  const auto alibi = ViTModel<float>::random(toy(pe::PEKind::Alibi2D, 2), 10);
  CHECK(toroidal_shift_check(alibi, img, 0, 0) == 0.0);
  CHECK(toroidal_shift_check(alibi, img, 32, 32) == 0.0);
  CHECK(toroidal_shift_check(alibi, img, 8, 16) < 1e-5);
  CHECK(toroidal_shift_check(alibi.cast<double>(), img, 8, 16) < 1e-10);
  CHECK(toroidal_shift_check(alibi.cast<double>(), img, -16, 24) < 1e-10);

  const auto learned = ViTModel<float>::random(toy(pe::PEKind::Learned), 10);
  CHECK(toroidal_shift_check(learned, img, 8, 16) > 1e-3);

  CHECK_THROWS_AS(toroidal_shift_check(alibi, img, 3, 0), DimensionError);
}

TEST_CASE("NoPE is equivariant to patch permutations") {
  const auto model = ViTModel<float>::random(toy(pe::PEKind::NoPE, 1), 11);
  const auto img = io::texture_image(io::TextureKind::Blobs, 32, 1, 12);
  std::vector<size_t> perm(16);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(13);
  rng.shuffle(std::span<size_t>(perm));
  CHECK(permutation_check(model, img, perm) < 1e-5);
  CHECK(permutation_check(model.cast<double>(), img, perm) < 1e-10);
}

TEST_CASE("RoPE and sinusoidal models run and respond to position") {
  const auto img = io::texture_image(io::TextureKind::Voronoi, 32, 1, 14);
  for (auto kind : {pe::PEKind::RoPE2D, pe::PEKind::Sinusoidal}) {
    const auto model = ViTModel<float>::random(toy(kind), 15);
    CHECK(toroidal_shift_check(model, img, 8, 8) > 1e-4);
  }
}

TEST_CASE("VITW1 checkpoints round trip") {
  auto cfg = toy(pe::PEKind::Alibi2D, 2);
  cfg.channels = 3;
  cfg.norm_mean = {0.485, 0.456, 0.406};
  cfg.norm_std = {0.229, 0.224, 0.225};
  const auto model = ViTModel<float>::random(cfg, 16);
  const auto bytes = encode_checkpoint(model);
  CHECK(std::string(bytes.begin(), bytes.begin() + 5) == "VITW1");
  const auto back = decode_checkpoint(bytes);
  CHECK(back.names() == model.names());
  CHECK(back.config().registers == 2);
  CHECK(back.config().norm_std[1] == doctest::Approx(0.224));
  for (size_t i = 0; i < model.parameters().size(); ++i) {
    CHECK(std::equal(back.parameters()[i].data().begin(), back.parameters()[i].data().end(),
                     model.parameters()[i].data().begin()));
  }
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  CHECK_THROWS_AS(decode_checkpoint(truncated), FormatError);
  auto bad = bytes;
  bad[1] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
}

TEST_CASE("fp64 gradients through the model match finite differences") {
  auto cfg = toy(pe::PEKind::Alibi2D, 1);
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.layers = 1;
  cfg.slopes_trainable = true;
  auto model = ViTModel<float>::random(cfg, 17).cast<double>();
  const auto img = io::texture_image(io::TextureKind::Blobs, 16, 1, 18);
  auto loss = [&]() {
    auto out = model.forward(img);
    return ad::sum(out.layers.back() * out.layers.back());
  };
  loss().backward();
  const double h = 1e-5;
  double worst = 0;
  for (const char* name : {"alibi.slopes", "blocks.0.attn.q.weight", "registers", "patch_embed.bias"}) {
    auto& p = model.parameter(name);
    REQUIRE(p.has_grad());
    for (size_t i = 0; i < std::min<size_t>(p.numel(), 12); ++i) {
      const double orig = p.data()[i];
      p.mutable_data()[i] = orig + h;
      const double up = loss().item();
      p.mutable_data()[i] = orig - h;
      const double down = loss().item();
      p.mutable_data()[i] = orig;
      const double numeric = (up - down) / (2 * h);
      worst = std::max(worst, std::fabs(numeric - p.grad()[i]) / std::max(1.0, std::fabs(numeric)));
    }
  }
  CHECK(worst < 1e-4);
}
