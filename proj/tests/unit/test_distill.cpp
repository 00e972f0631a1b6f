// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>
#include <string>

#include "common/error.hpp"
#include "common/rng.hpp"
#include "distill/distill.hpp"
#include "doctest.h"
#include "io/feat1.hpp"
#include "io/synthetic.hpp"

using namespace dinolens;
using namespace dinolens::distill;
using ad::Tensor;

namespace {

vit::ViTConfig small(pe::PEKind kind) {
  vit::ViTConfig c;
  c.dim = 32;
  c.heads = 4;
  c.layers = 2;
  c.pe_kind = kind;
  c.pe_grid = {4, 4};
  return c;
}

std::vector<Example> texture_examples(size_t n, size_t size, uint64_t seed) {
  const auto imgs = io::homogeneous_set(n, size, 1, seed, {io::TextureKind::Noise, io::TextureKind::Blobs});
  std::vector<Example> out;
  for (size_t i = 0; i < n; ++i) out.push_back({"img" + std::to_string(i), imgs[i]});
  return out;
}

DistillConfig short_schedule() {
  DistillConfig cfg;
  cfg.low = {32, 1e-3, 8, 3};
  cfg.high = {64, 1e-4, 8, 1};
  cfg.blank_channels = {1, 5};
  cfg.seed = 11;
  return cfg;
}

bool same_params(const vit::ViTModel<float>& a, const vit::ViTModel<float>& b) {
  if (a.names() != b.names()) return false;
  for (size_t i = 0; i < a.parameters().size(); ++i) {
    const auto x = a.parameters()[i].data(), y = b.parameters()[i].data();
    if (!std::equal(x.begin(), x.end(), y.begin(), y.end())) return false;
  }
  return true;
}

vit::FeatureStack ramp_stack(uint64_t seed) {
  vit::FeatureStack s;
  s.image_id = "s" + std::to_string(seed);
  s.grid = {16, 16};
  s.channels = 12;
  s.layer_ids = {0};
  Rng rng(seed);
  std::vector<float> v(s.tokens() * s.channels);
  for (float& x : v) x = float(rng.normal());
  for (size_t r = 0; r < 16; ++r) {
    for (size_t c = 0; c < 16; ++c) {
      v[(r * 16 + c) * 12 + 2] = float(c) / 15.0f + float(r) / 15.0f;
      v[(r * 16 + c) * 12 + 9] = float(r) / 15.0f;
    }
  }
  s.layers.push_back(std::move(v));
  return s;
}

}  // namespace

TEST_CASE("synthetic biased teacher") {
  const Teacher a = synth_biased_teacher(3);
  const Teacher b = synth_biased_teacher(3);
  CHECK(same_params(a.model, b.model));
  CHECK(a.ramp_channels == b.ramp_channels);
  CHECK(a.joint_xy >= 0.5);
  CHECK(a.model.config().pe_kind == pe::PEKind::Learned);
  for (const auto& p : a.model.parameters()) CHECK_FALSE(p.requires_grad());

  std::vector<vit::FeatureStack> held;
  for (size_t i = 0; i < 10; ++i) {
    held.push_back(vit::forward_features(a.model, io::noise_image(128, 1, 500 + i), {}, "n" + std::to_string(i)));
  }
  CHECK(probe::joint_xy_score(held, {}) >= 0.5);

  // A constant image still gets position-dependent features.
  const auto flat = vit::forward_features(a.model, io::Image(1, 128, 128, 0.5f), {}, "gray");
  const auto f = flat.final_layer();
  double spread = 0;
  for (size_t c = 0; c < f.channels; ++c) {
    double mean = 0, sq = 0;
    for (size_t t = 0; t < f.tokens(); ++t) mean += f.at(t, c);
    mean /= double(f.tokens());
    for (size_t t = 0; t < f.tokens(); ++t) sq += (f.at(t, c) - mean) * (f.at(t, c) - mean);
    spread += std::sqrt(sq / double(f.tokens()));
  }
  CHECK(spread > 0);

  TeacherOptions impossible;
  impossible.min_joint_xy = 1.5;
  impossible.max_attempts = 2;
  CHECK_THROWS_AS(synth_biased_teacher(3, impossible), NumericError);
}

TEST_CASE("blank channel identification") {
  std::vector<vit::FeatureStack> stacks;
  for (uint64_t s = 0; s < 3; ++s) stacks.push_back(ramp_stack(s));
  probe::ProbeConfig cfg;
  cfg.sample_frac = 0.25;
  CHECK(identify_blank_channels(stacks, 2, cfg) == std::vector<size_t>{2, 9});
  CHECK(identify_blank_channels(stacks, 0, cfg).empty());
  CHECK(identify_blank_channels(stacks, 5, cfg) == identify_blank_channels(stacks, 5, cfg));
  CHECK_THROWS_AS(identify_blank_channels(stacks, 13, cfg), ValidationError);

  // The synthetic teacher's planted channels are the most positional ones.
  const Teacher t = synth_biased_teacher(3);
  std::vector<vit::FeatureStack> held;
  for (size_t i = 0; i < 6; ++i) held.push_back(vit::forward_features(t.model, io::noise_image(128, 1, 40 + i), {}));
  auto planted = t.ramp_channels;
  std::sort(planted.begin(), planted.end());
  CHECK(identify_blank_channels(held, 4, {}) == planted);
}

TEST_CASE("cosine loss examples") {
  const auto t = Tensor<double>::from({2, 3}, {1, 2, 3, -1, 0.5, 2});
  const std::vector<size_t> none;
  CHECK(std::fabs(cosine_loss<double>(t, t, none).item()) < 1e-8);
  CHECK(cosine_loss<double>(ad::scale(t, -1.0), t, none).item() == doctest::Approx(2.0).epsilon(1e-8));
  const auto a = Tensor<double>::from({2, 2}, {1, 0, 0, 3});
  const auto b = Tensor<double>::from({2, 2}, {0, 2, 5, 0});
  CHECK(cosine_loss<double>(a, b, none).item() == doctest::Approx(1.0).epsilon(1e-8));

  // A zero teacher token counts as cos = 0 and is flagged.
  size_t flagged = 0;
  const auto z = Tensor<double>::from({2, 2}, {1, 1, 0, 0});
  CHECK(cosine_loss<double>(Tensor<double>::from({2, 2}, {1, 1, 4, 4}), z, none, &flagged).item() ==
        doctest::Approx(0.5).epsilon(1e-8));
  CHECK(flagged == 1);

  // Blanking zeroes the target there, so a student that is zero in the
  // blanked channel and equal elsewhere has zero loss.
  const std::vector<size_t> blank{1};
  const auto s = Tensor<double>::from({2, 3}, {1, 0, 3, -1, 0, 2});
  CHECK(std::fabs(cosine_loss<double>(s, t, blank).item()) < 1e-8);
  CHECK(cosine_loss<double>(t, t, blank).item() > 0.0);
  CHECK_THROWS_AS(cosine_loss<double>(a, t, none), DimensionError);
  const std::vector<size_t> bad{7};
  CHECK_THROWS_AS(cosine_loss<double>(t, t, bad), ValidationError);
}

TEST_CASE("cosine loss gradient matches finite differences") {
  Rng rng(4);
  std::vector<double> sv(5 * 6), tv(5 * 6);
  for (double& x : sv) x = rng.normal();
  for (double& x : tv) x = rng.normal();
  const auto target = Tensor<double>::from({5, 6}, tv);
  const std::vector<size_t> blank{0, 4};
  auto s = Tensor<double>::from({5, 6}, sv);
  s.set_requires_grad(true);
  cosine_loss<double>(s, target, blank).backward();
  const double h = 1e-6;
  for (size_t i = 0; i < sv.size(); ++i) {
    auto up = sv, down = sv;
    up[i] += h;
    down[i] -= h;
    const double numeric = (cosine_loss<double>(Tensor<double>::from({5, 6}, up), target, blank).item() -
                            cosine_loss<double>(Tensor<double>::from({5, 6}, down), target, blank).item()) /
                           (2 * h);
    CHECK(s.grad()[i] == doctest::Approx(numeric).epsilon(1e-6));
  }
}

TEST_CASE("stack-level loss and masked similarity") {
  const auto a = ramp_stack(1);
  auto b = ramp_stack(1);
  const std::vector<size_t> none;
  CHECK(std::fabs(cosine_loss(a, b, none)) < 1e-8);
  CHECK(masked_cosine_similarity(a, b, none) == doctest::Approx(1.0).epsilon(1e-9));
  // Changing only channel 3 leaves the similarity with channel 3 masked at 1.
  for (size_t t = 0; t < b.tokens(); ++t) b.layers[0][t * b.channels + 3] *= -5.0f;
  const std::vector<size_t> three{3};
  CHECK(masked_cosine_similarity(a, b, three) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(masked_cosine_similarity(a, b, none) < 0.99);
  b.grid = {8, 32};
  CHECK_THROWS_AS(cosine_loss(a, b, none), DimensionError);
}

TEST_CASE("image preparation crops") {
  io::Image square(1, 32, 32);
  for (size_t i = 0; i < square.data.size(); ++i) square.data[i] = float(i % 7);
  CHECK(prepare_image(square, 32, 1).data == square.data);

  // 448 wide, 224 tall: no resize, the middle 224 columns survive.
  io::Image wide(1, 224, 448);
  for (size_t y = 0; y < 224; ++y) {
    for (size_t x = 0; x < 448; ++x) wide.at(0, y, x) = float(x) + 1000.0f * float(y);
  }
  const io::Image w = prepare_image(wide, 224, 1);
  REQUIRE(w.height == 224);
  REQUIRE(w.width == 224);
  for (size_t y : {0, 100, 223}) {
    for (size_t x : {0, 1, 150, 223}) CHECK(w.at(0, y, x) == wide.at(0, y, x + 112));
  }

  // 100 tall, 300 wide: scaled by 2.24 to 224 x 672, then 224 columns cropped
  // from offset 224. A horizontal ramp stays linear under bilinear
  // interpolation away from the borders.
  io::Image tall(1, 100, 300);
  for (size_t y = 0; y < 100; ++y) {
    for (size_t x = 0; x < 300; ++x) tall.at(0, y, x) = float(x);
  }
  const io::Image t = prepare_image(tall, 224, 1);
  REQUIRE(t.height == 224);
  REQUIRE(t.width == 224);
  for (size_t x : {0, 57, 223}) {
    const double src = (double(x + 224) + 0.5) * (300.0 / 672.0) - 0.5;
    CHECK(t.at(0, 50, x) == doctest::Approx(src).epsilon(1e-5));
  }

  io::Image rgb(3, 16, 16, 0.25f);
  CHECK(prepare_image(rgb, 8, 1).channels == 1);
}

TEST_CASE("dataset pipeline reads a directory in name order") {
  const auto dir = std::filesystem::temp_directory_path() / "dinolens_test_pipeline";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  io::write_image(dir / "b.png", io::noise_image(40, 1, 1));
  io::write_image(dir / "a.png", io::Image(1, 20, 60, 0.5f));
  const auto ds = dataset_pipeline(dir, 16, 1);
  REQUIRE(ds.size() == 2);
  CHECK(ds[0].id == "a");
  CHECK(ds[1].id == "b");
  for (const auto& e : ds) {
    CHECK(e.image.height == 16);
    CHECK(e.image.width == 16);
  }
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  CHECK_THROWS_AS(dataset_pipeline(dir, 16, 1), IoError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("distillation preconditions") {
  const auto teacher = vit::ViTModel<float>::random(small(pe::PEKind::Learned), 2);
  const auto data = texture_examples(4, 32, 9);
  DistillConfig cfg = short_schedule();
  CHECK_THROWS_AS(distill::distill(teacher, {&teacher, {}}, data, cfg), ContractError);
  auto student = teacher.with_pe_kind(pe::PEKind::Alibi2D);
  student.parameter("pos_embed").mutable_data()[0] = 0.5f;
  CHECK_THROWS_AS(distill::distill(student, {&teacher, {}}, data, cfg), ContractError);

  // Embeddings on a 2x2 grid against a 4x4 student grid.
  const auto dir = std::filesystem::temp_directory_path() / "dinolens_test_feats";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  for (const auto& e : data) io::feat1_write(vit::forward_features(teacher, prepare_image(e.image, 16, 1), {}, e.id),
                                             dir / (e.id + ".feat"));
  try {
    distill::distill(teacher.with_pe_kind(pe::PEKind::NoPE), {nullptr, dir}, data, cfg);
    FAIL("expected a dimension error");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("img") != std::string::npos);
  }
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(teacher_features({nullptr, dir}, data[0], 32), IoError);
}

TEST_CASE("zero epochs leave the student unchanged") {
  const auto teacher = vit::ViTModel<float>::random(small(pe::PEKind::Learned), 2);
  const auto student = teacher.with_pe_kind(pe::PEKind::Alibi2D);
  DistillConfig cfg = short_schedule();
  cfg.low.epochs = 0;
  cfg.high.epochs = 0;
  const auto res = distill::distill(student, {&teacher, {}}, texture_examples(4, 32, 9), cfg);
  CHECK(same_params(res.student, student));
  CHECK(res.curve.empty());
  CHECK(res.steps == 0);
}

TEST_CASE("short distillation run") {
  const auto teacher = vit::ViTModel<float>::random(small(pe::PEKind::Learned), 2);
  const auto before = teacher.clone();
  auto cfg_student = small(pe::PEKind::Alibi2D);
  cfg_student.slopes_trainable = true;
  const auto student = teacher.with_pe_kind(pe::PEKind::Alibi2D, true);
  const auto data = texture_examples(24, 64, 5);
  DistillConfig cfg = short_schedule();
  cfg.threads = 1;
  std::vector<std::string> seen;
  const auto res = distill::distill(student, {&teacher, {}}, data, cfg,
                           [&](const EpochRecord& r) { seen.push_back(r.stage + std::to_string(r.epoch)); });

  CHECK(seen == std::vector<std::string>{"low0", "low1", "low2", "high0"});
  REQUIRE(res.curve.size() == 4);
  CHECK(res.curve[2].mean_loss < res.curve[0].mean_loss);
  CHECK(res.steps == 3 * 3 + 3);
  CHECK(res.stage_models.size() == 2);
  CHECK(same_params(res.stage_models[1], res.student));
  CHECK(same_params(teacher, before));
  for (float v : res.student.parameter("pos_embed").data()) CHECK(v == 0.0f);
  REQUIRE(res.curve[0].slopes.size() == 4);
  CHECK(res.curve[0].slopes[0] != 1.0);

  // Item gradients are reduced in a fixed order, so threads do not matter.
  cfg.threads = 3;
  const auto again = distill::distill(student, {&teacher, {}}, data, cfg);
  CHECK(same_params(again.student, res.student));
  for (size_t i = 0; i < res.curve.size(); ++i) CHECK(again.curve[i].mean_loss == res.curve[i].mean_loss);

  cfg.seed = 12;
  CHECK_FALSE(same_params(distill::distill(student, {&teacher, {}}, data, cfg).student, res.student));
}

TEST_CASE("stored embeddings train like the in-process teacher") {
  const auto teacher = vit::ViTModel<float>::random(small(pe::PEKind::Learned), 2);
  const auto student = teacher.with_pe_kind(pe::PEKind::NoPE);
  const auto data = texture_examples(8, 64, 6);
  DistillConfig cfg = short_schedule();
  cfg.low.epochs = 2;

  const auto dir = std::filesystem::temp_directory_path() / "dinolens_test_stored";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  for (const auto& e : data) {
    for (size_t size : {32, 64}) {
      io::feat1_write(teacher_features({&teacher, {}}, e, size), dir / (e.id + "_" + std::to_string(size) + ".feat"));
    }
  }
  const auto direct = distill::distill(student, {&teacher, {}}, data, cfg);
  const auto stored = distill::distill(student, {nullptr, dir}, data, cfg);
  CHECK(same_params(direct.student, stored.student));
  std::filesystem::remove_all(dir);
}
