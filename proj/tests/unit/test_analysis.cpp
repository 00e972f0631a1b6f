// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "analysis/analysis.hpp"
#include "common/error.hpp"
#include "common/rng.hpp"
#include "distill/distill.hpp"
#include "doctest.h"
#include "io/synthetic.hpp"

using namespace dinolens;
using namespace dinolens::analysis;

namespace {

vit::FeatureStack stack_from(const Eigen::MatrixXd& x, pe::GridShape grid, const std::string& id = "s") {
  vit::FeatureStack s;
  s.image_id = id;
  s.grid = grid;
  s.channels = size_t(x.cols());
  s.layer_ids = {0};
  std::vector<float> v;
  for (long t = 0; t < x.rows(); ++t) {
    for (long c = 0; c < x.cols(); ++c) v.push_back(float(x(t, c)));
  }
  s.layers.push_back(std::move(v));
  return s;
}

Eigen::MatrixXd gaussian(long rows, long cols, uint64_t seed) {
  Rng rng(seed);
  Eigen::MatrixXd x(rows, cols);
  for (long i = 0; i < rows; ++i) {
    for (long j = 0; j < cols; ++j) x(i, j) = rng.normal();
  }
  return x;
}

vit::ViTConfig toy(pe::PEKind kind) {
  vit::ViTConfig c;
  c.dim = 32;
  c.heads = 4;
  c.layers = 2;
  c.pe_kind = kind;
  c.pe_grid = {4, 4};
  return c;
}

}  // namespace

TEST_CASE("PCA on known covariance") {
  // Points +-(3, 0) and +-(0, 1): variances 4.5 and 0.5, axes as components.
  Eigen::MatrixXd x(4, 2);
  x << 3, 0, -3, 0, 0, 1, 0, -1;
  const auto m = pca_fit(x, 2, false);
  CHECK(m.explained[0] == doctest::Approx(0.9));
  CHECK(m.explained[1] == doctest::Approx(0.1));
  CHECK(m.components(0, 0) == doctest::Approx(1.0));
  CHECK(std::fabs(m.components(0, 1)) < 1e-12);
  CHECK(m.components(1, 1) == doctest::Approx(1.0));

  // Tokens on a line: one component holds all the variance.
  Eigen::MatrixXd line(20, 5);
  for (long i = 0; i < 20; ++i) line.row(i) << 1 + i, 2 - 2 * i, 0.5 * i, 3, -i;
  CHECK(pca_fit(line, 1, false).explained[0] == doctest::Approx(1.0));

  CHECK_THROWS_AS(pca_fit(x, 3, false), ValidationError);
  CHECK_THROWS_AS(pca_fit(x, 0, false), ValidationError);
}

TEST_CASE("PCA structure and reconstruction") {
  const Eigen::MatrixXd x = gaussian(60, 8, 3);
  const auto m = pca_fit(x, 5, false);
  const Eigen::MatrixXd gram = m.components * m.components.transpose();
  CHECK((gram - Eigen::MatrixXd::Identity(5, 5)).cwiseAbs().maxCoeff() < 1e-6);
  double sum = 0;
  for (size_t k = 0; k < 5; ++k) {
    sum += m.explained[k];
    if (k > 0) CHECK(m.explained[k] <= m.explained[k - 1]);
    long arg = 0;
    m.components.row(long(k)).cwiseAbs().maxCoeff(&arg);
    CHECK(m.components(long(k), arg) > 0);
  }
  CHECK(sum <= 1.0 + 1e-12);

  // Reconstruction error equals the variance left out.
  const Eigen::MatrixXd back = pca_inverse(m, pca_transform(m, x));
  const Eigen::MatrixXd centred = x.rowwise() - x.colwise().mean();
  const double residual = (back - x).squaredNorm() / centred.squaredNorm();
  CHECK(residual == doctest::Approx(1.0 - sum).epsilon(1e-9));

  // d distinct points are reconstructed exactly by d components.
  const Eigen::MatrixXd pts = gaussian(4, 10, 5);
  const auto p = pca_fit(pts, 4, false);
  CHECK((pca_inverse(p, pca_transform(p, pts)) - pts).cwiseAbs().maxCoeff() < 1e-8);

  // Standardizing removes per-channel scale.
  Eigen::MatrixXd scaled = x;
  scaled.col(2) *= 100.0;
  const auto a = pca_fit(x, 3, true), b = pca_fit(scaled, 3, true);
  for (size_t k = 0; k < 3; ++k) CHECK(a.explained[k] == doctest::Approx(b.explained[k]).epsilon(1e-9));
  CHECK(pca_fit(scaled, 1, false).explained[0] > 0.99);
}

TEST_CASE("shared and masked PCA") {
  const auto s1 = stack_from(gaussian(16, 6, 1), {4, 4}, "a");
  auto x2 = gaussian(16, 6, 2);
  x2.col(0).array() += 5.0;
  const auto s2 = stack_from(x2, {4, 4}, "b");
  const std::vector<vit::FeatureStack> both{s1, s2};
  const auto m = pca_fit(both, 3, false);
  Eigen::MatrixXd joined(32, 6);
  joined << layer_matrix(s1), layer_matrix(s2);
  const auto direct = pca_fit(joined, 3, false);
  CHECK((m.components - direct.components).cwiseAbs().maxCoeff() == 0.0);

  const auto rgb = pca_rgb_shared(both, m);
  for (size_t k = 0; k < 3; ++k) {
    float lo = 1, hi = 0;
    for (const auto& im : rgb) {
      for (size_t t = 0; t < 16; ++t) {
        lo = std::min(lo, im.data[k * 16 + t]);
        hi = std::max(hi, im.data[k * 16 + t]);
      }
    }
    CHECK(lo == doctest::Approx(0.0));
    CHECK(hi == doctest::Approx(1.0));
  }
  // Component 0 separates the two images, so per-image normalization would
  // hide the offset that the shared normalization keeps.
  double mean_a = 0, mean_b = 0;
  for (size_t t = 0; t < 16; ++t) {
    mean_a += rgb[0].data[t];
    mean_b += rgb[1].data[t];
  }
  CHECK(std::fabs(mean_a - mean_b) / 16 > 0.3);
  const auto own = pca_rgb(s1, m);
  CHECK(*std::min_element(own.data.begin(), own.data.begin() + 16) == 0.0f);
  CHECK(*std::max_element(own.data.begin(), own.data.begin() + 16) == 1.0f);

  // A mask covering the top half keeps the top two token rows.
  io::LabelImage bitmap(16, 16);
  for (size_t y = 0; y < 8; ++y) {
    for (size_t x = 0; x < 16; ++x) bitmap.labels[y * 16 + x] = 1;
  }
  bitmap.labels[9 * 16 + 1] = 1;  // too few pixels to claim a token
  const auto mask = token_mask(bitmap, {4, 4}, 4);
  CHECK(std::count(mask.begin(), mask.end(), 1) == 8);
  for (size_t t = 0; t < 8; ++t) CHECK(mask[t] == 1);
  const std::vector<std::vector<uint8_t>> masks{mask, mask};
  const auto masked = pca_fit(both, 2, false, masks);
  Eigen::MatrixXd top(16, 6);
  top << layer_matrix(s1).topRows(8), layer_matrix(s2).topRows(8);
  CHECK((masked.components - pca_fit(top, 2, false).components).cwiseAbs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(token_mask(bitmap, {4, 4}, 8), DimensionError);
}

TEST_CASE("cosine similarity maps") {
  const Eigen::MatrixXd x = gaussian(16, 5, 9);
  const auto s = stack_from(x, {4, 4});
  const auto m = cosine_map(s, 6);
  CHECK(m.values[6] == doctest::Approx(1.0).epsilon(1e-6));
  for (double v : m.values) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
  Eigen::MatrixXd rescaled = x;
  for (long t = 0; t < 16; ++t) rescaled.row(t) *= 0.5 + double(t);
  const auto r = cosine_map(stack_from(rescaled, {4, 4}), 6);
  for (size_t t = 0; t < 16; ++t) CHECK(r.values[t] == doctest::Approx(m.values[t]).epsilon(1e-6));

  Eigen::MatrixXd same(16, 5);
  for (long t = 0; t < 16; ++t) same.row(t) << 1, -2, 3, 0.5, 1;
  for (double v : cosine_map(stack_from(same, {4, 4}), 3).values) CHECK(v == doctest::Approx(1.0).epsilon(1e-6));
  CHECK_THROWS_AS(cosine_map(s, 16), ValidationError);

  // A toroidal shift of the input shifts the map under wrap ALiBi.
  const auto model = vit::ViTModel<float>::random(toy(pe::PEKind::Alibi2D), 4);
  const auto img = io::texture_image(io::TextureKind::Voronoi, 32, 1, 2);
  const auto base = cosine_map(vit::forward_features(model, img, {}), 5);
  const auto moved = cosine_map(vit::forward_features(model, io::roll(img, 8, 16), {}), (1 + 1) * 4 + (1 + 2) % 4);
  double worst = 0;
  for (size_t r0 = 0; r0 < 4; ++r0) {
    for (size_t c0 = 0; c0 < 4; ++c0) {
      worst = std::max(worst, std::fabs(moved.values[((r0 + 1) % 4) * 4 + (c0 + 2) % 4] - base.values[r0 * 4 + c0]));
    }
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("k-means") {
  // Two well-separated blobs.
  Eigen::MatrixXd x = gaussian(200, 4, 21) * 0.1;
  for (long i = 100; i < 200; ++i) x.row(i).array() += 10.0;
  const auto r = kmeans(x, 2, {.seed = 3});
  size_t agree = 0;
  for (long i = 0; i < 200; ++i) agree += (r.labels[size_t(i)] == r.labels[0]) == (i < 100);
  CHECK(agree >= 198);
  CHECK(r.init_inertia.size() == 15);
  for (double v : r.init_inertia) CHECK(r.inertia <= v);
  CHECK(r.inertia == r.init_inertia[r.best_init]);
  for (size_t i = 0; i < r.best_init; ++i) CHECK(r.init_inertia[i] > r.inertia);
  const auto again = kmeans(x, 2, {.seed = 3, .threads = 1});
  CHECK(again.labels == r.labels);
  CHECK(again.inertia == r.inertia);

  // Inertia is the sum of squared distances to the returned centroids.
  const auto raw = kmeans(x, 3, {.standardize = false, .seed = 1});
  double recomputed = 0;
  for (long i = 0; i < x.rows(); ++i) {
    const int l = raw.labels[size_t(i)];
    CHECK(l >= 0);
    CHECK(l < 3);
    recomputed += (x.row(i) - raw.centroids.row(l)).squaredNorm();
  }
  CHECK(raw.inertia == doctest::Approx(recomputed).epsilon(1e-9));

  // k equal to the number of distinct points.
  Eigen::MatrixXd pts(12, 2);
  for (long i = 0; i < 12; ++i) pts.row(i) << double(i % 4), double((i % 4) * (i % 4));
  CHECK(kmeans(pts, 4, {.seed = 2}).inertia < 1e-12);
  CHECK_THROWS_AS(kmeans(pts, 13), ValidationError);
  CHECK_THROWS_AS(kmeans(pts, 0), ValidationError);

  const auto s = stack_from(x.topRows(16), {4, 4});
  CHECK(kmeans(s, 2, {.seed = 4}).labels.size() == 16);
}

TEST_CASE("zero-input diagnostic") {
  const auto model = vit::ViTModel<float>::random(toy(pe::PEKind::Alibi2D), 6);
  const std::vector<double> sigmas{0.0, 1e-4, 1e-3, 1e-2};
  const std::vector<uint64_t> seeds{1};
  const auto rows = zero_input_diagnostic(model, sigmas, seeds, 32);
  REQUIRE(rows.size() == 12);
  CHECK(rows[0].input == "zeros");
  CHECK(rows[4].input == "dots");
  CHECK(rows[8].input == "noise");
  // Identical tokens stay identical under any attention pattern, so neither
  // the zeros nor the patch-aligned dots pick up structure from ALiBi jitter.
  for (size_t i = 0; i < 8; ++i) CHECK(rows[i].token_std < 1e-5);
  const auto twice = zero_input_diagnostic(model, std::span(sigmas).first(1), seeds, 32);
  CHECK(twice[0].stack.layers == rows[0].stack.layers);
  CHECK(twice[2].stack.layers == rows[8].stack.layers);
  CHECK(rows[9].stack.layers != rows[8].stack.layers);

  // A learned encoding makes the zeros image position dependent.
  const auto learned = vit::ViTModel<float>::random(toy(pe::PEKind::Learned), 6);
  const auto lrows = zero_input_diagnostic(learned, sigmas, seeds, 32);
  CHECK(lrows[0].token_std > 1e-4);
  CHECK(lrows[3].stack.layers != lrows[0].stack.layers);
  for (const auto& r : rows) CHECK(std::isfinite(r.token_std));
}

TEST_CASE("resolution sweep") {
  const auto model = vit::ViTModel<float>::random(toy(pe::PEKind::Learned), 7);
  const auto img = io::texture_image(io::TextureKind::Blobs, 32, 1, 3);
  const std::vector<size_t> sizes{32, 64, 48};
  const auto sweep = resolution_sweep(model, img, sizes);
  REQUIRE(sweep.size() == 3);
  CHECK(sweep[0].stack.layers == vit::forward_features(model, img, {}).layers);
  CHECK(sweep[1].stack.grid == pe::GridShape{8, 8});
  CHECK(sweep[2].stack.grid == pe::GridShape{6, 6});
  const std::vector<size_t> bad{30};
  CHECK_THROWS_AS(resolution_sweep(model, img, bad), DimensionError);
  const auto alibi = vit::ViTModel<float>::random(toy(pe::PEKind::Alibi2D), 7);
  CHECK(resolution_sweep(alibi, img, sizes)[1].stack.tokens() == 64);
}

TEST_CASE("transformation robustness") {
  std::vector<io::Image> images;
  for (uint64_t s = 0; s < 2; ++s) images.push_back(io::texture_image(io::TextureKind::Voronoi, 32, 1, 30 + s));
  const auto transforms = default_transforms(8);
  for (auto kind : {pe::PEKind::Alibi2D, pe::PEKind::NoPE}) {
    const auto model = vit::ViTModel<float>::random(toy(kind), 8);
    const auto rows = equivariance_report(model, images, transforms);
    REQUIRE(rows.size() == 4);
    CHECK(rows[0].transform == "identity");
    CHECK(rows[0].discrepancy == 0.0);
    CHECK(rows[2].transform == "roll(16,8)");
    CHECK(rows[2].discrepancy < 1e-5);
    CHECK(rows[1].discrepancy > 1e-3);
  }
  // Patch content is not rotation invariant, and neither is a learned encoding.
  const distill::Teacher teacher = distill::synth_biased_teacher(3);
  std::vector<io::Image> big;
  for (uint64_t s = 0; s < 2; ++s) big.push_back(io::texture_image(io::TextureKind::Noise, 128, 1, 40 + s));
  const auto learned = equivariance_report(teacher.model, big, transforms);
  CHECK(learned[3].discrepancy > 0.1);
  CHECK(learned[2].discrepancy > 1e-3);

  const std::vector<io::Image> wide{io::Image(1, 16, 32, 0.3f)};
  const auto nope = vit::ViTModel<float>::random(toy(pe::PEKind::NoPE), 8);
  const auto skipped = equivariance_report(nope, wide, transforms);
  CHECK(skipped[3].skipped);
  CHECK_FALSE(skipped[3].note.empty());
  // Constant input under NoPE: every transform leaves the features alone.
  CHECK(skipped[1].discrepancy < 1e-6);

  const std::vector<TransformSpec> unaligned{{Transform::Roll, 3, 0}};
  CHECK_THROWS_AS(equivariance_report(nope, images, unaligned), ValidationError);
  CHECK(transform_from_string("rot90") == Transform::Rot90);
  CHECK_THROWS_AS(transform_from_string("shear"), ValidationError);
}
