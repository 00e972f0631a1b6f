// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <set>

#include "common/error.hpp"
#include "common/rng.hpp"
#include "doctest.h"
#include "io/synthetic.hpp"
#include "seg/segment.hpp"

using namespace dinolens;
using namespace dinolens::seg;

namespace {

io::Image random_image(size_t h, size_t w, uint64_t seed) {
  Rng rng(seed);
  io::Image im(1, h, w);
  for (float& v : im.data) v = float(rng.uniform());
  return im;
}

size_t channel_index(const FeatureBank& b, const std::string& name) {
  for (size_t i = 0; i < b.names.size(); ++i) {
    if (b.names[i] == name) return i;
  }
  FAIL("missing channel " << name);
  return 0;
}

io::LabelImage bands(size_t h, size_t w, size_t classes) {
  io::LabelImage l(h, w);
  for (size_t y = 0; y < h; ++y) {
    for (size_t x = 0; x < w; ++x) l.at(y, x) = uint8_t(1 + x * classes / w);
  }
  return l;
}

}  // namespace

TEST_CASE("gaussian kernel and reflection") {
  CHECK(gaussian_kernel(0).size() == 1);
  const auto k = gaussian_kernel(2);
  CHECK(k.size() == 17);
  double s = 0;
  for (double v : k) s += v;
  CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(reflect_index(-1, 5) == 0);
  CHECK(reflect_index(-2, 5) == 1);
  CHECK(reflect_index(5, 5) == 4);
  CHECK(reflect_index(6, 5) == 3);
  CHECK(reflect_index(10, 5) == 0);
  CHECK_THROWS_AS(gaussian_kernel(-1), ValidationError);
}

TEST_CASE("blur of an impulse matches the separable weight product") {
  const size_t n = 21;
  std::vector<double> im(n * n, 0.0);
  im[10 * n + 10] = 1.0;
  const auto out = gaussian_blur(im, n, n, 1.0);
  double z = 0;
  for (int i = -4; i <= 4; ++i) z += std::exp(-i * i / 2.0);
  const double w0 = 1.0 / z, w1 = std::exp(-0.5) / z;
  CHECK(out[10 * n + 10] == doctest::Approx(w0 * w0).epsilon(1e-12));
  CHECK(out[10 * n + 11] == doctest::Approx(w0 * w1).epsilon(1e-12));
  CHECK(out[11 * n + 11] == doctest::Approx(w1 * w1).epsilon(1e-12));
}

TEST_CASE("blur preserves the mean") {
  const auto im = random_image(40, 56, 3);
  std::vector<double> raw(im.data.begin(), im.data.end());
  double m0 = 0;
  for (double v : raw) m0 += v;
  m0 /= double(raw.size());
  for (double sigma : {1.0, 4.0, 16.0}) {
    const auto b = gaussian_blur(raw, 40, 56, sigma);
    double m = 0;
    for (double v : b) m += v;
    CHECK(m / double(b.size()) == doctest::Approx(m0).epsilon(1e-6));
  }
}

TEST_CASE("line kernels") {
  const auto horiz = line_kernel(kLineLength, 0.0);
  size_t nonzero = 0;
  for (size_t x = 0; x < kLineLength; ++x) nonzero += horiz[(kLineLength / 2) * kLineLength + x] > 0;
  CHECK(nonzero == kLineLength);
  double s = 0;
  for (double v : line_kernel(kLineLength, 0.7)) s += v;
  CHECK(s == doctest::Approx(1.0));
  CHECK_THROWS_AS(line_kernel(4, 0.0), DimensionError);
}

TEST_CASE("classical bank on a constant image") {
  io::Image im(1, 24, 30, 0.4f);
  const auto b = classical_bank(im, "c");
  CHECK(b.features() == 61);
  CHECK(b.pixels() == 24 * 30);
  CHECK(std::set<std::string>(b.names.begin(), b.names.end()).size() == b.names.size());
  for (size_t f = 0; f < b.features(); ++f) {
    const auto& name = b.names[f];
    const bool flat = name.find("sobel") != std::string::npos || name.find("_h") != std::string::npos ||
                      name.rfind("dog_", 0) == 0 || name == "membrane_std";
    const double expect = flat ? 0.0 : (name.rfind("membrane_", 0) == 0 || name.find("blur") != std::string::npos ? 0.4 : -1);
    if (expect < 0) continue;
    for (size_t p = 0; p < b.pixels(); ++p) {
      if (std::fabs(b.at(p, f) - expect) > 1e-5) {
        FAIL_CHECK(name << " at " << p << " = " << b.at(p, f));
        break;
      }
    }
  }
}

TEST_CASE("classical bank is translation equivariant away from the border") {
  const size_t h = 96, w = 96;
  const auto im = random_image(h, w, 5);
  const auto shifted = io::roll(im, 3, -5);
  const auto a = classical_bank(im), b = classical_bank(shifted);
  // Small-support channels only; sigma 16 reaches 64 px and has no interior here.
  for (const std::string name : {"g0_sobel", "g1_blur", "g2_heig1", "dog_1_2", "membrane_max"}) {
    const size_t f = channel_index(a, name);
    double worst = 0;
    for (size_t y = 16; y < h - 16; ++y) {
      for (size_t x = 16; x < w - 16; ++x) {
        const double va = a.at(y * w + x, f), vb = b.at((y + 3) * w + (x - 5), f);
        worst = std::max(worst, std::fabs(va - vb));
      }
    }
    CHECK_MESSAGE(worst < 1e-5, name);
  }
}

TEST_CASE("upsampling a token grid") {
  const pe::GridShape g{4, 5};
  std::vector<double> grid(g.tokens());
  for (size_t i = 0; i < grid.size(); ++i) grid[i] = double(i * i % 7);
  const size_t patch = 3;
  const auto up = upsample_grid(grid, g, g.rows * patch, g.cols * patch);
  // Odd patch: the centre pixel of each patch sits on a token node.
  for (size_t r = 0; r < g.rows; ++r) {
    for (size_t c = 0; c < g.cols; ++c) {
      CHECK(up[(r * patch + 1) * g.cols * patch + c * patch + 1] == doctest::Approx(grid[r * g.cols + c]));
    }
  }
  const auto flat = upsample_grid(std::vector<double>(g.tokens(), 2.5), g, 17, 23);
  for (double v : flat) CHECK(v == doctest::Approx(2.5));
  CHECK_THROWS_AS(upsample_grid(grid, {3, 3}, 9, 9), DimensionError);
}

TEST_CASE("deep bank follows a toroidal shift of a wrapped ALiBi model") {
  vit::ViTConfig c;
  c.dim = 32;
  c.heads = 4;
  c.layers = 2;
  c.pe_kind = pe::PEKind::Alibi2D;
  const auto model = vit::ViTModel<float>::random(c, 12);
  const size_t n = 64, p = c.patch;
  const auto im = random_image(n, n, 9);
  const auto a = deep_bank(model, im, 9, "a");
  const auto b = deep_bank(model, io::roll(im, long(p), long(p)), 9, "b");
  CHECK(a.features() == 9);
  CHECK(std::set<std::string>(a.names.begin(), a.names.end()).size() == 9);
  for (size_t f = 0; f < 9; ++f) {
    double worst = 0;
    for (size_t y = 2 * p; y < n - 2 * p; ++y) {
      for (size_t x = 2 * p; x < n - 2 * p; ++x) {
        worst = std::max(worst, double(std::fabs(a.at(y * n + x, f) - b.at((y + p) * n + x + p, f))));
      }
    }
    CHECK_MESSAGE(worst < 1e-4, a.names[f] << " worst " << worst);
  }
}

TEST_CASE("boosted trees separate and memorize") {
  std::vector<float> x;
  std::vector<int> y;
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    const float v = float(rng.uniform());
    x.push_back(float(rng.uniform()));  // distractor
    x.push_back(v);
    y.push_back(v > 0.5f ? 1 : 0);
  }
  GbtParams p;
  p.n_trees = 10;
  const auto gbt = GbtClassifier::fit(x, 2, y, 2, p);
  size_t ok = 0;
  for (size_t i = 0; i < y.size(); ++i) ok += gbt.predict(&x[i * 2]) == y[i];
  CHECK(ok == y.size());
  CHECK(gbt.trees().size() == 20);
  for (const auto& t : gbt.trees()) CHECK(t.depth() <= p.max_depth);
  // The first split of the first tree uses the informative feature.
  CHECK(gbt.trees()[0].feature[0] == 1);

  // Random labels on distinct points, three classes.
  std::vector<float> xm;
  std::vector<int> ym;
  for (int i = 0; i < 300; ++i) {
    for (int f = 0; f < 3; ++f) xm.push_back(float(rng.uniform()));
    ym.push_back(int(rng.below(3)));
  }
  GbtParams deep;
  deep.n_trees = 60;
  deep.max_depth = 10;
  deep.min_child_weight = 0;
  const auto mem = GbtClassifier::fit(xm, 3, ym, 3, deep);
  size_t hit = 0;
  for (size_t i = 0; i < ym.size(); ++i) hit += mem.predict(&xm[i * 3]) == ym[i];
  CHECK(hit == ym.size());

  const auto again = GbtClassifier::fit(xm, 3, ym, 3, deep);
  std::vector<double> s1(3), s2(3);
  for (size_t i = 0; i < ym.size(); ++i) {
    mem.scores(&xm[i * 3], s1.data());
    again.scores(&xm[i * 3], s2.data());
    CHECK(s1 == s2);
  }
}

TEST_CASE("boosted tree input validation") {
  std::vector<float> x{0, 1, 2};
  std::vector<int> y{0, 0, 0};
  CHECK_THROWS_AS(GbtClassifier::fit(x, 1, y, 2, {}), ValidationError);
  y = {0, 1, 2};
  CHECK_THROWS_AS(GbtClassifier::fit(x, 1, y, 2, {}), ValidationError);
  y = {0, 1, 1};
  CHECK_THROWS_AS(GbtClassifier::fit(x, 2, y, 2, {}), DimensionError);
  x[1] = NAN;
  CHECK_THROWS_AS(GbtClassifier::fit(x, 1, y, 2, {}), NumericError);
  GbtParams bad;
  bad.subsample = 0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("mIoU examples") {
  io::LabelImage t(2, 4);
  t.labels = {1, 1, 2, 2, 1, 1, 2, 2};
  CHECK(miou(t, t, 2) == 1.0);
  io::LabelImage swapped = t;
  for (auto& l : swapped.labels) l = uint8_t(3 - l);
  CHECK(miou(swapped, t, 2) == 0.0);
  // Two pixels each way: each class has intersection 2 and union 6.
  io::LabelImage four = t;
  four.labels = {2, 1, 1, 2, 2, 1, 1, 2};
  CHECK(miou(four, t, 2) == doctest::Approx(1.0 / 3.0));
  const auto d = miou_detail(t, t, 3);
  CHECK(d.absent == std::vector<bool>{false, false, true});
  CHECK(d.value == 1.0);
  CHECK_THROWS_AS(miou(t, io::LabelImage(2, 3), 2), DimensionError);
}

TEST_CASE("generated scribbles stay inside their class") {
  size_t strokes = 0;
  for (uint64_t img = 0; img < 5; ++img) {
    const auto truth = bands(40, 60, 3);
    const auto s = synth_scribbles(truth, 1, derive_seed(21, img), 3);
    strokes += s.strokes.size();
    CHECK(s.provenance == "generated");
    for (const auto& st : s.strokes) {
      CHECK(st.pixels.size() == kScribbleLength);
      CHECK(std::set<size_t>(st.pixels.begin(), st.pixels.end()).size() == st.pixels.size());
      for (size_t p : st.pixels) {
        CHECK(truth.labels[p] == st.cls);
        CHECK(s.labels.labels[p] == st.cls);
      }
    }
    const auto again = synth_scribbles(truth, 1, derive_seed(21, img), 3);
    CHECK(again.labels.labels == s.labels.labels);
  }
  CHECK(strokes == 15);

  // A one-pixel class yields a one-pixel stroke.
  io::LabelImage tiny(5, 5, 1);
  tiny.at(2, 2) = 2;
  const auto s = synth_scribbles(tiny, 1, 3, 2);
  REQUIRE(s.strokes.size() == 2);
  CHECK(s.strokes[1].pixels == std::vector<size_t>{12});
}

TEST_CASE("label merge and transforms") {
  io::LabelImage a(2, 2), b(2, 2);
  a.labels = {1, 0, 2, 0};
  b.labels = {0, 2, 1, 0};
  CHECK(merge_labels(a, b).labels == std::vector<uint8_t>{1, 2, 1, 0});
  const auto l = bands(8, 8, 3);
  for (const auto& t : analysis::default_transforms(2)) {
    CHECK(invert_labels(t, transform_labels(t, l)).labels == l.labels);
  }
}

TEST_CASE("segmenter on two-phase images") {
  const auto train = io::two_phase_set(2, 64, 31);
  const auto test = io::two_phase_set(2, 64, 32);
  std::vector<FeatureBank> banks;
  std::vector<io::LabelImage> labels;
  for (size_t i = 0; i < train.size(); ++i) {
    banks.push_back(build_bank(train[i].image, nullptr, train[i].id));
    labels.push_back(synth_scribbles(train[i].truth, 1, i, 2).labels);
  }
  GbtParams p;
  p.n_trees = 20;
  const auto seg = fit_segmenter(banks, labels, 2, p);
  CHECK(seg.feature_names.size() == 61);
  const auto pred = predict_map(seg, build_bank(test[0].image, nullptr), 2);
  for (uint8_t v : pred.labels) CHECK((v == 1 || v == 2));
  CHECK(predict_map(seg, build_bank(test[0].image, nullptr), 1).labels == pred.labels);

  // Remove every class-2 scribble: the error names the class.
  for (auto& l : labels) {
    for (auto& v : l.labels) v = v == 2 ? 0 : v;
  }
  try {
    fit_segmenter(banks, labels, 2, p);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("2") != std::string::npos);
  }
}

TEST_CASE("scribble-round benchmark shape") {
  const auto train = io::two_phase_set(2, 48, 41);
  const auto test = io::two_phase_set(2, 48, 42);
  vit::ViTConfig c;
  c.dim = 32;
  c.heads = 4;
  c.layers = 2;
  c.pe_kind = pe::PEKind::Alibi2D;
  const auto model = vit::ViTModel<float>::random(c, 3);
  const std::vector<BenchConfig> configs{{"classical", nullptr}, {"alibi", &model}};
  GbtParams p;
  p.n_trees = 10;
  const auto r = scribble_rounds_bench(train, test, 3, configs, p, 5, 2, 2);
  CHECK(r.configs == std::vector<std::string>{"classical", "alibi"});
  REQUIRE(r.miou.size() == 2);
  for (const auto& curve : r.miou) {
    REQUIRE(curve.size() == 3);
    for (double v : curve) CHECK((v >= 0.0 && v <= 1.0));
  }
  CHECK(r.scribbles == std::vector<size_t>{4, 4, 4});
  CHECK(r.labeled_pixels[0] < r.labeled_pixels[2]);
  const auto again = scribble_rounds_bench(train, test, 3, configs, p, 5, 2, 1);
  CHECK(again.miou == r.miou);
  CHECK_THROWS_AS(scribble_rounds_bench(train, test, 0, configs, p, 5), ValidationError);
}
