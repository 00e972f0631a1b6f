// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>

#include "common/error.hpp"
#include "doctest.h"
#include "io/binary.hpp"
#include "io/feat1.hpp"
#include "io/image.hpp"
#include "io/synthetic.hpp"

using namespace dinolens;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "dinolens_test_io";
  fs::create_directories(dir);
  return dir / name;
}

vit::FeatureStack small_stack() {
  vit::FeatureStack s;
  s.image_id = "x";
  s.grid = {2, 3};
  s.channels = 4;
  s.layer_ids = {0, 1};
  for (size_t l = 0; l < 2; ++l) {
    std::vector<float> v(24);
    for (size_t i = 0; i < v.size(); ++i) v[i] = float(l * 100 + i) * 0.5f - 3.0f;
    s.layers.push_back(v);
  }
  return s;
}

}  // namespace

TEST_CASE("FEAT1 header layout and round trip") {
  const auto stack = small_stack();
  const auto bytes = io::feat1_encode(stack);
  REQUIRE(bytes.size() == 26 + 2 * 6 * 4 * 4);
  CHECK(std::string(bytes.begin(), bytes.begin() + 5) == "FEAT1");
  CHECK(bytes[5] == 0);
  CHECK(bytes[6] == 1);
  CHECK(bytes[7] == 0);
  CHECK(io::get_u32(bytes, 10) == 2);
  CHECK(io::get_u32(bytes, 14) == 2);
  CHECK(io::get_u32(bytes, 18) == 3);
  CHECK(io::get_u32(bytes, 22) == 4);
  // first payload value: layer 0, row 0, col 0, channel 0
  CHECK(io::get_f32(bytes, 26) == -3.0f);

  const auto back = io::feat1_decode(bytes);
  CHECK(back.grid == stack.grid);
  CHECK(back.channels == 4);
  CHECK(back.layers == stack.layers);

  const fs::path p = scratch("img7.feat");
  io::feat1_write(stack, p);
  const auto file = io::feat1_read(p);
  CHECK(file.image_id == "img7");
  CHECK(file.layers == stack.layers);
}

TEST_CASE("FEAT1 rejects malformed input") {
  auto bytes = io::feat1_encode(small_stack());
  {
    auto bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(io::feat1_decode(bad), FormatError);
  }
  {
    auto bad = bytes;
    bad[6] = 2;
    CHECK_THROWS_AS(io::feat1_decode(bad), FormatError);
  }
  {
    auto bad = bytes;
    bad[7] = 1;
    CHECK_THROWS_AS(io::feat1_decode(bad), FormatError);
  }
  {
    auto bad = bytes;
    bad.pop_back();
    try {
      io::feat1_decode(bad);
      FAIL("expected a format error");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find(std::to_string(bytes.size())) != std::string::npos);
    }
  }
  CHECK_THROWS_AS(io::feat1_decode(std::vector<uint8_t>(10, 0)), FormatError);
}

TEST_CASE("PNG and PGM round trips") {
  const size_t h = 5, w = 7;
  std::vector<uint8_t> gray(h * w);
  for (size_t i = 0; i < gray.size(); ++i) gray[i] = uint8_t(i * 7);
  const fs::path png = scratch("g.png");
  io::write_png_gray(png, h, w, gray);
  const auto img = io::read_image(png);
  REQUIRE(img.channels == 1);
  REQUIRE(img.height == h);
  REQUIRE(img.width == w);
  for (size_t i = 0; i < gray.size(); ++i) CHECK(img.data[i] == doctest::Approx(gray[i] / 255.0f));

  const fs::path pgm = scratch("g.pgm");
  io::write_pgm(pgm, h, w, gray);
  const auto img2 = io::read_image(pgm);
  CHECK(img2.data == img.data);

  io::LabelImage labels(h, w);
  for (size_t i = 0; i < labels.labels.size(); ++i) labels.labels[i] = uint8_t(i % 3);
  const fs::path lp = scratch("l.png");
  io::write_png_indexed(lp, labels);
  CHECK(io::read_labels(lp).labels == labels.labels);

  CHECK_THROWS(io::read_image(scratch("missing.png")));
}

TEST_CASE("geometric image transforms") {
  io::Image im(1, 4, 4);
  for (size_t i = 0; i < 16; ++i) im.data[i] = float(i);
  const auto r = io::roll(im, 1, 2);
  CHECK(r.at(0, 1, 2) == im.at(0, 0, 0));
  CHECK(r.at(0, 0, 1) == im.at(0, 3, 3));
  CHECK(io::roll(im, 4, -8).data == im.data);
  CHECK(io::flip_ud(io::flip_ud(im)).data == im.data);
  CHECK(io::rot90(io::rot90(io::rot90(io::rot90(im)))).data == im.data);
  const auto q = io::rot90(im);
  // counter-clockwise: the top-right corner moves to the top-left
  CHECK(q.at(0, 0, 0) == im.at(0, 0, 3));

  const auto same = io::resize_bilinear(im, 4, 4);
  CHECK(same.data == im.data);
  const auto cc = io::resize_center_crop(io::Image(1, 20, 40, 0.5f), 10);
  CHECK(cc.height == 10);
  CHECK(cc.width == 10);
  for (float v : cc.data) CHECK(v == doctest::Approx(0.5f));
}

TEST_CASE("synthetic generators are reproducible") {
  for (auto kind : {io::TextureKind::Noise, io::TextureKind::Voronoi, io::TextureKind::Blobs, io::TextureKind::Stripes}) {
    const auto a = io::texture_image(kind, 32, 1, 5);
    const auto b = io::texture_image(kind, 32, 1, 5);
    CHECK(a.data == b.data);
    for (float v : a.data) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }
  const auto set = io::two_phase_set(2, 32, 3);
  REQUIRE(set.size() == 2);
  size_t pores = 0;
  for (uint8_t l : set[0].truth.labels) {
    CHECK((l == 1 || l == 2));
    pores += l == 1;
  }
  CHECK(pores > 0);
  CHECK(pores < set[0].truth.labels.size());
}
