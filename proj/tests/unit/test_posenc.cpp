// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstdlib>
#include <set>

#include "common/error.hpp"
#include "common/rng.hpp"
#include "doctest.h"
#include "posenc/pos_encoding.hpp"

using namespace dinolens;
using namespace dinolens::pe;

namespace {

// Independent oracle: loop over every pair, take the wrapped offset per axis
// and divide by the largest pair distance found by the same loop.
std::vector<double> brute_alibi(size_t h, size_t w, bool wrap) {
  const size_t n = h * w;
  std::vector<double> raw(n * n);
  double biggest = 0;
  for (size_t a = 0; a < n; ++a) {
    for (size_t b = 0; b < n; ++b) {
      long dr = std::labs(long(a / w) - long(b / w));
      long dc = std::labs(long(a % w) - long(b % w));
      if (wrap) {
        dr = std::min(dr, long(h) - dr);
        dc = std::min(dc, long(w) - dc);
      }
      raw[a * n + b] = std::sqrt(double(dr * dr + dc * dc));
      biggest = std::max(biggest, raw[a * n + b]);
    }
  }
  if (biggest > 0) {
    for (double& v : raw) v /= biggest;
  }
  return raw;
}

}  // namespace

TEST_CASE("build_alibi examples") {
  CHECK(build_alibi(1, 1, true) == std::vector<double>{0.0});

  auto d = build_alibi(2, 2, true);
  CHECK(d[1] == doctest::Approx(1 / std::sqrt(2.0)).epsilon(1e-12));
  CHECK(d[2] == doctest::Approx(1 / std::sqrt(2.0)).epsilon(1e-12));
  CHECK(d[3] == 1.0);
  for (size_t i = 0; i < 4; ++i) CHECK(d[i * 4 + i] == 0.0);

  auto e = build_alibi(3, 3, true);
  CHECK(e[1] == doctest::Approx(1 / std::sqrt(2.0)).epsilon(1e-12));
  CHECK(e[2] == e[1]);
  CHECK(max_grid_distance({3, 3}, true) == doctest::Approx(std::sqrt(2.0)));

  CHECK_THROWS_AS(build_alibi(0, 3, true), DimensionError);
  CHECK_THROWS_AS(build_alibi(2, 0, false), DimensionError);
}

TEST_CASE("build_alibi matches the pair-loop oracle and its invariants up to 8x8") {
  for (bool wrap : {true, false}) {
    for (size_t h = 1; h <= 8; ++h) {
      for (size_t w = 1; w <= 8; ++w) {
        const auto d = build_alibi(h, w, wrap);
        const auto oracle = brute_alibi(h, w, wrap);
        const size_t n = h * w;
        double top = 0;
        for (size_t i = 0; i < n * n; ++i) {
          CHECK(std::fabs(d[i] - oracle[i]) < 1e-12);
          CHECK(d[i] >= 0.0);
          CHECK(d[i] <= 1.0);
          top = std::max(top, d[i]);
        }
        if (n > 1) CHECK(top == 1.0);
        for (size_t i = 0; i < n; ++i) {
          CHECK(d[i * n + i] == 0.0);
          for (size_t j = 0; j < n; ++j) CHECK(d[i * n + j] == d[j * n + i]);
        }
        if (!wrap) continue;
        // toroidal shift invariance for every shift
        for (size_t sr = 0; sr < h; ++sr) {
          for (size_t sc = 0; sc < w; ++sc) {
            auto shift = [&](size_t t) { return ((t / w + sr) % h) * w + (t % w + sc) % w; };
            for (size_t i = 0; i < n; ++i) {
              for (size_t j = 0; j < n; ++j) CHECK(d[shift(i) * n + shift(j)] == d[i * n + j]);
            }
          }
        }
      }
    }
  }
}

TEST_CASE("unwrapped distances are not shift invariant at the border") {
  const auto d = build_alibi(4, 4, false);
  // (0,0)-(0,1) and the same pair shifted by 3 columns, which wraps around.
  CHECK(d[0 * 16 + 1] != d[3 * 16 + 0]);
}

TEST_CASE("alibi_logit_offset examples") {
  const auto zero = alibi_logit_offset(make_alibi({2, 2}, true, PerHeadSlopes::fixed(2, 0.0)), 1);
  for (double v : zero) CHECK(v == 0.0);
  const auto off = alibi_logit_offset(make_alibi({2, 2}, true, PerHeadSlopes::fixed(4)), 2);
  CHECK(off[0] == 0.0);
  CHECK(off[1] == doctest::Approx(-0.70711).epsilon(1e-5));
  CHECK(off[2] == doctest::Approx(-0.70711).epsilon(1e-5));
  CHECK(off[3] == -1.0);
}

TEST_CASE("jitter_alibi") {
  const AlibiBias bias = make_alibi({4, 4}, true, PerHeadSlopes::fixed(1));
  const auto same = jitter_alibi(bias, 0.0, 5, 3);
  REQUIRE(same.size() == 3);
  for (const auto& layer : same) CHECK(layer == bias.dist);

  const auto a = jitter_alibi(bias, 0.1, 1, 2);
  const auto b = jitter_alibi(bias, 0.1, 2, 2);
  double diff = 0;
  for (size_t i = 0; i < a[0].size(); ++i) diff = std::max(diff, std::fabs(a[0][i] - b[0][i]));
  CHECK(diff > 0);

  // law of large numbers on a single entry
  const double sigma = 0.2;
  const auto many = jitter_alibi(bias, sigma, 9, 10000);
  double mean = 0;
  for (const auto& layer : many) mean += layer[5];
  mean /= double(many.size());
  CHECK(std::fabs(mean - bias.dist[5]) < 3 * sigma / 100);
}

TEST_CASE("sinusoidal_pe") {
  const auto pe = sinusoidal_pe(4, 5, 16);
  CHECK(pe[0] == 0.0);
  CHECK(pe[1] == 1.0);
  for (size_t h = 1; h <= 32; h += 31) {
    const size_t w = 32;
    const auto big = sinusoidal_pe(h, w, 16);
    std::set<std::vector<double>> seen;
    for (size_t t = 0; t < h * w; ++t) seen.emplace(big.begin() + t * 16, big.begin() + (t + 1) * 16);
    CHECK(seen.size() == h * w);
  }
  const auto full = sinusoidal_pe(32, 32, 16);
  std::set<std::vector<double>> seen;
  for (size_t t = 0; t < 1024; ++t) seen.emplace(full.begin() + t * 16, full.begin() + (t + 1) * 16);
  CHECK(seen.size() == 1024);
  // a function of position only
  CHECK(sinusoidal_pe(4, 5, 16) == pe);
  CHECK_THROWS(sinusoidal_pe(4, 4, 6));
}

TEST_CASE("learned_pe_init and interpolate_pe") {
  const auto pe = learned_pe_init(6, 6, 32, 3);
  double sum = 0, sq = 0;
  for (double v : pe) {
    sum += v;
    sq += v * v;
  }
  const double n = double(pe.size());
  CHECK(std::fabs(sum / n) < 0.003);
  CHECK(std::sqrt(sq / n) == doctest::Approx(0.02).epsilon(0.1));

  const auto same = interpolate_pe(pe, {6, 6}, {6, 6}, 32);
  for (size_t i = 0; i < pe.size(); ++i) CHECK(std::fabs(same[i] - pe[i]) < 1e-6);

  const std::vector<double> flat(4 * 3, 0.25);
  for (double v : interpolate_pe(flat, {2, 2}, {5, 7}, 3)) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));

  const auto up = interpolate_pe(std::vector<double>{0, 1, 2, 3}, {2, 2}, {3, 3}, 1);
  CHECK(up[4] == doctest::Approx(1.5).epsilon(1e-12));
}

TEST_CASE("rope_rotate") {
  const size_t heads = 2, dh = 8;
  const GridShape grid{3, 4};
  const std::vector<double> zeros(heads * grid.tokens() * dh, 0.0);
  for (double v : rope_rotate(zeros, heads, grid, dh)) CHECK(v == 0.0);

  Rng rng(4);
  std::vector<double> x(zeros.size());
  for (double& v : x) v = rng.normal();
  const auto y = rope_rotate(x, heads, grid, dh);
  for (size_t p = 0; p < x.size(); p += 2) {
    CHECK(std::hypot(y[p], y[p + 1]) == doctest::Approx(std::hypot(x[p], x[p + 1])).epsilon(1e-12));
  }
}

TEST_CASE("rope scores depend only on the index difference along a token line") {
  const size_t dh = 16, n = 12;
  const GridShape line{1, n};
  Rng rng(5);
  std::vector<double> q(dh), k(dh);
  for (double& v : q) v = rng.normal();
  for (double& v : k) v = rng.normal();
  auto score_at = [&](size_t i, size_t j) {
    // place q at token i and k at token j of a one-head layout
    std::vector<double> qs(n * dh, 0.0), ks(n * dh, 0.0);
    std::copy(q.begin(), q.end(), qs.begin() + i * dh);
    std::copy(k.begin(), k.end(), ks.begin() + j * dh);
    const auto qr = rope_rotate(qs, 1, line, dh);
    const auto kr = rope_rotate(ks, 1, line, dh);
    double s = 0;
    for (size_t c = 0; c < dh; ++c) s += qr[i * dh + c] * kr[j * dh + c];
    return s;
  };
  for (size_t i = 0; i + 3 < n; ++i) {
    for (size_t j = 0; j + 3 < n; ++j) CHECK(score_at(i + 3, j + 3) == doctest::Approx(score_at(i, j)).epsilon(1e-9));
  }
}

TEST_CASE("wrapped offsets commute with toroidal token permutations") {
  const size_t h = 5, w = 3, n = h * w;
  const auto d = build_alibi(h, w, true);
  for (size_t s = 0; s < n; ++s) {
    auto perm = [&](size_t t) { return ((t / w + s / w) % h) * w + (t % w + s % w) % w; };
    for (size_t i = 0; i < n; ++i) {
      for (size_t j = 0; j < n; ++j) CHECK(-d[perm(i) * n + perm(j)] == -d[i * n + j]);
    }
  }
}

TEST_CASE("pe kind names round-trip") {
  for (PEKind k : {PEKind::Learned, PEKind::Sinusoidal, PEKind::NoPE, PEKind::RoPE2D, PEKind::Alibi2D}) {
    CHECK(pe_kind_from_string(to_string(k)) == k);
  }
  CHECK_THROWS(pe_kind_from_string("bogus"));
}
