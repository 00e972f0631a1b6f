// SPDX-License-Identifier: Apache-2.0
#include "seg/gbt.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "common/error.hpp"
#include "common/rng.hpp"

namespace dinolens::seg {

void GbtParams::validate() const {
  if (n_trees == 0) throw ValidationError("n_trees must be at least 1");
  if (max_depth == 0) throw ValidationError("max_depth must be at least 1");
  if (!(learning_rate > 0)) throw ValidationError("learning_rate must be positive");
  if (lambda < 0 || min_child_weight < 0) throw ValidationError("lambda and min_child_weight must be non-negative");
  if (!(subsample > 0 && subsample <= 1)) throw ValidationError("subsample must be in (0, 1]");
}

double Tree::eval(const float* row) const {
  int n = 0;
  while (feature[size_t(n)] >= 0) {
    n = row[feature[size_t(n)]] < threshold[size_t(n)] ? left[size_t(n)] : right[size_t(n)];
  }
  return value[size_t(n)];
}

size_t Tree::depth() const {
  std::vector<size_t> d(feature.size(), 0);
  size_t best = 0;
  for (size_t i = 0; i < feature.size(); ++i) {
    if (feature[i] < 0) continue;
    d[size_t(left[i])] = d[size_t(right[i])] = d[i] + 1;
    best = std::max(best, d[i] + 1);
  }
  return best;
}

namespace {

struct Split {
  double gain = 0.0;
  int feature = -1;
  float threshold = 0.0f;
};

// Level-wise growth. `order[f]` lists the rows sorted by feature f; a single
// pass per feature finds the best split of every node on the current level.
Tree grow(std::span<const float> x, size_t nf, const std::vector<std::vector<uint32_t>>& order,
          std::span<const double> g, std::span<const double> h, std::span<const char> in_sample, const GbtParams& p) {
  const size_t n = g.size();
  Tree t;
  auto new_node = [&]() {
    t.feature.push_back(-1);
    t.threshold.push_back(0.0f);
    t.left.push_back(-1);
    t.right.push_back(-1);
    t.value.push_back(0.0);
    return int(t.feature.size() - 1);
  };
  std::vector<int> node_of(n, -1);
  new_node();
  for (size_t i = 0; i < n; ++i) {
    if (in_sample[i]) node_of[i] = 0;
  }
  std::vector<int> level{0};
  for (size_t depth = 0; !level.empty(); ++depth) {
    // Node totals.
    std::vector<double> G(t.feature.size(), 0.0), H(t.feature.size(), 0.0);
    for (size_t i = 0; i < n; ++i) {
      if (node_of[i] >= 0) {
        G[size_t(node_of[i])] += g[i];
        H[size_t(node_of[i])] += h[i];
      }
    }
    for (int node : level) t.value[size_t(node)] = -G[size_t(node)] / (H[size_t(node)] + p.lambda) * p.learning_rate;
    if (depth == p.max_depth) break;

    std::vector<Split> best(t.feature.size());
    std::vector<double> gl(t.feature.size()), hl(t.feature.size());
    std::vector<float> prev(t.feature.size());
    std::vector<char> seen(t.feature.size());
    for (size_t f = 0; f < nf; ++f) {
      std::fill(gl.begin(), gl.end(), 0.0);
      std::fill(hl.begin(), hl.end(), 0.0);
      std::fill(seen.begin(), seen.end(), 0);
      for (uint32_t i : order[f]) {
        const int node = node_of[i];
        if (node < 0) continue;
        const size_t k = size_t(node);
        const float v = x[size_t(i) * nf + f];
        if (seen[k] && v > prev[k]) {
          const double hr = H[k] - hl[k];
          if (hl[k] >= p.min_child_weight && hr >= p.min_child_weight) {
            const double gr = G[k] - gl[k];
            const double gain = 0.5 * (gl[k] * gl[k] / (hl[k] + p.lambda) + gr * gr / (hr + p.lambda) -
                                       G[k] * G[k] / (H[k] + p.lambda));
            if (gain > best[k].gain) {
              float thr = prev[k] + (v - prev[k]) / 2.0f;
              if (!(thr > prev[k])) thr = v;
              best[k] = {gain, int(f), thr};
            }
          }
        }
        gl[k] += g[i];
        hl[k] += h[i];
        prev[k] = v;
        seen[k] = 1;
      }
    }
    std::vector<int> next;
    for (int node : level) {
      const Split& s = best[size_t(node)];
      if (s.feature < 0 || s.gain <= p.min_gain) continue;
      const int l = new_node(), r = new_node();
      t.feature[size_t(node)] = s.feature;
      t.threshold[size_t(node)] = s.threshold;
      t.left[size_t(node)] = l;
      t.right[size_t(node)] = r;
      next.push_back(l);
      next.push_back(r);
    }
    for (size_t i = 0; i < n; ++i) {
      const int node = node_of[i];
      if (node < 0) continue;
      const size_t k = size_t(node);
      if (t.feature[k] < 0) {
        node_of[i] = -1;  // settled in a leaf
      } else {
        node_of[i] = x[i * nf + size_t(t.feature[k])] < t.threshold[k] ? t.left[k] : t.right[k];
      }
    }
    level = std::move(next);
  }
  return t;
}

}  // namespace

GbtClassifier GbtClassifier::fit(std::span<const float> x, size_t features, std::span<const int> labels,
                                 size_t classes, const GbtParams& params) {
  params.validate();
  if (features == 0 || x.size() != labels.size() * features) {
    throw DimensionError("feature matrix is " + std::to_string(x.size()) + " values for " +
                         std::to_string(labels.size()) + " rows of " + std::to_string(features));
  }
  if (classes < 2) throw ValidationError("need at least two classes");
  std::vector<size_t> count(classes, 0);
  for (int l : labels) {
    if (l < 0 || size_t(l) >= classes) throw ValidationError("label " + std::to_string(l) + " out of range");
    ++count[size_t(l)];
  }
  for (size_t c = 0; c < classes; ++c) {
    if (count[c] == 0) throw ValidationError("class " + std::to_string(c) + " has no training rows");
  }
  for (float v : x) {
    if (!std::isfinite(v)) throw NumericError("non-finite feature value");
  }
  const size_t n = labels.size();
  std::vector<std::vector<uint32_t>> order(features, std::vector<uint32_t>(n));
  for (size_t f = 0; f < features; ++f) {
    std::iota(order[f].begin(), order[f].end(), 0u);
    std::stable_sort(order[f].begin(), order[f].end(),
                     [&](uint32_t a, uint32_t b) { return x[a * features + f] < x[b * features + f]; });
  }

  GbtClassifier model;
  model.classes_ = classes;
  model.features_ = features;
  std::vector<double> raw(n * classes, 0.0), prob(n * classes);
  std::vector<double> g(n), h(n);
  std::vector<char> in_sample(n, 1);
  for (size_t round = 0; round < params.n_trees; ++round) {
    if (params.subsample < 1.0) {
      Rng rng(derive_seed(params.seed, round));
      for (size_t i = 0; i < n; ++i) in_sample[i] = rng.uniform() < params.subsample;
    }
    for (size_t i = 0; i < n; ++i) {
      const double* r = &raw[i * classes];
      const double m = *std::max_element(r, r + classes);
      double z = 0;
      for (size_t c = 0; c < classes; ++c) z += std::exp(r[c] - m);
      for (size_t c = 0; c < classes; ++c) prob[i * classes + c] = std::exp(r[c] - m) / z;
    }
    for (size_t c = 0; c < classes; ++c) {
      for (size_t i = 0; i < n; ++i) {
        const double pr = prob[i * classes + c];
        g[i] = pr - (size_t(labels[i]) == c ? 1.0 : 0.0);
        h[i] = std::max(pr * (1.0 - pr), 1e-16);
      }
      Tree t = grow(x, features, order, g, h, in_sample, params);
      for (size_t i = 0; i < n; ++i) raw[i * classes + c] += t.eval(&x[i * features]);
      model.trees_.push_back(std::move(t));
    }
  }
  return model;
}

void GbtClassifier::scores(const float* row, double* out) const {
  std::fill(out, out + classes_, 0.0);
  for (size_t i = 0; i < trees_.size(); ++i) out[i % classes_] += trees_[i].eval(row);
}

int GbtClassifier::predict(const float* row) const {
  std::vector<double> s(classes_);
  scores(row, s.data());
  int best = 0;
  for (size_t c = 1; c < classes_; ++c) {
    if (s[c] > s[size_t(best)]) best = int(c);
  }
  return best;
}

}  // namespace dinolens::seg
