// SPDX-License-Identifier: Apache-2.0
#include "analysis/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

#include "common/error.hpp"
#include "common/parallel.hpp"
#include "common/rng.hpp"
#include "io/synthetic.hpp"

namespace dinolens::analysis {

namespace {

size_t resolve_layer(const vit::FeatureStack& s, int layer) {
  const long count = long(s.layer_count());
  const long idx = layer < 0 ? count + layer : layer;
  if (idx < 0 || idx >= count) {
    throw DimensionError("layer " + std::to_string(layer) + " out of range for " + std::to_string(count) + " layers");
  }
  return size_t(idx);
}

}  // namespace

Eigen::MatrixXd layer_matrix(const vit::FeatureStack& stack, int layer) {
  const auto view = stack.layer(resolve_layer(stack, layer));
  Eigen::MatrixXd m(view.tokens(), view.channels);
  for (size_t t = 0; t < view.tokens(); ++t) {
    for (size_t c = 0; c < view.channels; ++c) m(long(t), long(c)) = view.at(t, c);
  }
  return m;
}

// ---- PCA ---------------------------------------------------------------------

PcaModel pca_fit(const Eigen::MatrixXd& x, size_t d, bool standardize) {
  const long n = x.rows(), c = x.cols();
  if (d == 0 || d > size_t(c)) {
    throw ValidationError("PCA needs 1 <= d <= " + std::to_string(c) + ", got " + std::to_string(d));
  }
  if (n < 1) throw DegenerateError("PCA on an empty token set");
  PcaModel m;
  m.standardize = standardize;
  m.mean = x.colwise().mean();
  Eigen::MatrixXd z = x.rowwise() - m.mean;
  m.scale = Eigen::RowVectorXd::Ones(c);
  if (standardize) {
    for (long j = 0; j < c; ++j) {
      const double sd = std::sqrt(z.col(j).squaredNorm() / double(n));
      if (sd > 0) m.scale(j) = sd;
    }
    z = z.array().rowwise() / m.scale.array();
  }
  const Eigen::MatrixXd cov = (z.transpose() * z) / double(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw NumericError("PCA eigen-decomposition failed");
  const double total = std::max(cov.trace(), 0.0);
  m.components.resize(long(d), c);
  for (size_t k = 0; k < d; ++k) {
    const long idx = c - 1 - long(k);  // eigenvalues ascend
    Eigen::VectorXd v = eig.eigenvectors().col(idx);
    long arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    m.components.row(long(k)) = v.transpose();
    m.explained.push_back(total > 0 ? std::max(eig.eigenvalues()(idx), 0.0) / total : 0.0);
  }
  return m;
}

PcaModel pca_fit(std::span<const vit::FeatureStack> stacks, size_t d, bool standardize,
                 std::span<const std::vector<uint8_t>> masks, int layer) {
  if (stacks.empty()) throw ValidationError("PCA needs at least one feature stack");
  if (!masks.empty() && masks.size() != stacks.size()) {
    throw ValidationError("one token mask per feature stack is required");
  }
  size_t rows = 0;
  for (size_t i = 0; i < stacks.size(); ++i) {
    if (stacks[i].channels != stacks[0].channels) throw DimensionError("stacks differ in channel count");
    if (masks.empty()) {
      rows += stacks[i].tokens();
    } else {
      if (masks[i].size() != stacks[i].tokens()) {
        throw DimensionError("mask for '" + stacks[i].image_id + "' has " + std::to_string(masks[i].size()) +
                             " entries for " + std::to_string(stacks[i].tokens()) + " tokens");
      }
      rows += size_t(std::count_if(masks[i].begin(), masks[i].end(), [](uint8_t v) { return v != 0; }));
    }
  }
  Eigen::MatrixXd x(long(rows), long(stacks[0].channels));
  long r = 0;
  for (size_t i = 0; i < stacks.size(); ++i) {
    const auto view = stacks[i].layer(resolve_layer(stacks[i], layer));
    for (size_t t = 0; t < view.tokens(); ++t) {
      if (!masks.empty() && !masks[i][t]) continue;
      for (size_t c = 0; c < view.channels; ++c) x(r, long(c)) = view.at(t, c);
      ++r;
    }
  }
  return pca_fit(x, d, standardize);
}

Eigen::MatrixXd pca_transform(const PcaModel& model, const Eigen::MatrixXd& x) {
  if (x.cols() != model.mean.size()) throw DimensionError("PCA transform: channel count mismatch");
  const Eigen::MatrixXd z = (x.rowwise() - model.mean).array().rowwise() / model.scale.array();
  return z * model.components.transpose();
}

Eigen::MatrixXd pca_inverse(const PcaModel& model, const Eigen::MatrixXd& scores) {
  if (scores.cols() != model.components.rows()) throw DimensionError("PCA inverse: component count mismatch");
  const Eigen::MatrixXd z = scores * model.components;
  return (z.array().rowwise() * model.scale.array()).matrix().rowwise() + model.mean;
}

std::vector<uint8_t> token_mask(const io::LabelImage& bitmap, pe::GridShape grid, size_t patch) {
  if (bitmap.height != grid.rows * patch || bitmap.width != grid.cols * patch) {
    throw DimensionError("mask is " + std::to_string(bitmap.height) + "x" + std::to_string(bitmap.width) +
                         ", expected " + std::to_string(grid.rows * patch) + "x" + std::to_string(grid.cols * patch));
  }
  std::vector<uint8_t> out(grid.tokens());
  for (size_t r = 0; r < grid.rows; ++r) {
    for (size_t c = 0; c < grid.cols; ++c) {
      size_t on = 0;
      for (size_t y = 0; y < patch; ++y) {
        for (size_t x = 0; x < patch; ++x) on += bitmap.labels[(r * patch + y) * bitmap.width + c * patch + x] != 0;
      }
      out[r * grid.cols + c] = 2 * on >= patch * patch;
    }
  }
  return out;
}

namespace {

io::Image scores_to_image(const Eigen::MatrixXd& scores, pe::GridShape grid, std::span<const double> lo,
                          std::span<const double> hi) {
  io::Image img(3, grid.rows, grid.cols);
  for (long k = 0; k < std::min<long>(3, scores.cols()); ++k) {
    const double span = hi[size_t(k)] - lo[size_t(k)];
    for (size_t t = 0; t < grid.tokens(); ++t) {
      const double v = span > 0 ? (scores(long(t), k) - lo[size_t(k)]) / span : 0.0;
      img.data[size_t(k) * grid.tokens() + t] = float(v);
    }
  }
  return img;
}

}  // namespace

io::Image pca_rgb(const vit::FeatureStack& stack, const PcaModel& model, int layer) {
  const Eigen::MatrixXd s = pca_transform(model, layer_matrix(stack, layer));
  std::vector<double> lo(3, 0.0), hi(3, 0.0);
  for (long k = 0; k < std::min<long>(3, s.cols()); ++k) {
    lo[size_t(k)] = s.col(k).minCoeff();
    hi[size_t(k)] = s.col(k).maxCoeff();
  }
  return scores_to_image(s, stack.grid, lo, hi);
}

std::vector<io::Image> pca_rgb_shared(std::span<const vit::FeatureStack> stacks, const PcaModel& model, int layer) {
  std::vector<Eigen::MatrixXd> scores;
  std::vector<double> lo(3, std::numeric_limits<double>::infinity()), hi(3, -std::numeric_limits<double>::infinity());
  for (const auto& s : stacks) {
    scores.push_back(pca_transform(model, layer_matrix(s, layer)));
    for (long k = 0; k < std::min<long>(3, scores.back().cols()); ++k) {
      lo[size_t(k)] = std::min(lo[size_t(k)], scores.back().col(k).minCoeff());
      hi[size_t(k)] = std::max(hi[size_t(k)], scores.back().col(k).maxCoeff());
    }
  }
  std::vector<io::Image> out;
  for (size_t i = 0; i < stacks.size(); ++i) out.push_back(scores_to_image(scores[i], stacks[i].grid, lo, hi));
  return out;
}

std::vector<uint8_t> to_rgb8(const io::Image& image, size_t factor) {
  if (factor == 0) throw ValidationError("upscale factor must be positive");
  const size_t h = image.height * factor, w = image.width * factor;
  std::vector<uint8_t> out(h * w * 3);
  for (size_t y = 0; y < h; ++y) {
    for (size_t x = 0; x < w; ++x) {
      for (size_t c = 0; c < 3; ++c) {
        const float v = image.at(std::min(c, image.channels - 1), y / factor, x / factor);
        out[(y * w + x) * 3 + c] = uint8_t(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
      }
    }
  }
  return out;
}

// ---- similarity --------------------------------------------------------------

SimilarityMap cosine_map(const vit::FeatureStack& stack, size_t query, int layer) {
  const auto view = stack.layer(resolve_layer(stack, layer));
  if (query >= view.tokens()) {
    throw ValidationError("query token " + std::to_string(query) + " outside " + std::to_string(view.tokens()) +
                          " tokens");
  }
  SimilarityMap m;
  m.query = query;
  m.grid = stack.grid;
  m.values.resize(view.tokens());
  const auto q = view.token(query);
  double qn = 0;
  for (float v : q) qn += double(v) * v;
  qn = std::sqrt(qn);
  for (size_t t = 0; t < view.tokens(); ++t) {
    const auto f = view.token(t);
    double dot = 0, fn = 0;
    for (size_t c = 0; c < view.channels; ++c) {
      dot += double(f[c]) * q[c];
      fn += double(f[c]) * f[c];
    }
    const double denom = std::sqrt(fn) * qn;
    m.values[t] = denom > 0 ? std::clamp(dot / denom, -1.0, 1.0) : 0.0;
  }
  return m;
}

// ---- k-means -----------------------------------------------------------------

namespace {

struct Lloyd {
  std::vector<int> labels;
  Eigen::MatrixXd centroids;
  double inertia = 0.0;
  size_t iterations = 0;
};

double assign(const Eigen::MatrixXd& x, const Eigen::MatrixXd& centroids, std::vector<int>& labels) {
  double inertia = 0;
  for (long i = 0; i < x.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (long j = 0; j < centroids.rows(); ++j) {
      const double d = (x.row(i) - centroids.row(j)).squaredNorm();
      if (d < best) {
        best = d;
        arg = int(j);
      }
    }
    labels[size_t(i)] = arg;
    inertia += best;
  }
  return inertia;
}

Lloyd run_init(const Eigen::MatrixXd& x, size_t k, const KMeansOptions& opt, uint64_t seed) {
  const long n = x.rows();
  Rng rng(seed);
  Lloyd out;
  out.centroids.resize(long(k), x.cols());
  out.centroids.row(0) = x.row(long(rng.below(uint64_t(n))));
  Eigen::VectorXd d2(n);
  for (long i = 0; i < n; ++i) d2(i) = (x.row(i) - out.centroids.row(0)).squaredNorm();
  for (size_t j = 1; j < k; ++j) {
    const double total = d2.sum();
    long pick = 0;
    if (total > 0) {
      const double u = rng.uniform() * total;
      double acc = 0;
      pick = n - 1;
      for (long i = 0; i < n; ++i) {
        acc += d2(i);
        if (u < acc && d2(i) > 0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = long(rng.below(uint64_t(n)));
    }
    out.centroids.row(long(j)) = x.row(pick);
    for (long i = 0; i < n; ++i) d2(i) = std::min(d2(i), (x.row(i) - out.centroids.row(long(j))).squaredNorm());
  }
  out.labels.assign(size_t(n), 0);
  for (size_t it = 0; it < opt.max_iter; ++it) {
    assign(x, out.centroids, out.labels);
    Eigen::MatrixXd next = Eigen::MatrixXd::Zero(long(k), x.cols());
    std::vector<size_t> count(k, 0);
    for (long i = 0; i < n; ++i) {
      next.row(out.labels[size_t(i)]) += x.row(i);
      ++count[size_t(out.labels[size_t(i)])];
    }
    double moved = 0;
    for (size_t j = 0; j < k; ++j) {
      if (count[j] == 0) {
        next.row(long(j)) = out.centroids.row(long(j));
      } else {
        next.row(long(j)) /= double(count[j]);
      }
      moved = std::max(moved, (next.row(long(j)) - out.centroids.row(long(j))).norm());
    }
    out.centroids = std::move(next);
    out.iterations = it + 1;
    if (moved < opt.tol) break;
  }
  out.inertia = assign(x, out.centroids, out.labels);
  return out;
}

}  // namespace

ClusterResult kmeans(const Eigen::MatrixXd& x_in, size_t k, const KMeansOptions& options) {
  if (k == 0 || k > size_t(x_in.rows())) {
    throw ValidationError("k-means needs 1 <= k <= " + std::to_string(x_in.rows()) + ", got " + std::to_string(k));
  }
  if (options.n_init == 0) throw ValidationError("k-means needs at least one initialization");
  Eigen::MatrixXd x = x_in;
  if (options.standardize) {
    const Eigen::RowVectorXd mean = x.colwise().mean();
    x.rowwise() -= mean;
    for (long j = 0; j < x.cols(); ++j) {
      const double sd = std::sqrt(x.col(j).squaredNorm() / double(x.rows()));
      if (sd > 0) x.col(j) /= sd;
    }
  }
  std::vector<Lloyd> runs(options.n_init);
  const int threads = options.threads > 0 ? options.threads : default_threads();
  parallel_for(options.n_init, threads, [&](size_t i) { runs[i] = run_init(x, k, options, derive_seed(options.seed, i)); });
  ClusterResult out;
  out.k = k;
  size_t best = 0;
  for (size_t i = 0; i < runs.size(); ++i) {
    out.init_inertia.push_back(runs[i].inertia);
    out.iterations.push_back(runs[i].iterations);
    if (runs[i].inertia < runs[best].inertia) best = i;
  }
  out.best_init = best;
  out.labels = std::move(runs[best].labels);
  out.centroids = std::move(runs[best].centroids);
  out.inertia = runs[best].inertia;
  return out;
}

ClusterResult kmeans(const vit::FeatureStack& stack, size_t k, const KMeansOptions& options, int layer) {
  return kmeans(layer_matrix(stack, layer), k, options);
}

// ---- diagnostics -------------------------------------------------------------

double token_spread(const vit::FeatureStack& stack, int layer) {
  const auto view = stack.layer(resolve_layer(stack, layer));
  double total = 0;
  for (size_t c = 0; c < view.channels; ++c) {
    double mean = 0;
    for (size_t t = 0; t < view.tokens(); ++t) mean += view.at(t, c);
    mean /= double(view.tokens());
    double sq = 0;
    for (size_t t = 0; t < view.tokens(); ++t) sq += (view.at(t, c) - mean) * (view.at(t, c) - mean);
    total += std::sqrt(sq / double(view.tokens()));
  }
  return total / double(view.channels);
}

std::vector<std::pair<std::string, io::Image>> diagnostic_inputs(size_t size, size_t channels, size_t patch,
                                                                 uint64_t seed) {
  io::Image dots(channels, size, size, 0.0f);
  for (size_t y = patch / 2; y < size; y += patch) {
    for (size_t x = patch / 2; x < size; x += patch) {
      for (size_t c = 0; c < channels; ++c) dots.at(c, y, x) = 1.0f;
    }
  }
  return {{"zeros", io::Image(channels, size, size, 0.0f)},
          {"dots", std::move(dots)},
          {"noise", io::noise_image(size, channels, seed)}};
}

std::vector<DiagnosticRow> zero_input_diagnostic(const vit::ViTModel<float>& model, std::span<const double> sigmas,
                                                 std::span<const uint64_t> seeds, size_t size) {
  const auto& cfg = model.config();
  std::vector<DiagnosticRow> rows;
  for (uint64_t seed : seeds) {
    for (auto& [name, img] : diagnostic_inputs(size, cfg.channels, cfg.patch, seed)) {
      for (double sigma : sigmas) {
        if (sigma < 0) throw ValidationError("jitter sigma must be non-negative");
        DiagnosticRow row;
        row.input = name;
        row.sigma = sigma;
        row.seed = seed;
        vit::ForwardOptions fo;
        fo.jitter_sigma = sigma;
        fo.jitter_seed = seed;
        row.stack = vit::forward_features(model, img, fo, name);
        row.token_std = token_spread(row.stack);
        rows.push_back(std::move(row));
      }
    }
  }
  return rows;
}

std::vector<SweepEntry> resolution_sweep(const vit::ViTModel<float>& model, const io::Image& image,
                                         std::span<const size_t> sizes) {
  std::vector<SweepEntry> out;
  for (size_t s : sizes) {
    if (s == 0 || s % model.config().patch != 0) {
      throw DimensionError("sweep size " + std::to_string(s) + " is not a positive multiple of the patch size");
    }
    const io::Image img = image.height == s && image.width == s ? image : io::resize_bilinear(image, s, s);
    out.push_back({s, vit::forward_features(model, img, {}, "size" + std::to_string(s))});
  }
  return out;
}

// ---- transformation robustness ----------------------------------------------

const char* to_string(Transform t) noexcept {
  switch (t) {
    case Transform::Identity: return "identity";
    case Transform::FlipUD: return "flip_ud";
    case Transform::Roll: return "roll";
    case Transform::Rot90: return "rot90";
  }
  return "?";
}

Transform transform_from_string(std::string_view name) {
  for (auto t : {Transform::Identity, Transform::FlipUD, Transform::Roll, Transform::Rot90}) {
    if (name == to_string(t)) return t;
  }
  throw ValidationError("unknown transform '" + std::string(name) + "'");
}

io::Image apply(const TransformSpec& t, const io::Image& image) {
  switch (t.kind) {
    case Transform::Identity: return image;
    case Transform::FlipUD: return io::flip_ud(image);
    case Transform::Roll: return io::roll(image, t.dy, t.dx);
    case Transform::Rot90: return io::rot90(image);
  }
  return image;
}

vit::FeatureStack invert(const TransformSpec& t, const vit::FeatureStack& stack, size_t patch) {
  const size_t rows = stack.grid.rows, cols = stack.grid.cols, c = stack.channels;
  // source(r, c) gives the transformed-grid token holding base token (r, c).
  std::function<size_t(size_t, size_t)> source;
  switch (t.kind) {
    case Transform::Identity: return stack;
    case Transform::FlipUD: source = [&](size_t r, size_t q) { return (rows - 1 - r) * cols + q; }; break;
    case Transform::Roll: {
      if (t.dy % long(patch) != 0 || t.dx % long(patch) != 0) {
        throw ValidationError("roll shift must be a multiple of the patch size");
      }
      const long sr = t.dy / long(patch), sc = t.dx / long(patch);
      source = [=](size_t r, size_t q) {
        const long rr = ((long(r) + sr) % long(rows) + long(rows)) % long(rows);
        const long cc = ((long(q) + sc) % long(cols) + long(cols)) % long(cols);
        return size_t(rr) * cols + size_t(cc);
      };
      break;
    }
    case Transform::Rot90:
      if (rows != cols) throw DimensionError("rot90 needs a square grid");
      source = [&](size_t r, size_t q) { return (rows - 1 - q) * cols + r; };
      break;
  }
  vit::FeatureStack out = stack;
  for (size_t l = 0; l < stack.layers.size(); ++l) {
    for (size_t r = 0; r < rows; ++r) {
      for (size_t q = 0; q < cols; ++q) {
        const size_t from = source(r, q), to = r * cols + q;
        std::copy_n(stack.layers[l].begin() + long(from * c), c, out.layers[l].begin() + long(to * c));
      }
    }
  }
  return out;
}

std::vector<EquivarianceRow> equivariance_report(const vit::ViTModel<float>& model, std::span<const io::Image> images,
                                                 std::span<const TransformSpec> transforms) {
  if (images.empty()) throw ValidationError("equivariance report needs at least one image");
  const size_t patch = model.config().patch;
  std::vector<vit::FeatureStack> base;
  for (const auto& img : images) base.push_back(vit::forward_features(model, img, {}));
  std::vector<EquivarianceRow> rows;
  for (const auto& t : transforms) {
    EquivarianceRow row;
    row.transform = to_string(t.kind);
    if (t.kind == Transform::Roll) {
      row.transform += "(" + std::to_string(t.dy) + "," + std::to_string(t.dx) + ")";
    }
    if (t.kind == Transform::Rot90 &&
        std::any_of(images.begin(), images.end(), [](const io::Image& im) { return im.height != im.width; })) {
      row.skipped = true;
      row.note = "rot90 skipped: non-square input";
      rows.push_back(row);
      continue;
    }
    double total = 0;
    for (size_t i = 0; i < images.size(); ++i) {
      const auto moved = invert(t, vit::forward_features(model, apply(t, images[i]), {}), patch);
      const auto a = moved.final_layer(), b = base[i].final_layer();
      double sum = 0;
      for (size_t tok = 0; tok < b.tokens(); ++tok) {
        double diff = 0, norm = 0;
        for (size_t c = 0; c < b.channels; ++c) {
          const double d = double(a.at(tok, c)) - b.at(tok, c);
          diff += d * d;
          norm += double(b.at(tok, c)) * b.at(tok, c);
        }
        sum += std::sqrt(diff) / std::max(std::sqrt(norm), 1e-12);
      }
      total += sum / double(b.tokens());
    }
    row.discrepancy = total / double(images.size());
    rows.push_back(row);
  }
  return rows;
}

std::vector<TransformSpec> default_transforms(size_t patch) {
  return {{Transform::Identity, 0, 0},
          {Transform::FlipUD, 0, 0},
          {Transform::Roll, 2 * long(patch), long(patch)},
          {Transform::Rot90, 0, 0}};
}

}  // namespace dinolens::analysis
