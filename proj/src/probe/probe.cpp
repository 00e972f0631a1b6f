// SPDX-License-Identifier: Apache-2.0
#include "probe/probe.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "common/error.hpp"
#include "common/format.hpp"
#include "common/hash.hpp"
#include "common/parallel.hpp"
#include "common/rng.hpp"
#include "io/binary.hpp"
#include "io/image.hpp"

namespace dinolens::probe {

namespace {

struct NamedRamp {
  RampKind kind;
  const char* name;
};
constexpr NamedRamp kRampNames[] = {{RampKind::LeftRight, "left_right"}, {RampKind::UpDown, "up_down"},
                                    {RampKind::Diagonal, "diagonal"},    {RampKind::Radial, "radial"},
                                    {RampKind::XYJoint, "xy"},           {RampKind::RandomNoise, "random"}};

// Salt for the per-image random-ramp control, kept apart from split seeds.
constexpr uint64_t kRandomRampSalt = 0x52414e44ULL;

}  // namespace

const char* to_string(RampKind kind) noexcept {
  for (const auto& n : kRampNames) {
    if (n.kind == kind) return n.name;
  }
  return "unknown";
}

RampKind ramp_kind_from_string(std::string_view name) {
  for (const auto& n : kRampNames) {
    if (name == n.name) return n.kind;
  }
  throw ValidationError("unknown ramp kind '" + std::string(name) +
                        "' (expected left_right, up_down, diagonal, radial, xy or random)");
}

const char* to_string(SampleStrategy s) noexcept {
  switch (s) {
    case SampleStrategy::Random: return "random";
    case SampleStrategy::Grid: return "grid";
    case SampleStrategy::GridHoldout: return "grid_holdout";
  }
  return "unknown";
}

SampleStrategy sample_strategy_from_string(std::string_view name) {
  if (name == "random") return SampleStrategy::Random;
  if (name == "grid") return SampleStrategy::Grid;
  if (name == "grid_holdout") return SampleStrategy::GridHoldout;
  throw ValidationError("unknown sampling strategy '" + std::string(name) + "' (expected random, grid or grid_holdout)");
}

void ProbeConfig::validate() const {
  if (!(sample_frac > 0.0 && sample_frac < 1.0)) {
    throw ValidationError("probe sample_frac must lie in (0, 1), got " + fmt_double(sample_frac));
  }
  if (repeats == 0) throw ValidationError("probe repeats must be at least 1");
  if (!(ridge >= 0.0)) throw ValidationError("probe ridge must be non-negative");
}

RampTarget make_ramp(RampKind kind, size_t rows, size_t cols, uint64_t seed) {
  if (rows == 0 || cols == 0) throw DimensionError("ramp on an empty grid");
  const bool deterministic = kind != RampKind::RandomNoise;
  if (deterministic && rows * cols == 1) throw DegenerateError("ramp on a 1x1 grid has no variance to explain");
  if (kind == RampKind::LeftRight && cols == 1) throw DegenerateError("left-right ramp needs more than one column");
  if (kind == RampKind::UpDown && rows == 1) throw DegenerateError("up-down ramp needs more than one row");
  if (kind == RampKind::XYJoint && (rows == 1 || cols == 1)) {
    throw DegenerateError("joint (x, y) ramp needs more than one row and column");
  }
  RampTarget t;
  t.kind = kind;
  t.grid = {rows, cols};
  t.columns = kind == RampKind::XYJoint ? 2 : 1;
  t.values.resize(rows * cols * t.columns);
  const double cr = (double(rows) - 1) / 2;
  const double cc = (double(cols) - 1) / 2;
  const double radial_max = std::hypot(cr, cc);
  Rng rng(seed);
  for (size_t r = 0; r < rows; ++r) {
    for (size_t c = 0; c < cols; ++c) {
      double* out = &t.values[(r * cols + c) * t.columns];
      switch (kind) {
        case RampKind::LeftRight: out[0] = double(c) / double(cols - 1); break;
        case RampKind::UpDown: out[0] = double(r) / double(rows - 1); break;
        case RampKind::Diagonal: out[0] = double(r + c) / double(rows - 1 + cols - 1); break;
        case RampKind::Radial: out[0] = std::hypot(double(r) - cr, double(c) - cc) / radial_max; break;
        case RampKind::XYJoint:
          out[0] = double(c) / double(cols - 1);
          out[1] = double(r) / double(rows - 1);
          break;
        case RampKind::RandomNoise: out[0] = rng.uniform(); break;
      }
    }
  }
  return t;
}

size_t train_count(size_t tokens, double sample_frac) {
  if (tokens < 3) throw DegenerateError("probing needs at least 3 tokens");
  const auto n = static_cast<size_t>(std::ceil(sample_frac * double(tokens) - 1e-9));
  return std::clamp<size_t>(n, 2, tokens - 1);
}

Split sample_split(pe::GridShape grid, const ProbeConfig& config, uint64_t seed) {
  config.validate();
  const size_t n = grid.tokens();
  const size_t want = train_count(n, config.sample_frac);
  Rng rng(seed);
  std::vector<char> is_train(n, 0);
  if (config.strategy == SampleStrategy::Random) {
    for (size_t t : rng.sample_without_replacement(n, want)) is_train[t] = 1;
  } else {
    const auto stride = std::max<size_t>(2, static_cast<size_t>(std::lround(std::sqrt(double(n) / double(want)))));
    const size_t off_r = rng.below(std::min(stride, grid.rows));
    const size_t off_c = rng.below(std::min(stride, grid.cols));
    size_t block_r0 = 0, block_c0 = 0, block_h = 0, block_w = 0;
    if (config.strategy == SampleStrategy::GridHoldout) {
      block_h = std::max<size_t>(1, grid.rows / 2);
      block_w = std::max<size_t>(1, grid.cols / 2);
      block_r0 = rng.below(grid.rows - block_h + 1);
      block_c0 = rng.below(grid.cols - block_w + 1);
    }
    for (size_t r = off_r; r < grid.rows; r += stride) {
      for (size_t c = off_c; c < grid.cols; c += stride) {
        const bool in_block =
            r >= block_r0 && r < block_r0 + block_h && c >= block_c0 && c < block_c0 + block_w;
        if (!in_block) is_train[r * grid.cols + c] = 1;
      }
    }
  }
  Split split;
  for (size_t t = 0; t < n; ++t) (is_train[t] ? split.train : split.holdout).push_back(t);
  if (split.train.size() < 2 || split.holdout.size() < 2) {
    throw DegenerateError("sampling left " + std::to_string(split.train.size()) + " train and " +
                          std::to_string(split.holdout.size()) + " holdout tokens on a " +
                          std::to_string(grid.rows) + "x" + std::to_string(grid.cols) + " grid");
  }
  return split;
}

LinearFit fit_linear(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, double lambda) {
  const Eigen::Index n = x.rows();
  const Eigen::Index c = x.cols();
  if (y.rows() != n) throw DimensionError("fit_linear: X has " + std::to_string(n) + " rows, Y has " +
                                          std::to_string(y.rows()));
  if (n == 0) throw DegenerateError("fit_linear: no rows");
  if (lambda < 0) throw ValidationError("fit_linear: negative ridge strength");
  const Eigen::RowVectorXd xm = x.colwise().mean();
  const Eigen::RowVectorXd ym = y.colwise().mean();
  const Eigen::MatrixXd xc = x.rowwise() - xm;
  const Eigen::MatrixXd yc = y.rowwise() - ym;

  LinearFit fit;
  fit.lambda = lambda;
  Eigen::MatrixXd gram;
  if (n > c) gram = xc.transpose() * xc;
  if (lambda == 0.0) {
    bool singular = n < c + 1;
    if (!singular) {
      Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
      const Eigen::VectorXd d = ldlt.vectorD().cwiseAbs();
      singular = ldlt.info() != Eigen::Success || d.minCoeff() <= 1e-12 * std::max(d.maxCoeff(), 1e-300);
    }
    if (singular) {
      fit.lambda = kRidgeFloor;
      fit.auto_regularized = true;
    }
  }
  Eigen::MatrixXd w;
  if (n <= c) {
    Eigen::MatrixXd k = xc * xc.transpose();
    k.diagonal().array() += fit.lambda;
    w = xc.transpose() * k.ldlt().solve(yc);
  } else {
    gram.diagonal().array() += fit.lambda;
    w = gram.ldlt().solve(xc.transpose() * yc);
  }
  fit.weights.resize(c + 1, y.cols());
  fit.weights.topRows(c) = w;
  fit.weights.row(c) = ym - xm * w;
  return fit;
}

Eigen::MatrixXd predict(const LinearFit& fit, const Eigen::MatrixXd& x) {
  const Eigen::Index c = fit.weights.rows() - 1;
  if (x.cols() != c) throw DimensionError("predict: fit has " + std::to_string(c) + " inputs, X has " +
                                          std::to_string(x.cols()));
  Eigen::MatrixXd out = x * fit.weights.topRows(c);
  out.rowwise() += fit.weights.row(c);
  return out;
}

double r2(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size()) throw DimensionError("r2: prediction and truth lengths differ");
  if (truth.empty()) throw DegenerateError("r2: no values");
  double mean = 0;
  for (double v : truth) mean += v;
  mean /= double(truth.size());
  double ss_res = 0, ss_tot = 0;
  for (size_t i = 0; i < truth.size(); ++i) {
    ss_res += (pred[i] - truth[i]) * (pred[i] - truth[i]);
    ss_tot += (truth[i] - mean) * (truth[i] - mean);
  }
  if (ss_tot == 0.0) throw DegenerateError("r2: truth is constant");
  return 1.0 - ss_res / ss_tot;
}

// ---- probing -----------------------------------------------------------------

namespace {

struct RepeatScores {
  std::vector<double> channel;
  double full = 0.0;
  size_t fits = 0;
  size_t auto_regularized = 0;
};

Eigen::MatrixXd gather(const vit::LayerView& view, std::span<const size_t> tokens) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(tokens.size()), static_cast<Eigen::Index>(view.channels));
  for (size_t i = 0; i < tokens.size(); ++i) {
    for (size_t c = 0; c < view.channels; ++c) m(Eigen::Index(i), Eigen::Index(c)) = view.at(tokens[i], c);
  }
  return m;
}

Eigen::MatrixXd gather(const RampTarget& ramp, std::span<const size_t> tokens) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(tokens.size()), static_cast<Eigen::Index>(ramp.columns));
  for (size_t i = 0; i < tokens.size(); ++i) {
    for (size_t k = 0; k < ramp.columns; ++k) m(Eigen::Index(i), Eigen::Index(k)) = ramp.at(tokens[i], k);
  }
  return m;
}

double mean_r2(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& truth) {
  double total = 0;
  for (Eigen::Index k = 0; k < truth.cols(); ++k) {
    const Eigen::VectorXd p = pred.col(k);
    const Eigen::VectorXd t = truth.col(k);
    total += r2({p.data(), size_t(p.size())}, {t.data(), size_t(t.size())});
  }
  return total / double(truth.cols());
}

RepeatScores probe_repeat(const vit::LayerView& view, const RampTarget& ramp, const Split& split, double ridge,
                          bool channels, bool full) {
  RepeatScores out;
  const Eigen::MatrixXd xt = gather(view, split.train);
  const Eigen::MatrixXd xh = gather(view, split.holdout);
  const Eigen::MatrixXd yt = gather(ramp, split.train);
  const Eigen::MatrixXd yh = gather(ramp, split.holdout);
  if (channels) {
    out.channel.resize(view.channels);
    const Eigen::RowVectorXd ym = yt.colwise().mean();
    for (size_t c = 0; c < view.channels; ++c) {
      const Eigen::VectorXd col = xt.col(Eigen::Index(c));
      const double xm = col.mean();
      double sxx = 0, sq = 0;
      for (Eigen::Index i = 0; i < col.size(); ++i) {
        sxx += (col(i) - xm) * (col(i) - xm);
        sq += col(i) * col(i);
      }
      double lambda = ridge;
      if (lambda == 0.0 && sxx <= 1e-12 * sq) {
        lambda = kRidgeFloor;
        ++out.auto_regularized;
      }
      ++out.fits;
      Eigen::MatrixXd pred(xh.rows(), yt.cols());
      for (Eigen::Index k = 0; k < yt.cols(); ++k) {
        double sxy = 0;
        for (Eigen::Index i = 0; i < col.size(); ++i) sxy += (col(i) - xm) * (yt(i, k) - ym(k));
        const double slope = (sxx + lambda) > 0 ? sxy / (sxx + lambda) : 0.0;
        const double icpt = ym(k) - slope * xm;
        for (Eigen::Index i = 0; i < xh.rows(); ++i) pred(i, k) = slope * xh(i, Eigen::Index(c)) + icpt;
      }
      out.channel[c] = mean_r2(pred, yh);
    }
  }
  if (full) {
    const LinearFit fit = fit_linear(xt, yt, ridge);
    ++out.fits;
    out.auto_regularized += fit.auto_regularized ? 1 : 0;
    out.full = mean_r2(predict(fit, xh), yh);
  }
  return out;
}

size_t resolve_layer(const vit::FeatureStack& stack, int layer) {
  const long count = long(stack.layer_count());
  const long idx = layer < 0 ? count + layer : layer;
  if (idx < 0 || idx >= count) {
    throw DimensionError("layer " + std::to_string(layer) + " out of range for a stack with " +
                         std::to_string(count) + " layers");
  }
  return size_t(idx);
}

std::string stack_id(const vit::FeatureStack& stack, size_t index) {
  return stack.image_id.empty() ? "image_" + std::to_string(index) : stack.image_id;
}

}  // namespace

ProbeReport probe_layer(std::span<const vit::FeatureStack> stacks, int layer, RampKind ramp,
                        const ProbeConfig& config, bool channels, bool full, int threads) {
  config.validate();
  if (stacks.empty()) throw ValidationError("probe: no feature stacks");
  const size_t images = stacks.size();
  const size_t reps = config.repeats;
  std::vector<std::vector<RepeatScores>> scores(images, std::vector<RepeatScores>(reps));
  ProbeReport report;
  report.ramp = ramp;
  for (size_t i = 0; i < images; ++i) {
    if (stacks[i].channels != stacks[0].channels) throw DimensionError("probe: stacks differ in channel count");
    report.image_ids.push_back(stack_id(stacks[i], i));
  }
  report.layer_id = stacks[0].layer_ids.empty() ? layer : stacks[0].layer_ids[resolve_layer(stacks[0], layer)];
  parallel_for(images * reps, threads > 0 ? threads : default_threads(), [&](size_t task) {
    const size_t i = task / reps;
    const size_t r = task % reps;
    const vit::FeatureStack& s = stacks[i];
    const uint64_t image_key = fnv1a64(report.image_ids[i]);
    const RampTarget target = make_ramp(ramp, s.grid.rows, s.grid.cols, derive_seed(config.seed, image_key, kRandomRampSalt));
    const Split split = sample_split(s.grid, config, derive_seed(config.seed, image_key, r));
    scores[i][r] = probe_repeat(s.layer(resolve_layer(s, layer)), target, split, config.ridge, channels, full);
  });

  const size_t c = stacks[0].channels;
  auto summarize = [&](auto&& get, double& mean_out, double& std_out) {
    double grand = 0;
    for (size_t i = 0; i < images; ++i) {
      double m = 0;
      for (size_t r = 0; r < reps; ++r) m += get(scores[i][r]);
      grand += m / double(reps);
    }
    mean_out = grand / double(images);
    double all_mean = 0;
    for (const auto& per : scores) {
      for (const auto& sc : per) all_mean += get(sc);
    }
    all_mean /= double(images * reps);
    double var = 0;
    for (const auto& per : scores) {
      for (const auto& sc : per) var += (get(sc) - all_mean) * (get(sc) - all_mean);
    }
    std_out = std::sqrt(var / double(images * reps));
  };
  if (channels) {
    report.channel_mean.resize(c);
    report.channel_std.resize(c);
    for (size_t ch = 0; ch < c; ++ch) {
      summarize([ch](const RepeatScores& s) { return s.channel[ch]; }, report.channel_mean[ch], report.channel_std[ch]);
    }
  }
  if (full) summarize([](const RepeatScores& s) { return s.full; }, report.full_mean, report.full_std);
  for (const auto& per : scores) {
    for (const auto& sc : per) {
      report.fits += sc.fits;
      report.auto_regularized += sc.auto_regularized;
    }
  }
  return report;
}

std::vector<double> probe_channels(const vit::FeatureStack& stack, RampKind ramp, const ProbeConfig& config,
                                   int layer) {
  return probe_layer({&stack, 1}, layer, ramp, config, true, false, 1).channel_mean;
}

double probe_full(const vit::FeatureStack& stack, RampKind ramp, const ProbeConfig& config, int layer) {
  return probe_layer({&stack, 1}, layer, ramp, config, false, true, 1).full_mean;
}

double joint_xy_score(const vit::FeatureStack& stack, const ProbeConfig& config, int layer) {
  return probe_full(stack, RampKind::XYJoint, config, layer);
}

double joint_xy_score(std::span<const vit::FeatureStack> stacks, const ProbeConfig& config, int layer, int threads) {
  return probe_layer(stacks, layer, RampKind::XYJoint, config, false, true, threads).full_mean;
}

Fingerprint fingerprint(std::span<const vit::FeatureStack> stacks, RampKind ramp, const ProbeConfig& config,
                        const std::string& model_id, int threads) {
  if (stacks.empty()) throw ValidationError("fingerprint: no feature stacks");
  for (const auto& s : stacks) {
    if (s.layer_ids != stacks[0].layer_ids || s.channels != stacks[0].channels) {
      throw DimensionError("fingerprint: stacks differ in layers or channels");
    }
  }
  Fingerprint fp;
  fp.model_id = model_id;
  fp.ramp = ramp;
  fp.layer_ids = stacks[0].layer_ids;
  fp.channels = stacks[0].channels;
  for (size_t l = 0; l < stacks[0].layer_count(); ++l) {
    const ProbeReport rep = probe_layer(stacks, int(l), ramp, config, true, true, threads);
    fp.r2.insert(fp.r2.end(), rep.channel_mean.begin(), rep.channel_mean.end());
    fp.full_r2.push_back(rep.full_mean);
  }
  return fp;
}

// ---- reports -----------------------------------------------------------------

void write_channel_csv(const ProbeReport& report, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "channel,r2_mean,r2_std\n";
  for (size_t c = 0; c < report.channel_mean.size(); ++c) {
    out << c << ',' << fmt_double(report.channel_mean[c]) << ',' << fmt_double(report.channel_std[c]) << '\n';
  }
  io::write_text(path, out.str());
}

nlohmann::ordered_json report_json(const ProbeReport& report) {
  nlohmann::ordered_json j;
  j["ramp"] = to_string(report.ramp);
  j["layer"] = report.layer_id;
  j["images"] = report.image_ids;
  j["full_r2_mean"] = report.full_mean;
  j["full_r2_std"] = report.full_std;
  if (!report.channel_mean.empty()) {
    const auto best = std::max_element(report.channel_mean.begin(), report.channel_mean.end());
    j["best_channel"] = static_cast<size_t>(best - report.channel_mean.begin());
    j["best_channel_r2"] = *best;
  }
  j["fits"] = report.fits;
  j["auto_regularized_fits"] = report.auto_regularized;
  return j;
}

void write_fingerprint_csv(const Fingerprint& fp, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "layer";
  for (size_t c = 0; c < fp.channels; ++c) out << ",c" << c;
  out << ",full\n";
  for (size_t l = 0; l < fp.layer_ids.size(); ++l) {
    out << fp.layer_ids[l];
    for (size_t c = 0; c < fp.channels; ++c) out << ',' << fmt_double(fp.at(l, c));
    out << ',' << fmt_double(fp.full_r2[l]) << '\n';
  }
  io::write_text(path, out.str());
}

void write_fingerprint_png(const Fingerprint& fp, const std::filesystem::path& path, size_t cell) {
  const size_t layers = fp.layer_ids.size();
  const size_t h = layers * cell;
  const size_t w = fp.channels * cell;
  std::vector<uint8_t> px(h * w);
  for (size_t y = 0; y < h; ++y) {
    for (size_t x = 0; x < w; ++x) {
      const double v = std::clamp(fp.at(y / cell, x / cell), 0.0, 1.0);
      px[y * w + x] = static_cast<uint8_t>(std::lround(v * 255.0));
    }
  }
  io::write_png_gray(path, h, w, px);
}

}  // namespace dinolens::probe
