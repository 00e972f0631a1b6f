// SPDX-License-Identifier: Apache-2.0
#pragma once

// Linear probes from patch-token features to ramp targets, scored by R^2
// on held-out tokens.

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "vit/feature_stack.hpp"

namespace dinolens::probe {

enum class RampKind { LeftRight, UpDown, Diagonal, Radial, XYJoint, RandomNoise };

const char* to_string(RampKind kind) noexcept;
RampKind ramp_kind_from_string(std::string_view name);

/// Per-token regression targets, [tokens, columns] row-major. XYJoint has two
/// columns (column coordinate, row coordinate); every other kind has one.
struct RampTarget {
  RampKind kind = RampKind::LeftRight;
  pe::GridShape grid;
  size_t columns = 1;
  std::vector<double> values;

  double at(size_t token, size_t column = 0) const { return values[token * columns + column]; }
};

/// Deterministic ramps are normalized to [0, 1]; RandomNoise draws U[0, 1]
/// per token from `seed`. A 1x1 grid is rejected with DegenerateError, as is
/// any single-row grid for UpDown and single-column grid for LeftRight.
RampTarget make_ramp(RampKind kind, size_t rows, size_t cols, uint64_t seed = 0);

enum class SampleStrategy { Random, Grid, GridHoldout };

const char* to_string(SampleStrategy s) noexcept;
SampleStrategy sample_strategy_from_string(std::string_view name);

struct ProbeConfig {
  double sample_frac = 0.025;
  size_t repeats = 10;
  SampleStrategy strategy = SampleStrategy::Random;
  double ridge = 0.0;
  uint64_t seed = 0;

  /// Throws ValidationError outside 0 < sample_frac < 1 or repeats == 0.
  void validate() const;
};

struct Split {
  std::vector<size_t> train;    // sorted
  std::vector<size_t> holdout;  // sorted; complement of train
};

/// Number of training tokens for Random sampling: ceil(frac * tokens),
/// clamped to [2, tokens - 1].
size_t train_count(size_t tokens, double sample_frac);

/// Random: uniform without replacement. Grid: a strided lattice with a
/// seeded phase, stride chosen so the lattice holds about train_count tokens.
/// GridHoldout: the same lattice minus a seeded contiguous block of half the
/// grid extent per axis; the block joins the holdout set.
Split sample_split(pe::GridShape grid, const ProbeConfig& config, uint64_t seed);

struct LinearFit {
  Eigen::MatrixXd weights;  // [C + 1, k]; the last row is the intercept
  double lambda = 0.0;
  bool auto_regularized = false;  // lambda was raised to the 1e-6 floor
};

inline constexpr double kRidgeFloor = 1e-6;

/// Minimizes |X w + b - Y|^2 + lambda |w|^2 with an unpenalized intercept, in
/// fp64 through the normal equations (the n x n dual system when n <= C).
/// With lambda == 0 and fewer than C + 1 rows or a singular Gram matrix, the
/// fit uses lambda = 1e-6 instead and says so.
LinearFit fit_linear(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, double lambda);
Eigen::MatrixXd predict(const LinearFit& fit, const Eigen::MatrixXd& x);

/// 1 - SS_res / SS_tot about the mean of `truth`; DegenerateError when truth
/// is constant.
double r2(std::span<const double> pred, std::span<const double> truth);

struct ProbeReport {
  RampKind ramp = RampKind::LeftRight;
  int layer_id = -1;
  std::vector<std::string> image_ids;
  // Means are over repeats within an image, then over images. Standard
  // deviations are over every (image, repeat) score.
  std::vector<double> channel_mean;
  std::vector<double> channel_std;
  double full_mean = 0.0;
  double full_std = 0.0;
  size_t fits = 0;
  size_t auto_regularized = 0;
};

/// Probes one layer of each stack. Per-channel scores use a single regressor
/// with intercept; the full score is one joint regression on all channels.
/// For XYJoint a score is the mean of the x and y R^2. `layer` indexes the
/// stacks' layers, negative counting from the end.
ProbeReport probe_layer(std::span<const vit::FeatureStack> stacks, int layer, RampKind ramp,
                        const ProbeConfig& config, bool channels = true, bool full = true, int threads = 0);

std::vector<double> probe_channels(const vit::FeatureStack& stack, RampKind ramp, const ProbeConfig& config,
                                   int layer = -1);
double probe_full(const vit::FeatureStack& stack, RampKind ramp, const ProbeConfig& config, int layer = -1);
double joint_xy_score(const vit::FeatureStack& stack, const ProbeConfig& config, int layer = -1);
double joint_xy_score(std::span<const vit::FeatureStack> stacks, const ProbeConfig& config, int layer = -1,
                      int threads = 0);

/// Holdout R^2 per layer and channel.
struct Fingerprint {
  std::string model_id;
  RampKind ramp = RampKind::LeftRight;
  std::vector<int> layer_ids;
  size_t channels = 0;
  std::vector<double> r2;         // layers x channels
  std::vector<double> full_r2;    // per layer

  double at(size_t layer, size_t channel) const { return r2[layer * channels + channel]; }
};

/// Per-channel probes at every layer of the stacks, averaged over images.
/// All stacks must share grid, channels and layer ids.
Fingerprint fingerprint(std::span<const vit::FeatureStack> stacks, RampKind ramp, const ProbeConfig& config,
                        const std::string& model_id, int threads = 0);

void write_channel_csv(const ProbeReport& report, const std::filesystem::path& path);
nlohmann::ordered_json report_json(const ProbeReport& report);
void write_fingerprint_csv(const Fingerprint& fp, const std::filesystem::path& path);
/// Grayscale heatmap, one cell per (layer, channel); values clipped to [0, 1]
/// for display only.
void write_fingerprint_png(const Fingerprint& fp, const std::filesystem::path& path, size_t cell = 8);

}  // namespace dinolens::probe
