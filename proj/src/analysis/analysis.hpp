// SPDX-License-Identifier: Apache-2.0
#pragma once

// Feature inspection: PCA maps, cosine-similarity maps, k-means, jitter
// diagnostics, resolution sweeps and transformation robustness.

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "io/image.hpp"
#include "vit/feature_stack.hpp"
#include "vit/vit.hpp"

namespace dinolens::analysis {

/// Tokens of one layer as a [tokens, C] matrix. Negative layers count from
/// the end.
Eigen::MatrixXd layer_matrix(const vit::FeatureStack& stack, int layer = -1);

struct PcaModel {
  Eigen::RowVectorXd mean;      // [C]
  Eigen::RowVectorXd scale;     // [C]; per-channel std when standardized, else ones
  Eigen::MatrixXd components;   // [d, C], orthonormal rows
  std::vector<double> explained;  // variance fraction per component
  bool standardize = false;
};

/// Principal components of the rows of `x`. Each component's sign makes its
/// largest-magnitude loading positive. Channels with zero spread keep scale 1.
PcaModel pca_fit(const Eigen::MatrixXd& x, size_t d, bool standardize);

/// Shared fit over the tokens of several stacks. `masks`, when non-empty,
/// holds one token mask per stack; only tokens with a nonzero entry are used.
PcaModel pca_fit(std::span<const vit::FeatureStack> stacks, size_t d, bool standardize,
                 std::span<const std::vector<uint8_t>> masks = {}, int layer = -1);

Eigen::MatrixXd pca_transform(const PcaModel& model, const Eigen::MatrixXd& x);
Eigen::MatrixXd pca_inverse(const PcaModel& model, const Eigen::MatrixXd& scores);

/// Token mask from a pixel bitmap: a token is kept when at least half of its
/// pixels are nonzero. DimensionError unless the bitmap is grid * patch.
std::vector<uint8_t> token_mask(const io::LabelImage& bitmap, pe::GridShape grid, size_t patch);

/// The first three components as an RGB image at grid resolution, each
/// component min-max normalized over this image. Missing components are 0.
io::Image pca_rgb(const vit::FeatureStack& stack, const PcaModel& model, int layer = -1);

/// Same, but every component is normalized over the union of all images so
/// colours are comparable across them.
std::vector<io::Image> pca_rgb_shared(std::span<const vit::FeatureStack> stacks, const PcaModel& model,
                                      int layer = -1);

/// Nearest-neighbour upscale of a grid image by `factor`, as 8-bit RGB.
std::vector<uint8_t> to_rgb8(const io::Image& image, size_t factor);

struct SimilarityMap {
  size_t query = 0;
  pe::GridShape grid;
  std::vector<double> values;  // cosine to the query token, per token
};

SimilarityMap cosine_map(const vit::FeatureStack& stack, size_t query, int layer = -1);

struct ClusterResult {
  size_t k = 0;
  std::vector<int> labels;
  Eigen::MatrixXd centroids;           // in the (possibly standardized) clustering space
  double inertia = 0.0;
  size_t best_init = 0;
  std::vector<double> init_inertia;    // final inertia of every initialization
  std::vector<size_t> iterations;
};

struct KMeansOptions {
  size_t n_init = 15;
  size_t max_iter = 300;
  double tol = 1e-6;    // largest centroid movement that counts as converged
  bool standardize = true;
  uint64_t seed = 0;
  int threads = 0;
};

/// k-means++ seeding per initialization, Lloyd iterations, best inertia wins
/// with ties going to the lowest initialization index. Points equidistant
/// from two centroids take the lower label; empty clusters keep their
/// previous centroid.
ClusterResult kmeans(const Eigen::MatrixXd& x, size_t k, const KMeansOptions& options = {});
ClusterResult kmeans(const vit::FeatureStack& stack, size_t k, const KMeansOptions& options = {}, int layer = -1);

/// Mean over channels of the standard deviation across tokens.
double token_spread(const vit::FeatureStack& stack, int layer = -1);

/// The three diagnostic inputs: all zeros, a dot at the centre of every
/// patch, and uniform noise.
std::vector<std::pair<std::string, io::Image>> diagnostic_inputs(size_t size, size_t channels, size_t patch,
                                                                 uint64_t seed);

struct DiagnosticRow {
  std::string input;
  double sigma = 0.0;
  uint64_t seed = 0;
  double token_std = 0.0;
  vit::FeatureStack stack;
};

/// Runs every diagnostic input at every jitter sigma and seed. Jitter is
/// added to the ALiBi distance matrix of every layer, or to the learned
/// encoding for learned-PE models.
std::vector<DiagnosticRow> zero_input_diagnostic(const vit::ViTModel<float>& model, std::span<const double> sigmas,
                                                 std::span<const uint64_t> seeds, size_t size);

struct SweepEntry {
  size_t size = 0;
  vit::FeatureStack stack;
};

/// Features of the image resized to each size; the encoding adapts to each
/// grid inside the model.
std::vector<SweepEntry> resolution_sweep(const vit::ViTModel<float>& model, const io::Image& image,
                                         std::span<const size_t> sizes);

enum class Transform { Identity, FlipUD, Roll, Rot90 };
const char* to_string(Transform t) noexcept;
Transform transform_from_string(std::string_view name);

struct TransformSpec {
  Transform kind = Transform::Identity;
  long dy = 0;  // roll shift in pixels, patch-aligned
  long dx = 0;
};

/// Applies the transform to an image.
io::Image apply(const TransformSpec& t, const io::Image& image);
/// Maps every layer of a transformed-image stack back onto the base grid.
vit::FeatureStack invert(const TransformSpec& t, const vit::FeatureStack& stack, size_t patch);

struct EquivarianceRow {
  std::string transform;
  double discrepancy = 0.0;  // mean over images
  bool skipped = false;
  std::string note;
};

/// Per transform: mean over tokens of |f_inv - f| / |f| on the final layer,
/// averaged over images. rot90 on non-square inputs is skipped with a note.
std::vector<EquivarianceRow> equivariance_report(const vit::ViTModel<float>& model, std::span<const io::Image> images,
                                                 std::span<const TransformSpec> transforms);

/// identity, flip_ud, roll by (2, 1) patches, rot90.
std::vector<TransformSpec> default_transforms(size_t patch);

}  // namespace dinolens::analysis
