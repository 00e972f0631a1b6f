// SPDX-License-Identifier: Apache-2.0
#pragma once

// Scribble-trained pixel classification and the scribble-round benchmark.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "analysis/analysis.hpp"
#include "io/image.hpp"
#include "io/synthetic.hpp"
#include "seg/features.hpp"
#include "seg/gbt.hpp"
#include "vit/vit.hpp"

namespace dinolens::seg {

struct Scribble {
  int cls = 0;
  std::vector<size_t> pixels;  // row-major indices, in walk order
};

struct ScribbleSet {
  io::LabelImage labels;  // 0 = unlabeled, 1..K = class
  size_t round = 0;
  std::string provenance;  // "generated" or a file path
  std::vector<Scribble> strokes;
};

inline constexpr size_t kScribbleLength = 20;

/// One random-walk scribble per class present in `truth`: the walk starts at
/// a uniformly drawn pixel of the class and takes 4-neighbour steps that
/// stay inside the class, until kScribbleLength distinct pixels are covered
/// or the region allows no more (small components give shorter strokes).
ScribbleSet synth_scribbles(const io::LabelImage& truth, size_t round, uint64_t seed, size_t classes);

/// Union of two scribble label maps; `b` wins where both are labeled.
io::LabelImage merge_labels(const io::LabelImage& a, const io::LabelImage& b);

struct MiouResult {
  double value = 0.0;
  std::vector<double> per_class;  // IoU for classes 1..K
  std::vector<bool> absent;       // class absent from both maps; IoU counted as 1
};

/// Mean over classes 1..K of |pred & truth| / |pred | truth|.
MiouResult miou_detail(const io::LabelImage& pred, const io::LabelImage& truth, size_t classes);
double miou(const io::LabelImage& pred, const io::LabelImage& truth, size_t classes);

struct Segmenter {
  GbtClassifier gbt;
  size_t classes = 0;               // labels 1..classes
  std::vector<std::string> feature_names;
};

/// Trains on every labeled pixel of every bank. ValidationError listing the
/// missing classes when some class in 1..classes has no labeled pixel.
Segmenter fit_segmenter(std::span<const FeatureBank> banks, std::span<const io::LabelImage> scribbles,
                        size_t classes, const GbtParams& params);

io::LabelImage predict_map(const Segmenter& seg, const FeatureBank& bank, int threads = 0);

/// Classical bank, optionally with the 9-channel deep bank of `model`.
FeatureBank build_bank(const io::Image& image, const vit::ViTModel<float>* model, const std::string& id = "");

struct BenchConfig {
  std::string name;
  const vit::ViTModel<float>* model = nullptr;  // null: classical features only
};

struct BenchResult {
  std::vector<std::string> configs;
  size_t rounds = 0;
  std::vector<std::vector<double>> miou;  // [config][round], mean over test images
  std::vector<size_t> scribbles;          // strokes added per round
  std::vector<size_t> labeled_pixels;     // cumulative, after each round
  GbtParams params;
};

/// Each round adds one generated scribble per class per training image; the
/// classifier is refit on all scribbles so far and scored on the test set.
/// Scribbles depend only on the seed, so every config sees the same labels.
BenchResult scribble_rounds_bench(std::span<const io::LabeledImage> train, std::span<const io::LabeledImage> test,
                                  size_t rounds, std::span<const BenchConfig> configs, const GbtParams& params,
                                  uint64_t seed, size_t classes = 2, int threads = 0);

/// Images from `<dir>/images` with same-stem indexed masks from
/// `<dir>/masks`, in name order. The class count is the largest label.
std::vector<io::LabeledImage> load_labeled_dir(const std::filesystem::path& dir, size_t* classes = nullptr);

io::LabelImage transform_labels(const analysis::TransformSpec& t, const io::LabelImage& labels);
io::LabelImage invert_labels(const analysis::TransformSpec& t, const io::LabelImage& labels);

struct SegEquivarianceRow {
  std::string transform;
  double miou = 0.0;        // inverse-transformed prediction vs truth
  double delta = 0.0;       // relative to the untransformed prediction
  bool skipped = false;
};

/// Predicts on transformed images, maps predictions back and reports the
/// mean mIoU against the untransformed truth.
std::vector<SegEquivarianceRow> segmentation_equivariance(const Segmenter& seg, const vit::ViTModel<float>* model,
                                                          std::span<const io::LabeledImage> images,
                                                          std::span<const analysis::TransformSpec> transforms,
                                                          int threads = 0);

}  // namespace dinolens::seg
