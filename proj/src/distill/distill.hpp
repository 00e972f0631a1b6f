// SPDX-License-Identifier: Apache-2.0
#pragma once

// Teacher-embedding distillation into a student whose absolute positional
// encoding is frozen at zero (ALiBi or NoPE), with channel blanking and a
// second, higher-resolution stage.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "io/image.hpp"
#include "probe/probe.hpp"
#include "tensor/tensor.hpp"
#include "vit/vit.hpp"

namespace dinolens::distill {

struct TeacherOptions {
  vit::ViTConfig vit;               // pe_kind is forced to Learned
  double ramp_amplitude = 6.0;      // peak |value| of a planted coordinate channel
  size_t ramp_channels = 4;         // pairs per axis: left-right, up-down, diagonal, radial, repeating
  double pe_noise = 0.02;
  double weight_gain = 1.0;
  double min_joint_xy = 0.5;        // accepted teacher must reach this on the check images
  size_t check_images = 10;
  size_t check_size = 128;
  probe::ProbeConfig probe;
  size_t max_attempts = 16;
};

struct Teacher {
  vit::ViTModel<float> model;
  std::vector<size_t> ramp_channels;  // channels whose encoding holds a ramp
  double joint_xy = 0.0;              // on the check images
  size_t attempts = 0;
  uint64_t model_seed = 0;
};

/// Frozen toy ViT with a learned encoding built from coordinate ramps plus
/// noise. Candidates are drawn from derive_seed(seed, attempt) until one
/// reaches min_joint_xy on noise images; NumericError if none does.
Teacher synth_biased_teacher(uint64_t seed, const TeacherOptions& options = {});

/// The k channels with the highest mean per-channel joint (x, y) R^2 on the
/// given layer of the stacks, in ascending index order. Ties go to the
/// lower channel index.
std::vector<size_t> identify_blank_channels(std::span<const vit::FeatureStack> stacks, size_t k,
                                            const probe::ProbeConfig& config, int layer = -1);

/// Zeroes the blanked channels of a [tokens, channels] target.
std::vector<float> blank_target(std::span<const float> target, size_t channels, std::span<const size_t> blank);

/// Mean over tokens of 1 - cos(student_t, target_t), where the blanked target
/// channels are zeroed first. A token whose target is all zero scores cos = 0
/// and is counted in `flagged`.
template <class T>
ad::Tensor<T> cosine_loss(const ad::Tensor<T>& student, const ad::Tensor<T>& target, std::span<const size_t> blank,
                          size_t* flagged = nullptr);

/// Stack-level form on one layer of each stack. DimensionError on grid or
/// channel mismatch.
double cosine_loss(const vit::FeatureStack& student, const vit::FeatureStack& teacher, std::span<const size_t> blank,
                   size_t* flagged = nullptr, int layer = -1);

/// Mean per-token cosine similarity restricted to the non-blanked channels.
double masked_cosine_similarity(const vit::FeatureStack& student, const vit::FeatureStack& teacher,
                                std::span<const size_t> blank, int layer = -1);

/// Shortest side resized to `size`, then a centered square crop. No
/// augmentation.
io::Image prepare_image(const io::Image& image, size_t size, size_t channels);

struct Example {
  std::string id;
  io::Image image;
};

/// Images of a directory in name order, each prepared at `size`.
std::vector<Example> dataset_pipeline(const std::filesystem::path& dir, size_t size, size_t channels);

/// Either an in-process frozen model or a directory of FEAT1 files keyed by
/// image id. For a stage at image size S the file "<id>_<S>.feat" is used
/// when present, otherwise "<id>.feat"; the last layer is the target.
struct TeacherSource {
  const vit::ViTModel<float>* model = nullptr;
  std::filesystem::path feat_dir;
};

struct DistillStage {
  size_t image_size = 64;
  double lr = 1e-4;
  size_t batch = 32;
  size_t epochs = 5;
};

struct DistillConfig {
  DistillStage low{64, 1e-4, 32, 5};
  DistillStage high{128, 1e-5, 8, 2};
  double weight_decay = 0.01;
  std::vector<size_t> blank_channels;
  uint64_t seed = 0;
  int threads = 0;
};

struct EpochRecord {
  std::string stage;  // "low" or "high"
  size_t epoch = 0;
  double mean_loss = 0.0;
  size_t flagged_tokens = 0;
  std::vector<double> slopes;  // ALiBi slopes after the epoch, when present
};

struct DistillResult {
  vit::ViTModel<float> student;
  std::vector<EpochRecord> curve;
  std::vector<vit::ViTModel<float>> stage_models;  // after low, after high
  size_t steps = 0;
};

/// Trains all non-frozen student parameters with AdamW on the cosine loss
/// against the teacher's final embeddings: the low-resolution stage, then the
/// high-resolution stage. Item gradients in a batch are computed
/// independently and averaged in item order, so results do not depend on the
/// thread count. `progress` is called after every epoch.
DistillResult distill(const vit::ViTModel<float>& student, const TeacherSource& teacher,
                      std::span<const Example> dataset, const DistillConfig& config,
                      const std::function<void(const EpochRecord&)>& progress = {});

/// Teacher embedding of one prepared image from either source kind.
vit::FeatureStack teacher_features(const TeacherSource& teacher, const Example& example, size_t image_size);

}  // namespace dinolens::distill
