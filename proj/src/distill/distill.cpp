// SPDX-License-Identifier: Apache-2.0
#include "distill/distill.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "common/error.hpp"
#include "common/parallel.hpp"
#include "common/rng.hpp"
#include "io/feat1.hpp"
#include "io/synthetic.hpp"

namespace dinolens::distill {

using ad::Tensor;

// ---- teacher -----------------------------------------------------------------

namespace {

constexpr uint64_t kCheckImageSalt = 0x7465616368ULL;

}  // namespace

Teacher synth_biased_teacher(uint64_t seed, const TeacherOptions& options) {
  vit::ViTConfig cfg = options.vit;
  cfg.pe_kind = pe::PEKind::Learned;
  cfg.validate();
  if (options.ramp_channels > cfg.dim) throw ValidationError("more ramp channels than model channels");

  std::vector<io::Image> check;
  for (size_t i = 0; i < options.check_images; ++i) {
    io::Image img = io::noise_image(options.check_size, cfg.channels, derive_seed(seed, kCheckImageSalt, i));
    check.push_back(std::move(img));
  }
  const probe::RampKind kinds[] = {probe::RampKind::LeftRight, probe::RampKind::UpDown, probe::RampKind::Diagonal,
                                   probe::RampKind::Radial};
  double best = -1e300;
  for (size_t attempt = 0; attempt < options.max_attempts; ++attempt) {
    Teacher t;
    t.model_seed = derive_seed(seed, attempt);
    t.attempts = attempt + 1;
    t.model = vit::ViTModel<float>::random(
        cfg, t.model_seed, {.weight_gain = options.weight_gain, .pe_std = options.pe_noise, .register_std = 0.02});
    Rng rng(derive_seed(t.model_seed, 1));
    t.ramp_channels = rng.sample_without_replacement(cfg.dim, options.ramp_channels);
    auto pos = t.model.parameter("pos_embed").mutable_data();
    // Channels are planted in pairs amp * (cos phi, sin phi) with phi running
    // over a quarter turn along the ramp. Both stay monotone, and the pair's
    // norm does not depend on position, so the layer norms do not spread the
    // ramp into the other channels.
    for (size_t k = 0; k < t.ramp_channels.size(); k += 2) {
      const probe::RampTarget ramp = probe::make_ramp(kinds[(k / 2) % 4], cfg.pe_grid.rows, cfg.pe_grid.cols);
      const bool paired = k + 1 < t.ramp_channels.size();
      for (size_t tok = 0; tok < cfg.pe_grid.tokens(); ++tok) {
        if (!paired) {
          pos[tok * cfg.dim + t.ramp_channels[k]] += static_cast<float>(options.ramp_amplitude * (2 * ramp.at(tok) - 1));
          continue;
        }
        const double phi = 0.5 * std::numbers::pi * ramp.at(tok);
        pos[tok * cfg.dim + t.ramp_channels[k]] += static_cast<float>(options.ramp_amplitude * std::cos(phi));
        pos[tok * cfg.dim + t.ramp_channels[k + 1]] += static_cast<float>(options.ramp_amplitude * std::sin(phi));
      }
    }
    for (auto& p : t.model.parameters()) p.set_requires_grad(false);

    std::vector<vit::FeatureStack> stacks(check.size());
    parallel_for(check.size(), default_threads(), [&](size_t i) {
      stacks[i] = vit::forward_features(t.model, check[i], {}, "check" + std::to_string(i));
    });
    t.joint_xy = probe::joint_xy_score(stacks, options.probe);
    best = std::max(best, t.joint_xy);
    if (t.joint_xy >= options.min_joint_xy) return t;
  }
  throw NumericError("no teacher candidate reached joint (x, y) R^2 " + std::to_string(options.min_joint_xy) +
                     " in " + std::to_string(options.max_attempts) + " attempts (best " + std::to_string(best) + ")");
}

std::vector<size_t> identify_blank_channels(std::span<const vit::FeatureStack> stacks, size_t k,
                                            const probe::ProbeConfig& config, int layer) {
  if (k == 0) return {};
  if (stacks.empty()) throw ValidationError("identify_blank_channels: no feature stacks");
  if (k > stacks[0].channels) throw ValidationError("cannot blank more channels than the features have");
  const auto report = probe::probe_layer(stacks, layer, probe::RampKind::XYJoint, config, true, false);
  std::vector<size_t> idx(report.channel_mean.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](size_t a, size_t b) { return report.channel_mean[a] > report.channel_mean[b]; });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// ---- loss --------------------------------------------------------------------

std::vector<float> blank_target(std::span<const float> target, size_t channels, std::span<const size_t> blank) {
  std::vector<float> out(target.begin(), target.end());
  for (size_t c : blank) {
    if (c >= channels) throw ValidationError("blank channel " + std::to_string(c) + " >= channel count " +
                                             std::to_string(channels));
  }
  for (size_t t = 0; t < out.size() / channels; ++t) {
    for (size_t c : blank) out[t * channels + c] = 0.0f;
  }
  return out;
}

template <class T>
Tensor<T> cosine_loss(const Tensor<T>& student, const Tensor<T>& target, std::span<const size_t> blank,
                      size_t* flagged) {
  if (student.shape() != target.shape() || student.dim() != 2) {
    throw DimensionError("cosine_loss: student " + ad::shape_str(student.shape()) + " vs teacher " +
                         ad::shape_str(target.shape()));
  }
  Tensor<T> t = target;
  if (!blank.empty()) {
    const size_t c = target.shape()[1];
    std::vector<T> v(target.data().begin(), target.data().end());
    for (size_t ch : blank) {
      if (ch >= c) throw ValidationError("blank channel out of range");
    }
    for (size_t r = 0; r < target.shape()[0]; ++r) {
      for (size_t ch : blank) v[r * c + ch] = T(0);
    }
    t = Tensor<T>::from(target.shape(), std::move(v));
  }
  return ad::add_scalar(ad::scale(ad::mean(ad::row_cosine(student, t, T(1e-8), flagged)), T(-1)), T(1));
}

template Tensor<float> cosine_loss(const Tensor<float>&, const Tensor<float>&, std::span<const size_t>, size_t*);
template Tensor<double> cosine_loss(const Tensor<double>&, const Tensor<double>&, std::span<const size_t>, size_t*);

namespace {

vit::LayerView checked_layer(const vit::FeatureStack& s, int layer) {
  const long count = long(s.layer_count());
  const long idx = layer < 0 ? count + layer : layer;
  if (idx < 0 || idx >= count) throw DimensionError("layer index out of range");
  return s.layer(size_t(idx));
}

void require_match(const vit::FeatureStack& a, const vit::FeatureStack& b) {
  if (a.grid != b.grid || a.channels != b.channels) {
    throw DimensionError("feature grids differ for image '" + b.image_id + "': student " +
                         std::to_string(a.grid.rows) + "x" + std::to_string(a.grid.cols) + "x" +
                         std::to_string(a.channels) + ", teacher " + std::to_string(b.grid.rows) + "x" +
                         std::to_string(b.grid.cols) + "x" + std::to_string(b.channels));
  }
}

}  // namespace

double cosine_loss(const vit::FeatureStack& student, const vit::FeatureStack& teacher, std::span<const size_t> blank,
                   size_t* flagged, int layer) {
  require_match(student, teacher);
  const auto s = checked_layer(student, layer);
  const auto t = checked_layer(teacher, layer);
  const size_t c = student.channels;
  auto st = Tensor<double>::from({s.tokens(), c}, std::vector<double>(s.values.begin(), s.values.end()));
  auto tt = Tensor<double>::from({t.tokens(), c}, std::vector<double>(t.values.begin(), t.values.end()));
  return cosine_loss(st, tt, blank, flagged).item();
}

double masked_cosine_similarity(const vit::FeatureStack& student, const vit::FeatureStack& teacher,
                                std::span<const size_t> blank, int layer) {
  require_match(student, teacher);
  const auto s = checked_layer(student, layer);
  const auto t = checked_layer(teacher, layer);
  const size_t c = student.channels;
  std::vector<char> keep(c, 1);
  for (size_t b : blank) keep.at(b) = 0;
  double total = 0;
  for (size_t tok = 0; tok < s.tokens(); ++tok) {
    double dot = 0, na = 0, nb = 0;
    for (size_t ch = 0; ch < c; ++ch) {
      if (!keep[ch]) continue;
      const double a = s.at(tok, ch), b = t.at(tok, ch);
      dot += a * b;
      na += a * a;
      nb += b * b;
    }
    if (nb > 0) total += dot / (std::sqrt(na) * std::sqrt(nb) + 1e-8);
  }
  return total / double(s.tokens());
}

// ---- data --------------------------------------------------------------------

io::Image prepare_image(const io::Image& image, size_t size, size_t channels) {
  return io::resize_center_crop(io::to_channels(image, channels), size);
}

std::vector<Example> dataset_pipeline(const std::filesystem::path& dir, size_t size, size_t channels) {
  std::vector<Example> out;
  for (const auto& path : io::list_images(dir)) {
    out.push_back({path.stem().string(), prepare_image(io::read_image(path), size, channels)});
  }
  if (out.empty()) throw IoError("no images found in " + dir.string());
  return out;
}

vit::FeatureStack teacher_features(const TeacherSource& teacher, const Example& example, size_t image_size) {
  if (teacher.model) {
    const io::Image img = prepare_image(example.image, image_size, teacher.model->config().channels);
    return vit::forward_features(*teacher.model, img, {}, example.id);
  }
  if (teacher.feat_dir.empty()) throw ValidationError("teacher source has neither a model nor an embedding directory");
  std::filesystem::path p = teacher.feat_dir / (example.id + "_" + std::to_string(image_size) + ".feat");
  if (!std::filesystem::exists(p)) p = teacher.feat_dir / (example.id + ".feat");
  if (!std::filesystem::exists(p)) throw IoError("no teacher embedding for image '" + example.id + "' in " +
                                                 teacher.feat_dir.string());
  vit::FeatureStack s = io::feat1_read(p);
  s.image_id = example.id;
  return s;
}

// ---- training ----------------------------------------------------------------

DistillResult distill(const vit::ViTModel<float>& student, const TeacherSource& teacher,
                      std::span<const Example> dataset, const DistillConfig& config,
                      const std::function<void(const EpochRecord&)>& progress) {
  const auto kind = student.config().pe_kind;
  if (kind != pe::PEKind::Alibi2D && kind != pe::PEKind::NoPE) {
    throw ContractError(std::string("distillation student must use alibi2d or nope, got ") + pe::to_string(kind));
  }
  for (float v : student.parameter("pos_embed").data()) {
    if (v != 0.0f) throw ContractError("distillation student has a nonzero learned positional encoding");
  }
  const int threads = config.threads > 0 ? config.threads : default_threads();
  DistillResult result;
  result.student = student.clone();
  vit::ViTModel<float>& model = result.student;
  const std::vector<size_t> trainable = model.trainable_indices();
  const size_t c = model.config().dim;

  const DistillStage stages[2] = {config.low, config.high};
  const char* names[2] = {"low", "high"};
  for (size_t si = 0; si < 2; ++si) {
    const DistillStage& stage = stages[si];
    if (stage.epochs > 0 && !dataset.empty()) {
      if (stage.batch == 0) throw ValidationError("batch size must be positive");
      const size_t patch = model.config().patch;
      if (stage.image_size % patch != 0) {
        throw DimensionError("stage image size " + std::to_string(stage.image_size) + " not divisible by patch " +
                             std::to_string(patch));
      }
      const pe::GridShape grid{stage.image_size / patch, stage.image_size / patch};
      // Inputs and blanked targets are fixed for the stage.
      std::vector<io::Image> inputs(dataset.size());
      std::vector<Tensor<float>> targets(dataset.size());
      parallel_for(dataset.size(), threads, [&](size_t i) {
        inputs[i] = prepare_image(dataset[i].image, stage.image_size, model.config().channels);
        const vit::FeatureStack t = teacher_features(teacher, dataset[i], stage.image_size);
        if (t.grid != grid || t.channels != c) {
          throw DimensionError("teacher embedding for image '" + dataset[i].id + "' is " +
                               std::to_string(t.grid.rows) + "x" + std::to_string(t.grid.cols) + "x" +
                               std::to_string(t.channels) + ", student expects " + std::to_string(grid.rows) + "x" +
                               std::to_string(grid.cols) + "x" + std::to_string(c));
        }
        targets[i] = Tensor<float>::from({grid.tokens(), c}, blank_target(t.final_layer().values, c,
                                                                          config.blank_channels));
      });

      std::vector<Tensor<float>> opt_params;
      for (size_t i : trainable) opt_params.push_back(model.parameters()[i]);
      ad::AdamW<float> opt(opt_params, {.lr = stage.lr, .weight_decay = config.weight_decay});

      for (size_t epoch = 0; epoch < stage.epochs; ++epoch) {
        std::vector<size_t> order(dataset.size());
        std::iota(order.begin(), order.end(), 0);
        Rng rng(derive_seed(config.seed, si, epoch));
        rng.shuffle(std::span<size_t>(order));
        double loss_sum = 0;
        size_t flagged_sum = 0;
        for (size_t start = 0; start < order.size(); start += stage.batch) {
          const size_t n = std::min(stage.batch, order.size() - start);
          std::vector<std::vector<std::vector<float>>> grads(n);
          std::vector<double> losses(n);
          std::vector<size_t> flagged(n);
          parallel_for(n, threads, [&](size_t j) {
            const size_t item = order[start + j];
            std::vector<Tensor<float>> params = model.parameters();
            for (size_t i : trainable) params[i] = model.parameters()[i].alias_leaf();
            const auto out = model.forward(inputs[item], {}, params);
            Tensor<float> loss = cosine_loss<float>(out.layers.back(), targets[item], {}, &flagged[j]);
            loss.backward();
            losses[j] = loss.item();
            grads[j].reserve(trainable.size());
            for (size_t i : trainable) {
              const auto g = params[i].grad();
              grads[j].emplace_back(g.begin(), g.end());
            }
          });
          std::vector<std::vector<float>> batch_grad(trainable.size());
          for (size_t k = 0; k < trainable.size(); ++k) {
            batch_grad[k].assign(grads[0][k].size(), 0.0f);
            for (size_t j = 0; j < n; ++j) {
              for (size_t e = 0; e < batch_grad[k].size(); ++e) batch_grad[k][e] += grads[j][k][e];
            }
            for (float& g : batch_grad[k]) g /= static_cast<float>(n);
          }
          opt.step(batch_grad);
          ++result.steps;
          for (size_t j = 0; j < n; ++j) {
            loss_sum += losses[j];
            flagged_sum += flagged[j];
          }
        }
        EpochRecord rec;
        rec.stage = names[si];
        rec.epoch = epoch;
        rec.mean_loss = loss_sum / double(dataset.size());
        rec.flagged_tokens = flagged_sum;
        if (model.has_parameter("alibi.slopes")) {
          const auto s = model.parameter("alibi.slopes").data();
          rec.slopes.assign(s.begin(), s.end());
        }
        result.curve.push_back(rec);
        if (progress) progress(rec);
      }
    }
    result.stage_models.push_back(model.clone());
  }
  return result;
}

}  // namespace dinolens::distill
