// SPDX-License-Identifier: Apache-2.0
#include "seg/segment.hpp"

#include <algorithm>
#include <map>

#include "common/error.hpp"
#include "common/parallel.hpp"
#include "common/rng.hpp"

namespace dinolens::seg {

ScribbleSet synth_scribbles(const io::LabelImage& truth, size_t round, uint64_t seed, size_t classes) {
  const size_t h = truth.height, w = truth.width;
  ScribbleSet out;
  out.labels = io::LabelImage(h, w);
  out.round = round;
  out.provenance = "generated";
  for (size_t c = 1; c <= classes; ++c) {
    std::vector<size_t> region;
    for (size_t i = 0; i < truth.labels.size(); ++i) {
      if (truth.labels[i] == c) region.push_back(i);
    }
    if (region.empty()) continue;
    Rng rng(derive_seed(seed, c));
    size_t at = region[rng.below(region.size())];
    Scribble s;
    s.cls = int(c);
    s.pixels.push_back(at);
    for (size_t step = 0; step < 20 * kScribbleLength && s.pixels.size() < kScribbleLength; ++step) {
      const size_t y = at / w, x = at % w;
      size_t options[4];
      size_t n = 0;
      if (y > 0 && truth.labels[at - w] == c) options[n++] = at - w;
      if (y + 1 < h && truth.labels[at + w] == c) options[n++] = at + w;
      if (x > 0 && truth.labels[at - 1] == c) options[n++] = at - 1;
      if (x + 1 < w && truth.labels[at + 1] == c) options[n++] = at + 1;
      if (n == 0) break;
      at = options[rng.below(n)];
      if (std::find(s.pixels.begin(), s.pixels.end(), at) == s.pixels.end()) s.pixels.push_back(at);
    }
    for (size_t p : s.pixels) out.labels.labels[p] = uint8_t(c);
    out.strokes.push_back(std::move(s));
  }
  return out;
}

io::LabelImage merge_labels(const io::LabelImage& a, const io::LabelImage& b) {
  if (a.height != b.height || a.width != b.width) throw DimensionError("label maps differ in size");
  io::LabelImage out = a;
  for (size_t i = 0; i < b.labels.size(); ++i) {
    if (b.labels[i]) out.labels[i] = b.labels[i];
  }
  return out;
}

MiouResult miou_detail(const io::LabelImage& pred, const io::LabelImage& truth, size_t classes) {
  if (pred.height != truth.height || pred.width != truth.width) {
    throw DimensionError("prediction and truth differ in size");
  }
  if (classes == 0) throw ValidationError("mIoU needs at least one class");
  MiouResult r;
  for (size_t c = 1; c <= classes; ++c) {
    size_t inter = 0, uni = 0;
    for (size_t i = 0; i < pred.labels.size(); ++i) {
      const bool p = pred.labels[i] == c, t = truth.labels[i] == c;
      inter += p && t;
      uni += p || t;
    }
    r.absent.push_back(uni == 0);
    r.per_class.push_back(uni == 0 ? 1.0 : double(inter) / double(uni));
  }
  for (double v : r.per_class) r.value += v;
  r.value /= double(classes);
  return r;
}

double miou(const io::LabelImage& pred, const io::LabelImage& truth, size_t classes) {
  return miou_detail(pred, truth, classes).value;
}

Segmenter fit_segmenter(std::span<const FeatureBank> banks, std::span<const io::LabelImage> scribbles,
                        size_t classes, const GbtParams& params) {
  if (banks.size() != scribbles.size() || banks.empty()) {
    throw ValidationError("need one scribble map per feature bank");
  }
  const size_t nf = banks[0].features();
  std::vector<float> x;
  std::vector<int> y;
  for (size_t b = 0; b < banks.size(); ++b) {
    const auto& bank = banks[b];
    if (bank.names != banks[0].names) throw DimensionError("feature banks have different channels");
    if (scribbles[b].height != bank.height || scribbles[b].width != bank.width) {
      throw DimensionError("scribbles for '" + bank.image_id + "' do not match the image size");
    }
    for (size_t p = 0; p < bank.pixels(); ++p) {
      const uint8_t l = scribbles[b].labels[p];
      if (l == 0) continue;
      if (l > classes) throw ValidationError("scribble label " + std::to_string(l) + " exceeds class count");
      for (size_t f = 0; f < nf; ++f) x.push_back(bank.at(p, f));
      y.push_back(int(l) - 1);
    }
  }
  std::string missing;
  for (size_t c = 1; c <= classes; ++c) {
    if (std::find(y.begin(), y.end(), int(c) - 1) == y.end()) missing += (missing.empty() ? "" : ", ") + std::to_string(c);
  }
  if (!missing.empty()) throw ValidationError("no scribbled pixels for class(es) " + missing);
  Segmenter s;
  s.classes = classes;
  s.feature_names = banks[0].names;
  s.gbt = GbtClassifier::fit(x, nf, y, classes, params);
  return s;
}

io::LabelImage predict_map(const Segmenter& seg, const FeatureBank& bank, int threads) {
  if (bank.names != seg.feature_names) throw DimensionError("feature bank does not match the segmenter's channels");
  io::LabelImage out(bank.height, bank.width);
  const size_t nf = bank.features();
  parallel_for(bank.height, threads > 0 ? threads : default_threads(), [&](size_t y) {
    std::vector<float> row(nf);
    for (size_t x = 0; x < bank.width; ++x) {
      const size_t p = y * bank.width + x;
      for (size_t f = 0; f < nf; ++f) row[f] = bank.at(p, f);
      out.labels[p] = uint8_t(seg.gbt.predict(row.data()) + 1);
    }
  });
  return out;
}

FeatureBank build_bank(const io::Image& image, const vit::ViTModel<float>* model, const std::string& id) {
  const io::Image gray = io::to_gray(image);
  FeatureBank bank = classical_bank(gray, id);
  if (model) bank = concat(bank, deep_bank(*model, io::to_channels(image, model->config().channels), 9, id));
  return bank;
}

BenchResult scribble_rounds_bench(std::span<const io::LabeledImage> train, std::span<const io::LabeledImage> test,
                                  size_t rounds, std::span<const BenchConfig> configs, const GbtParams& params,
                                  uint64_t seed, size_t classes, int threads) {
  if (train.empty() || test.empty()) throw ValidationError("benchmark needs train and test images");
  if (rounds == 0) throw ValidationError("benchmark needs at least one round");
  params.validate();
  const int nt = threads > 0 ? threads : default_threads();
  BenchResult res;
  res.rounds = rounds;
  res.params = params;

  // Scribbles accumulate per training image over rounds.
  std::vector<std::vector<io::LabelImage>> labels(rounds, std::vector<io::LabelImage>(train.size()));
  for (size_t r = 0; r < rounds; ++r) {
    size_t strokes = 0, pixels = 0;
    for (size_t i = 0; i < train.size(); ++i) {
      const auto s = synth_scribbles(train[i].truth, r + 1, derive_seed(seed, i, r), classes);
      strokes += s.strokes.size();
      labels[r][i] = r == 0 ? s.labels : merge_labels(labels[r - 1][i], s.labels);
      for (uint8_t l : labels[r][i].labels) pixels += l != 0;
    }
    res.scribbles.push_back(strokes);
    res.labeled_pixels.push_back(pixels);
  }

  std::vector<FeatureBank> classical_train(train.size()), classical_test(test.size());
  parallel_for(train.size(), nt, [&](size_t i) {
    classical_train[i] = classical_bank(io::to_gray(train[i].image), train[i].id);
  });
  parallel_for(test.size(), nt, [&](size_t i) {
    classical_test[i] = classical_bank(io::to_gray(test[i].image), test[i].id);
  });

  for (const auto& cfg : configs) {
    res.configs.push_back(cfg.name);
    std::vector<FeatureBank> tr = classical_train, te = classical_test;
    if (cfg.model) {
      const size_t ch = cfg.model->config().channels;
      parallel_for(train.size(), nt, [&](size_t i) {
        tr[i] = concat(tr[i], deep_bank(*cfg.model, io::to_channels(train[i].image, ch), 9, train[i].id));
      });
      parallel_for(test.size(), nt, [&](size_t i) {
        te[i] = concat(te[i], deep_bank(*cfg.model, io::to_channels(test[i].image, ch), 9, test[i].id));
      });
    }
    std::vector<double> curve;
    for (size_t r = 0; r < rounds; ++r) {
      const Segmenter seg = fit_segmenter(tr, labels[r], classes, params);
      std::vector<double> scores(test.size());
      for (size_t i = 0; i < test.size(); ++i) scores[i] = miou(predict_map(seg, te[i], nt), test[i].truth, classes);
      double mean = 0;
      for (double s : scores) mean += s;
      curve.push_back(mean / double(test.size()));
    }
    res.miou.push_back(std::move(curve));
  }
  return res;
}

std::vector<io::LabeledImage> load_labeled_dir(const std::filesystem::path& dir, size_t* classes) {
  const auto images = io::list_images(dir / "images");
  if (images.empty()) throw IoError("no images in " + (dir / "images").string());
  std::map<std::string, std::filesystem::path> masks;
  for (const auto& m : io::list_images(dir / "masks")) masks[m.stem().string()] = m;
  std::vector<io::LabeledImage> out;
  size_t k = 0;
  for (const auto& p : images) {
    const auto it = masks.find(p.stem().string());
    if (it == masks.end()) throw IoError("no mask for image " + p.string());
    io::LabeledImage li;
    li.id = p.stem().string();
    li.image = io::read_image(p);
    li.truth = io::read_labels(it->second);
    if (li.truth.height != li.image.height || li.truth.width != li.image.width) {
      throw DimensionError("mask for " + li.id + " does not match the image size");
    }
    for (uint8_t l : li.truth.labels) k = std::max<size_t>(k, l);
    out.push_back(std::move(li));
  }
  if (classes) *classes = k;
  return out;
}

namespace {

io::LabelImage as_labels(const io::Image& im) {
  io::LabelImage out(im.height, im.width);
  for (size_t i = 0; i < out.labels.size(); ++i) out.labels[i] = uint8_t(im.data[i]);
  return out;
}

io::Image as_image(const io::LabelImage& l) {
  io::Image out(1, l.height, l.width);
  for (size_t i = 0; i < l.labels.size(); ++i) out.data[i] = float(l.labels[i]);
  return out;
}

}  // namespace

io::LabelImage transform_labels(const analysis::TransformSpec& t, const io::LabelImage& labels) {
  return as_labels(analysis::apply(t, as_image(labels)));
}

io::LabelImage invert_labels(const analysis::TransformSpec& t, const io::LabelImage& labels) {
  io::Image im = as_image(labels);
  switch (t.kind) {
    case analysis::Transform::Identity: break;
    case analysis::Transform::FlipUD: im = io::flip_ud(im); break;
    case analysis::Transform::Roll: im = io::roll(im, -t.dy, -t.dx); break;
    case analysis::Transform::Rot90: im = io::rot90(io::rot90(io::rot90(im))); break;
  }
  return as_labels(im);
}

std::vector<SegEquivarianceRow> segmentation_equivariance(const Segmenter& seg, const vit::ViTModel<float>* model,
                                                          std::span<const io::LabeledImage> images,
                                                          std::span<const analysis::TransformSpec> transforms,
                                                          int threads) {
  if (images.empty()) throw ValidationError("no images");
  auto score = [&](const analysis::TransformSpec& t) {
    double total = 0;
    for (const auto& li : images) {
      const io::Image moved = analysis::apply(t, li.image);
      const auto pred = predict_map(seg, build_bank(moved, model, li.id), threads);
      total += miou(invert_labels(t, pred), li.truth, seg.classes);
    }
    return total / double(images.size());
  };
  const double base = score({});
  std::vector<SegEquivarianceRow> rows;
  for (const auto& t : transforms) {
    SegEquivarianceRow row;
    row.transform = analysis::to_string(t.kind);
    if (t.kind == analysis::Transform::Roll) row.transform += "(" + std::to_string(t.dy) + "," + std::to_string(t.dx) + ")";
    if (t.kind == analysis::Transform::Rot90 &&
        std::any_of(images.begin(), images.end(), [](const auto& li) { return li.image.height != li.image.width; })) {
      row.skipped = true;
      rows.push_back(row);
      continue;
    }
    row.miou = t.kind == analysis::Transform::Identity ? base : score(t);
    row.delta = row.miou - base;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace dinolens::seg
