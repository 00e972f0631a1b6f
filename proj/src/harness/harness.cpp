// SPDX-License-Identifier: Apache-2.0
#include "harness/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>

#include "analysis/analysis.hpp"
#include "common/error.hpp"
#include "common/format.hpp"
#include "common/hash.hpp"
#include "common/parallel.hpp"
#include "common/rng.hpp"
#include "distill/distill.hpp"
#include "io/feat1.hpp"
#include "io/image.hpp"
#include "io/synthetic.hpp"
#include "posenc/pos_encoding.hpp"
#include "probe/probe.hpp"
#include "seg/segment.hpp"
#include "vit/vit.hpp"

namespace dinolens::harness {

namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------- outputs

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

void write_json(const fs::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

class Csv {
 public:
  explicit Csv(std::vector<std::string> header) { row(header); }
  void row(const std::vector<std::string>& cells) {
    for (size_t i = 0; i < cells.size(); ++i) text_ += (i ? "," : "") + cells[i];
    text_ += "\n";
  }
  void save(const fs::path& path) const { write_text(path, text_); }

 private:
  std::string text_;
};

std::string num(double v) { return fmt_double(v); }

class Log {
 public:
  explicit Log(const fs::path& path) : out_(path, std::ios::binary) {}
  void line(const std::string& msg) {
    out_ << msg << "\n";
    out_.flush();
  }

 private:
  std::ofstream out_;
};

// Row-major 8-bit gray from values mapped linearly [lo, hi] -> [0, 255].
std::vector<uint8_t> gray8(std::span<const double> v, double lo, double hi) {
  std::vector<uint8_t> out(v.size());
  for (size_t i = 0; i < v.size(); ++i) {
    const double t = hi > lo ? (v[i] - lo) / (hi - lo) : 0.0;
    out[i] = uint8_t(std::lround(std::clamp(t, 0.0, 1.0) * 255.0));
  }
  return out;
}

std::vector<uint8_t> upscale(std::span<const uint8_t> px, size_t rows, size_t cols, size_t depth, size_t factor) {
  std::vector<uint8_t> out(rows * factor * cols * factor * depth);
  for (size_t y = 0; y < rows * factor; ++y) {
    for (size_t x = 0; x < cols * factor; ++x) {
      for (size_t d = 0; d < depth; ++d) {
        out[(y * cols * factor + x) * depth + d] = px[((y / factor) * cols + x / factor) * depth + d];
      }
    }
  }
  return out;
}

std::string safe_id(const std::string& id) {
  std::string s = id;
  for (char& c : s) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')) c = '_';
  }
  return s;
}

// ----------------------------------------------------------------- config

Json probe_defaults() {
  return {{"sample_frac", 0.025}, {"repeats", 10}, {"strategy", "random"}, {"ridge", 0.0}};
}

probe::ProbeConfig probe_config(const Json& j, uint64_t seed) {
  probe::ProbeConfig c;
  c.sample_frac = j.at("sample_frac").get<double>();
  c.repeats = j.at("repeats").get<size_t>();
  c.strategy = probe::sample_strategy_from_string(j.at("strategy").get<std::string>());
  c.ridge = j.at("ridge").get<double>();
  c.seed = seed;
  c.validate();
  return c;
}

// source: none | random | teacher | checkpoint. `convert_pe`, when set,
// switches the loaded model to that positional scheme.
Json model_defaults(const std::string& source = "random", uint64_t seed = 0) {
  return {{"source", source},  {"path", ""},       {"seed", seed},         {"pe_kind", "alibi2d"},
          {"convert_pe", ""},  {"patch", 8},       {"dim", 64},            {"heads", 4},
          {"layers", 4},       {"channels", 1},    {"registers", 0},       {"alibi_wrap", true},
          {"weight_gain", 1.0}};
}

Json images_defaults(const std::string& synthetic, size_t count, size_t size, uint64_t seed) {
  return {{"dir", ""},
          {"synthetic", synthetic},
          {"kinds", {"noise", "voronoi", "blobs", "stripes"}},
          {"count", count},
          {"size", size},
          {"seed", seed}};
}

Json gbt_defaults() {
  const seg::GbtParams p;
  return {{"n_trees", p.n_trees},
          {"max_depth", p.max_depth},
          {"learning_rate", p.learning_rate},
          {"lambda", p.lambda},
          {"min_child_weight", p.min_child_weight},
          {"min_gain", p.min_gain},
          {"subsample", p.subsample}};
}

seg::GbtParams gbt_params(const Json& j, uint64_t seed) {
  seg::GbtParams p;
  p.n_trees = j.at("n_trees").get<size_t>();
  p.max_depth = j.at("max_depth").get<size_t>();
  p.learning_rate = j.at("learning_rate").get<double>();
  p.lambda = j.at("lambda").get<double>();
  p.min_child_weight = j.at("min_child_weight").get<double>();
  p.min_gain = j.at("min_gain").get<double>();
  p.subsample = j.at("subsample").get<double>();
  p.seed = seed;
  p.validate();
  return p;
}

Json feature_source_defaults() {
  return {{"feat", ""}, {"patch_px", 8}, {"model", model_defaults("teacher", 1)},
          {"images", images_defaults("homogeneous", 4, 128, 99)}, {"layer", -1}};
}

void merge_into(Json& base, const Json& user, const std::string& prefix) {
  if (!user.is_object()) throw ValidationError("config" + (prefix.empty() ? "" : " key '" + prefix + "'") + " must be an object");
  for (const auto& [key, value] : user.items()) {
    const std::string dotted = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) throw ValidationError("unknown config key '" + dotted + "'");
    Json& slot = base[key];
    if (slot.is_object() && value.is_object()) {
      merge_into(slot, value, dotted);
    } else if (slot.is_object() && !value.is_null()) {
      throw ValidationError("config key '" + dotted + "' must be an object");
    } else {
      slot = value;
    }
  }
}

// ------------------------------------------------------------- resources

struct LoadedModel {
  std::optional<vit::ViTModel<float>> model;
  Json info = Json::object();
};

vit::ViTConfig vit_config(const Json& spec) {
  vit::ViTConfig c;
  c.patch = spec.at("patch").get<size_t>();
  c.dim = spec.at("dim").get<size_t>();
  c.heads = spec.at("heads").get<size_t>();
  c.layers = spec.at("layers").get<size_t>();
  c.channels = spec.at("channels").get<size_t>();
  c.registers = spec.at("registers").get<size_t>();
  c.alibi_wrap = spec.at("alibi_wrap").get<bool>();
  c.pe_kind = pe::pe_kind_from_string(spec.at("pe_kind").get<std::string>());
  c.norm_mean.assign(c.channels, 0.5);
  c.norm_std.assign(c.channels, 0.5);
  return c;
}

LoadedModel load_model(const Json& spec) {
  LoadedModel out;
  const std::string source = spec.at("source").get<std::string>();
  const uint64_t seed = spec.at("seed").get<uint64_t>();
  if (source == "none") return out;
  if (source == "random") {
    vit::InitOptions init;
    init.weight_gain = spec.at("weight_gain").get<double>();
    out.model = vit::ViTModel<float>::random(vit_config(spec), seed, init);
  } else if (source == "teacher") {
    distill::TeacherOptions opt;
    opt.vit = vit_config(spec);
    opt.weight_gain = spec.at("weight_gain").get<double>();
    auto t = distill::synth_biased_teacher(seed, opt);
    out.info = {{"teacher_seed", seed},
                {"model_seed", t.model_seed},
                {"attempts", t.attempts},
                {"check_joint_xy", t.joint_xy},
                {"ramp_channels", t.ramp_channels}};
    out.model = std::move(t.model);
  } else if (source == "checkpoint") {
    out.model = vit::load_checkpoint(spec.at("path").get<std::string>());
  } else {
    throw ValidationError("unknown model source '" + source + "' (expected none, random, teacher or checkpoint)");
  }
  const std::string convert = spec.at("convert_pe").get<std::string>();
  if (!convert.empty()) out.model = out.model->with_pe_kind(pe::pe_kind_from_string(convert));
  return out;
}

std::vector<distill::Example> load_images(const Json& spec, size_t channels) {
  const size_t size = spec.at("size").get<size_t>();
  const std::string dir = spec.at("dir").get<std::string>();
  if (!dir.empty()) return distill::dataset_pipeline(dir, size, channels);
  const size_t count = spec.at("count").get<size_t>();
  const uint64_t seed = spec.at("seed").get<uint64_t>();
  const std::string kind = spec.at("synthetic").get<std::string>();
  std::vector<distill::Example> out;
  char id[32];
  if (kind == "homogeneous") {
    std::vector<io::TextureKind> kinds;
    for (const auto& k : spec.at("kinds")) kinds.push_back(io::texture_kind_from_string(k.get<std::string>()));
    const auto images = io::homogeneous_set(count, size, channels, seed, kinds);
    for (size_t i = 0; i < images.size(); ++i) {
      std::snprintf(id, sizeof(id), "img%03zu", i);
      out.push_back({id, images[i]});
    }
  } else if (kind == "noise") {
    for (size_t i = 0; i < count; ++i) {
      std::snprintf(id, sizeof(id), "noise%03zu", i);
      out.push_back({id, io::noise_image(size, channels, derive_seed(seed, i))});
    }
  } else if (kind == "two_phase") {
    for (auto& li : io::two_phase_set(count, size, seed)) out.push_back({li.id, io::to_channels(li.image, channels)});
  } else {
    throw ValidationError("unknown synthetic image set '" + kind + "' (expected homogeneous, noise or two_phase)");
  }
  return out;
}

std::vector<io::LabeledImage> load_labeled(const Json& spec, size_t* classes) {
  const std::string dir = spec.at("dir").get<std::string>();
  if (!dir.empty()) {
    auto set = seg::load_labeled_dir(dir, classes);
    const size_t size = spec.at("size").get<size_t>();
    (void)size;  // real images are used at their own resolution
    return set;
  }
  if (spec.at("synthetic").get<std::string>() != "two_phase") {
    throw ValidationError("labeled sets are either a directory or synthetic two_phase");
  }
  if (classes) *classes = 2;
  return io::two_phase_set(spec.at("count").get<size_t>(), spec.at("size").get<size_t>(),
                           spec.at("seed").get<uint64_t>());
}

struct FeatureSet {
  std::vector<vit::FeatureStack> stacks;
  size_t patch = 8;
  std::optional<vit::ViTModel<float>> model;
};

std::vector<fs::path> feat_files(const fs::path& p) {
  if (!fs::is_directory(p)) return {p};
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(p)) {
    if (e.is_regular_file() && e.path().extension() == ".feat") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no .feat files in " + p.string());
  return files;
}

FeatureSet load_features(const Json& cfg, bool all_layers) {
  FeatureSet fsr;
  const std::string feat = cfg.at("feat").get<std::string>();
  if (!feat.empty()) {
    for (const auto& f : feat_files(feat)) {
      auto s = io::feat1_read(f);
      s.image_id = f.stem().string();
      fsr.stacks.push_back(std::move(s));
    }
    fsr.patch = cfg.at("patch_px").get<size_t>();
    return fsr;
  }
  auto lm = load_model(cfg.at("model"));
  if (!lm.model) throw ValidationError("features need either 'feat' or a model");
  fsr.model = std::move(lm.model);
  fsr.patch = fsr.model->config().patch;
  const auto images = load_images(cfg.at("images"), fsr.model->config().channels);
  vit::ForwardOptions fo;
  fo.all_layers = all_layers;
  fsr.stacks.resize(images.size());
  parallel_for(images.size(), default_threads(), [&](size_t i) {
    fsr.stacks[i] = vit::forward_features(*fsr.model, images[i].image, fo, images[i].id);
  });
  return fsr;
}

Json fingerprint_summary(const probe::Fingerprint& fp) {
  Json per_layer = Json::array();
  double overall = -INFINITY;
  for (size_t l = 0; l < fp.layer_ids.size(); ++l) {
    double mx = -INFINITY;
    size_t arg = 0;
    for (size_t c = 0; c < fp.channels; ++c) {
      if (fp.at(l, c) > mx) {
        mx = fp.at(l, c);
        arg = c;
      }
    }
    overall = std::max(overall, mx);
    per_layer.push_back({{"layer", fp.layer_ids[l]}, {"max_r2", mx}, {"channel", arg}, {"full_r2", fp.full_r2[l]}});
  }
  return {{"ramp", probe::to_string(fp.ramp)}, {"max_r2", overall}, {"layers", per_layer}};
}

Json write_fingerprint(const std::vector<vit::FeatureStack>& stacks, probe::RampKind ramp,
                       const probe::ProbeConfig& pc, const std::string& name, const fs::path& dir) {
  const auto fp = probe::fingerprint(stacks, ramp, pc, name, default_threads());
  probe::write_fingerprint_csv(fp, dir / ("fingerprint_" + name + ".csv"));
  probe::write_fingerprint_png(fp, dir / ("fingerprint_" + name + ".png"));
  return fingerprint_summary(fp);
}

// Labels 1..K rendered over the gray image, half-transparent.
void write_overlay(const fs::path& path, const io::Image& image, const io::LabelImage& labels) {
  static const uint8_t kColors[8][3] = {{0, 0, 0},     {230, 25, 75},  {60, 180, 75},  {0, 130, 200},
                                        {255, 225, 25}, {145, 30, 180}, {70, 240, 240}, {245, 130, 48}};
  const io::Image gray = io::to_gray(image);
  std::vector<uint8_t> rgb(labels.labels.size() * 3);
  for (size_t p = 0; p < labels.labels.size(); ++p) {
    const double g = std::clamp(double(gray.data[p]), 0.0, 1.0) * 255.0;
    const uint8_t* c = kColors[labels.labels[p] % 8];
    for (size_t d = 0; d < 3; ++d) rgb[p * 3 + d] = uint8_t(std::lround(0.5 * g + 0.5 * c[d]));
  }
  io::write_png_rgb(path, labels.height, labels.width, rgb);
}

// --------------------------------------------------------------- commands

using Runner = std::function<Json(const Json& cfg, const fs::path& dir, Log& log)>;

struct Command {
  std::function<Json()> defaults;
  Runner run;
};

Json cmd_export_alibi(const Json& cfg, const fs::path& dir, Log&) {
  const size_t rows = cfg.at("rows").get<size_t>(), cols = cfg.at("cols").get<size_t>();
  const bool wrap = cfg.at("wrap").get<bool>();
  const auto d = pe::build_alibi(rows, cols, wrap);
  const size_t n = rows * cols;
  std::string text;
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < n; ++j) text += (j ? "," : "") + num(d[i * n + j]);
    text += "\n";
  }
  write_text(dir / "alibi.csv", text);
  return {{"rows", rows}, {"cols", cols}, {"wrap", wrap}, {"tokens", n}, {"max_distance", pe::max_grid_distance({rows, cols}, wrap)}};
}

Json cmd_probe(const Json& cfg, const fs::path& dir, Log& log) {
  const auto fsr = load_features(cfg, false);
  const auto pc = probe_config(cfg.at("probe"), cfg.at("seed").get<uint64_t>());
  const int layer = cfg.at("layer").get<int>();
  Json ramps = Json::array();
  for (const auto& r : cfg.at("ramps")) {
    const auto kind = probe::ramp_kind_from_string(r.get<std::string>());
    const auto rep = probe::probe_layer(fsr.stacks, layer, kind, pc, true, true, default_threads());
    probe::write_channel_csv(rep, dir / ("channels_" + std::string(probe::to_string(kind)) + ".csv"));
    Json j = probe::report_json(rep);
    j["full_stack_r2"] = rep.full_mean;
    log.line(std::string(probe::to_string(kind)) + ": full " + num(rep.full_mean));
    ramps.push_back(std::move(j));
  }
  return {{"images", fsr.stacks.size()}, {"layer", layer}, {"ramps", ramps}};
}

Json cmd_fingerprint(const Json& cfg, const fs::path& dir, Log&) {
  const auto fsr = load_features(cfg, true);
  const auto pc = probe_config(cfg.at("probe"), cfg.at("seed").get<uint64_t>());
  Json out = Json::array();
  for (const auto& r : cfg.at("ramps")) {
    out.push_back(write_fingerprint(fsr.stacks, probe::ramp_kind_from_string(r.get<std::string>()), pc,
                                    r.get<std::string>(), dir));
  }
  return {{"images", fsr.stacks.size()}, {"fingerprints", out}};
}

Json cmd_teacher(const Json& cfg, const fs::path& dir, Log& log) {
  const uint64_t seed = cfg.at("seed").get<uint64_t>();
  Json spec = cfg.at("model");
  spec["source"] = "teacher";
  spec["seed"] = seed;
  spec["path"] = "";
  spec["convert_pe"] = "";
  auto lm = load_model(spec);
  const auto& model = *lm.model;
  vit::save_checkpoint(model, dir / "teacher.vitw");
  const auto pc = probe_config(cfg.at("probe"), seed);
  const auto held = load_images(cfg.at("held"), model.config().channels);
  std::vector<vit::FeatureStack> stacks(held.size());
  parallel_for(held.size(), default_threads(),
               [&](size_t i) { stacks[i] = vit::forward_features(model, held[i].image, {}, held[i].id); });
  const auto blank = distill::identify_blank_channels(stacks, cfg.at("blank_k").get<size_t>(), pc);
  Json out = lm.info;
  out["held_joint_xy"] = probe::joint_xy_score(stacks, pc, -1, default_threads());
  out["blank_channels"] = blank;
  log.line("teacher accepted after " + lm.info["attempts"].dump() + " attempt(s)");

  // Optional FEAT1 export for use as a file-based teacher source.
  const auto& ex = cfg.at("export");
  if (!ex.at("sizes").empty()) {
    fs::create_directories(dir / "feat");
    Json files = Json::array();
    for (const auto& s : ex.at("sizes")) {
      const size_t size = s.get<size_t>();
      Json ispec = ex.at("images");
      ispec["size"] = size;
      for (const auto& e : load_images(ispec, model.config().channels)) {
        const auto name = e.id + "_" + std::to_string(size) + ".feat";
        io::feat1_write(vit::forward_features(model, e.image, {}, e.id), dir / "feat" / name);
        files.push_back("feat/" + name);
      }
    }
    out["feat_files"] = files;
  }
  return out;
}

Json cmd_distill(const Json& cfg, const fs::path& dir, Log& log) {
  const uint64_t seed = cfg.at("seed").get<uint64_t>();
  const auto pc = probe_config(cfg.at("probe"), cfg.at("probe_seed").get<uint64_t>());
  const std::string feat_dir = cfg.at("teacher_feat_dir").get<std::string>();
  Json meta = {{"distill_seed", seed}, {"probe_seed", pc.seed}};

  LoadedModel teacher;
  if (feat_dir.empty()) {
    teacher = load_model(cfg.at("teacher"));
    if (!teacher.model) throw ValidationError("distill needs a teacher model or teacher_feat_dir");
    vit::save_checkpoint(*teacher.model, dir / "teacher.vitw");
    meta["teacher"] = teacher.info;
    meta["teacher"]["seed"] = cfg.at("teacher").at("seed");
  }
  const auto& st = cfg.at("student");
  const auto pe_kind = pe::pe_kind_from_string(st.at("pe_kind").get<std::string>());
  vit::ViTModel<float> student0;
  if (st.at("from_teacher").get<bool>()) {
    if (!teacher.model) throw ValidationError("student.from_teacher needs an in-process teacher");
    student0 = teacher.model->with_pe_kind(pe_kind, st.at("slopes_trainable").get<bool>());
  } else {
    auto lm = load_model(st.at("model"));
    if (!lm.model) throw ValidationError("student.model must name a model");
    student0 = lm.model->with_pe_kind(pe_kind, st.at("slopes_trainable").get<bool>());
    meta["student_model_seed"] = st.at("model").at("seed");
  }
  const size_t channels = student0.config().channels;
  distill::TeacherSource source{teacher.model ? &*teacher.model : nullptr, feat_dir};

  const auto dataset = load_images(cfg.at("dataset"), channels);
  const auto held = load_images(cfg.at("held"), channels);
  meta["dataset_seed"] = cfg.at("dataset").at("seed");
  meta["held_seed"] = cfg.at("held").at("seed");
  const size_t eval_size = cfg.at("held").at("size").get<size_t>();

  std::vector<vit::FeatureStack> teacher_held(held.size());
  parallel_for(held.size(), default_threads(),
               [&](size_t i) { teacher_held[i] = distill::teacher_features(source, held[i], eval_size); });
  std::vector<size_t> blank;
  const auto& bl = cfg.at("blank");
  if (bl.at("channels").is_array()) {
    blank = bl.at("channels").get<std::vector<size_t>>();
  } else {
    blank = distill::identify_blank_channels(teacher_held, bl.at("k").get<size_t>(), pc);
  }
  log.line("blank channels: " + Json(blank).dump());

  distill::DistillConfig dc;
  auto stage = [](const Json& j) {
    return distill::DistillStage{j.at("image_size").get<size_t>(), j.at("lr").get<double>(),
                                 j.at("batch").get<size_t>(), j.at("epochs").get<size_t>()};
  };
  dc.low = stage(cfg.at("low"));
  dc.high = stage(cfg.at("high"));
  dc.weight_decay = cfg.at("weight_decay").get<double>();
  dc.blank_channels = blank;
  dc.seed = seed;
  dc.threads = default_threads();

  auto evaluate = [&](const vit::ViTModel<float>& m, bool all_layers) {
    std::vector<vit::FeatureStack> s(held.size());
    vit::ForwardOptions fo;
    fo.all_layers = all_layers;
    parallel_for(held.size(), default_threads(),
                 [&](size_t i) { s[i] = vit::forward_features(m, held[i].image, fo, held[i].id); });
    return s;
  };
  auto masked_cos = [&](const std::vector<vit::FeatureStack>& s) {
    double total = 0;
    for (size_t i = 0; i < s.size(); ++i) total += distill::masked_cosine_similarity(s[i], teacher_held[i], blank);
    return total / double(s.size());
  };
  const double init_cos = masked_cos(evaluate(student0, false));

  Csv loss({"stage", "epoch", "mean_loss", "flagged_tokens", "slopes"});
  auto result = distill::distill(student0, source, dataset, dc, [&](const distill::EpochRecord& r) {
    std::string slopes;
    for (size_t i = 0; i < r.slopes.size(); ++i) slopes += (i ? ";" : "") + num(r.slopes[i]);
    loss.row({r.stage, std::to_string(r.epoch), num(r.mean_loss), std::to_string(r.flagged_tokens), slopes});
    log.line(r.stage + " epoch " + std::to_string(r.epoch) + " loss " + num(r.mean_loss));
  });
  loss.save(dir / "loss.csv");
  if (!result.stage_models.empty()) vit::save_checkpoint(result.stage_models.front(), dir / "student_low.vitw");
  vit::save_checkpoint(result.student, dir / "student.vitw");

  const auto student_held = evaluate(result.student, true);
  const double teacher_joint = probe::joint_xy_score(teacher_held, pc, -1, default_threads());
  const double student_joint = probe::joint_xy_score(student_held, pc, -1, default_threads());
  // Mean |activation| on blanked vs. other channels of the final layer.
  double act_blank = 0, act_other = 0;
  size_t n_blank = 0, n_other = 0;
  for (const auto& s : student_held) {
    const auto& layer = s.layers.back();
    for (size_t t = 0; t < s.tokens(); ++t) {
      for (size_t c = 0; c < s.channels; ++c) {
        const double a = std::fabs(layer[t * s.channels + c]);
        if (std::find(blank.begin(), blank.end(), c) != blank.end()) {
          act_blank += a;
          ++n_blank;
        } else {
          act_other += a;
          ++n_other;
        }
      }
    }
  }
  const double ratio = n_blank && n_other && act_other > 0 ? (act_blank / double(n_blank)) / (act_other / double(n_other)) : 0.0;

  Json out = {{"teacher_joint_xy", teacher_joint},
              {"student_joint_xy", student_joint},
              {"joint_xy_drop", teacher_joint - student_joint},
              {"initial_masked_cosine", init_cos},
              {"masked_cosine", masked_cos(student_held)},
              {"blank_channels", blank},
              {"blank_activation_ratio", ratio},
              {"steps", result.steps},
              {"first_epoch_loss", result.curve.empty() ? 0.0 : result.curve.front().mean_loss},
              {"final_epoch_loss", result.curve.empty() ? 0.0 : result.curve.back().mean_loss}};

  const auto& fpc = cfg.at("fingerprint");
  if (!fpc.at("ramps").empty()) {
    Json fps = Json::object();
    std::vector<vit::FeatureStack> teacher_all;
    if (teacher.model) teacher_all = evaluate(*teacher.model, true);
    Json tf = Json::array(), sf = Json::array();
    for (const auto& r : fpc.at("ramps")) {
      const auto kind = probe::ramp_kind_from_string(r.get<std::string>());
      if (teacher.model) tf.push_back(write_fingerprint(teacher_all, kind, pc, "teacher_" + r.get<std::string>(), dir));
      sf.push_back(write_fingerprint(student_held, kind, pc, "student_" + r.get<std::string>(), dir));
    }
    out["teacher_fingerprint"] = tf;
    out["student_fingerprint"] = sf;
  }
  meta["student_pe_kind"] = st.at("pe_kind");
  meta["batch"] = {cfg.at("low").at("batch"), cfg.at("high").at("batch")};
  write_json(dir / "metadata.json", meta);
  return out;
}

Json cmd_pca(const Json& cfg, const fs::path& dir, Log&) {
  const auto fsr = load_features(cfg, false);
  const int layer = cfg.at("layer").get<int>();
  const size_t d = cfg.at("components").get<size_t>();
  const bool standardize = cfg.at("standardize").get<bool>();
  Json per_image = Json::array();
  auto save = [&](const io::Image& rgb, const std::string& id) {
    const auto px = analysis::to_rgb8(rgb, fsr.patch);
    io::write_png_rgb(dir / ("pca_" + safe_id(id) + ".png"), rgb.height * fsr.patch, rgb.width * fsr.patch, px);
  };
  Csv csv({"image", "component", "explained"});
  if (cfg.at("shared").get<bool>()) {
    const auto model = analysis::pca_fit(fsr.stacks, d, standardize, {}, layer);
    const auto images = analysis::pca_rgb_shared(fsr.stacks, model, layer);
    for (size_t i = 0; i < images.size(); ++i) save(images[i], fsr.stacks[i].image_id);
    for (size_t k = 0; k < model.explained.size(); ++k) csv.row({"shared", std::to_string(k), num(model.explained[k])});
    per_image.push_back({{"image", "shared"}, {"explained", model.explained}});
  } else {
    for (const auto& s : fsr.stacks) {
      const auto model = analysis::pca_fit(analysis::layer_matrix(s, layer), d, standardize);
      save(analysis::pca_rgb(s, model, layer), s.image_id);
      for (size_t k = 0; k < model.explained.size(); ++k) csv.row({s.image_id, std::to_string(k), num(model.explained[k])});
      per_image.push_back({{"image", s.image_id}, {"explained", model.explained}});
    }
  }
  csv.save(dir / "explained.csv");
  return {{"images", fsr.stacks.size()}, {"fits", per_image}};
}

Json cmd_kmeans(const Json& cfg, const fs::path& dir, Log&) {
  const auto fsr = load_features(cfg, false);
  analysis::KMeansOptions opt;
  opt.n_init = cfg.at("n_init").get<size_t>();
  opt.max_iter = cfg.at("max_iter").get<size_t>();
  opt.standardize = cfg.at("standardize").get<bool>();
  opt.seed = cfg.at("seed").get<uint64_t>();
  opt.threads = default_threads();
  const size_t k = cfg.at("k").get<size_t>();
  Json rows = Json::array();
  for (const auto& s : fsr.stacks) {
    const auto r = analysis::kmeans(s, k, opt, cfg.at("layer").get<int>());
    io::LabelImage labels(s.grid.rows, s.grid.cols);
    std::string text;
    for (size_t t = 0; t < s.tokens(); ++t) {
      labels.labels[t] = uint8_t(r.labels[t] + 1);
      text += std::to_string(r.labels[t]) + ((t + 1) % s.grid.cols ? "," : "\n");
    }
    write_text(dir / ("labels_" + safe_id(s.image_id) + ".csv"), text);
    io::LabelImage big(s.grid.rows * fsr.patch, s.grid.cols * fsr.patch);
    for (size_t y = 0; y < big.height; ++y) {
      for (size_t x = 0; x < big.width; ++x) big.at(y, x) = labels.at(y / fsr.patch, x / fsr.patch);
    }
    io::write_png_indexed(dir / ("clusters_" + safe_id(s.image_id) + ".png"), big);
    rows.push_back({{"image", s.image_id}, {"inertia", r.inertia}, {"best_init", r.best_init}});
  }
  return {{"k", k}, {"images", rows}};
}

Json cmd_similarity(const Json& cfg, const fs::path& dir, Log&) {
  const auto fsr = load_features(cfg, false);
  const auto q = cfg.at("query").get<std::vector<size_t>>();
  if (q.size() != 2) throw ValidationError("query must be [row, col]");
  Json rows = Json::array();
  for (const auto& s : fsr.stacks) {
    if (q[0] >= s.grid.rows || q[1] >= s.grid.cols) throw DimensionError("query token outside the grid of " + s.image_id);
    const auto m = analysis::cosine_map(s, q[0] * s.grid.cols + q[1], cfg.at("layer").get<int>());
    std::string text;
    for (size_t t = 0; t < m.values.size(); ++t) text += num(m.values[t]) + ((t + 1) % s.grid.cols ? "," : "\n");
    write_text(dir / ("sim_" + safe_id(s.image_id) + ".csv"), text);
    const auto px = upscale(gray8(m.values, -1.0, 1.0), s.grid.rows, s.grid.cols, 1, fsr.patch);
    io::write_png_gray(dir / ("sim_" + safe_id(s.image_id) + ".png"), s.grid.rows * fsr.patch,
                       s.grid.cols * fsr.patch, px);
    const auto [lo, hi] = std::minmax_element(m.values.begin(), m.values.end());
    rows.push_back({{"image", s.image_id}, {"min", *lo}, {"max", *hi}});
  }
  return {{"query", q}, {"images", rows}};
}

Json cmd_diag_zero(const Json& cfg, const fs::path& dir, Log&) {
  auto lm = load_model(cfg.at("model"));
  if (!lm.model) throw ValidationError("diag-zero needs a model");
  const auto sigmas = cfg.at("sigmas").get<std::vector<double>>();
  const auto seeds = cfg.at("seeds").get<std::vector<uint64_t>>();
  const auto rows = analysis::zero_input_diagnostic(*lm.model, sigmas, seeds, cfg.at("size").get<size_t>());
  Csv csv({"input", "sigma", "seed", "token_std"});
  Json out = Json::array();
  for (const auto& r : rows) {
    csv.row({r.input, num(r.sigma), std::to_string(r.seed), num(r.token_std)});
    out.push_back({{"input", r.input}, {"sigma", r.sigma}, {"seed", r.seed}, {"token_std", r.token_std}});
  }
  csv.save(dir / "diag.csv");
  return {{"rows", out}};
}

Json cmd_sweep(const Json& cfg, const fs::path& dir, Log&) {
  auto lm = load_model(cfg.at("model"));
  if (!lm.model) throw ValidationError("sweep needs a model");
  const auto images = load_images(cfg.at("image"), lm.model->config().channels);
  if (images.empty()) throw ValidationError("sweep needs an image");
  const auto sizes = cfg.at("sizes").get<std::vector<size_t>>();
  const auto entries = analysis::resolution_sweep(*lm.model, images.front().image, sizes);
  Csv csv({"size", "rows", "cols", "token_spread", "pc1_explained"});
  Json out = Json::array();
  const size_t patch = lm.model->config().patch;
  for (const auto& e : entries) {
    const auto model = analysis::pca_fit(analysis::layer_matrix(e.stack), 3, true);
    const auto rgb = analysis::pca_rgb(e.stack, model);
    io::write_png_rgb(dir / ("pca_" + std::to_string(e.size) + ".png"), rgb.height * patch, rgb.width * patch,
                      analysis::to_rgb8(rgb, patch));
    const double spread = analysis::token_spread(e.stack);
    csv.row({std::to_string(e.size), std::to_string(e.stack.grid.rows), std::to_string(e.stack.grid.cols), num(spread),
             num(model.explained[0])});
    out.push_back({{"size", e.size}, {"token_spread", spread}, {"pc1_explained", model.explained[0]}});
  }
  csv.save(dir / "sweep.csv");
  return {{"image", images.front().id}, {"sizes", out}};
}

std::vector<analysis::TransformSpec> transforms_from(const Json& cfg) {
  std::vector<analysis::TransformSpec> out;
  const auto roll = cfg.at("roll").get<std::vector<long>>();
  if (roll.size() != 2) throw ValidationError("roll must be [dy, dx] in pixels");
  for (const auto& t : cfg.at("transforms")) {
    analysis::TransformSpec s;
    s.kind = analysis::transform_from_string(t.get<std::string>());
    if (s.kind == analysis::Transform::Roll) {
      s.dy = roll[0];
      s.dx = roll[1];
    }
    out.push_back(s);
  }
  return out;
}

Json cmd_equivariance(const Json& cfg, const fs::path& dir, Log&) {
  auto lm = load_model(cfg.at("model"));
  if (!lm.model) throw ValidationError("equivariance needs a model");
  const auto examples = load_images(cfg.at("images"), lm.model->config().channels);
  std::vector<io::Image> images;
  for (const auto& e : examples) images.push_back(e.image);
  const auto rows = analysis::equivariance_report(*lm.model, images, transforms_from(cfg));
  Csv csv({"transform", "discrepancy", "skipped", "note"});
  Json out = Json::array();
  for (const auto& r : rows) {
    csv.row({r.transform, num(r.discrepancy), r.skipped ? "1" : "0", r.note});
    out.push_back({{"transform", r.transform}, {"discrepancy", r.discrepancy}, {"skipped", r.skipped}, {"note", r.note}});
  }
  csv.save(dir / "equivariance.csv");
  return {{"pe_kind", pe::to_string(lm.model->config().pe_kind)}, {"rows", out}};
}

Json cmd_segment(const Json& cfg, const fs::path& dir, Log& log) {
  const uint64_t seed = cfg.at("seed").get<uint64_t>();
  size_t classes = 0, test_classes = 0;
  const auto train = load_labeled(cfg.at("train"), &classes);
  const auto test = load_labeled(cfg.at("test"), &test_classes);
  classes = std::max(classes, test_classes);
  auto lm = load_model(cfg.at("model"));
  const vit::ViTModel<float>* model = lm.model ? &*lm.model : nullptr;
  const auto params = gbt_params(cfg.at("gbt"), seed);

  std::vector<seg::FeatureBank> banks(train.size());
  parallel_for(train.size(), default_threads(),
               [&](size_t i) { banks[i] = seg::build_bank(train[i].image, model, train[i].id); });
  std::vector<io::LabelImage> scribbles;
  const std::string sdir = cfg.at("scribbles_dir").get<std::string>();
  const size_t rounds = cfg.at("rounds").get<size_t>();
  for (size_t i = 0; i < train.size(); ++i) {
    io::LabelImage l;
    if (!sdir.empty()) {
      const fs::path p = fs::path(sdir) / (train[i].id + ".png");
      if (!fs::exists(p)) throw IoError("no scribble file " + p.string());
      l = io::read_labels(p);
    } else {
      for (size_t r = 0; r < rounds; ++r) {
        const auto s = seg::synth_scribbles(train[i].truth, r + 1, derive_seed(seed, i, r), classes);
        l = r == 0 ? s.labels : seg::merge_labels(l, s.labels);
      }
    }
    io::write_png_indexed(dir / ("scribbles_" + safe_id(train[i].id) + ".png"), l);
    scribbles.push_back(std::move(l));
  }
  const auto segm = seg::fit_segmenter(banks, scribbles, classes, params);
  log.line("segmenter: " + std::to_string(segm.feature_names.size()) + " features, " + std::to_string(classes) +
           " classes");

  Csv csv({"image", "miou"});
  double total = 0;
  for (const auto& t : test) {
    const auto pred = seg::predict_map(segm, seg::build_bank(t.image, model, t.id), default_threads());
    io::write_png_indexed(dir / ("pred_" + safe_id(t.id) + ".png"), pred);
    write_overlay(dir / ("overlay_" + safe_id(t.id) + ".png"), t.image, pred);
    const double m = seg::miou(pred, t.truth, classes);
    total += m;
    csv.row({t.id, num(m)});
  }
  csv.save(dir / "miou.csv");
  Json out = {{"classes", classes},
              {"features", segm.feature_names.size()},
              {"mean_miou", test.empty() ? 0.0 : total / double(test.size())},
              {"gbt", cfg.at("gbt")}};
  if (cfg.at("equivariance").get<bool>()) {
    Json tcfg = {{"transforms", {"identity", "flip_ud", "roll", "rot90"}}, {"roll", {16, 8}}};
    const auto rows = seg::segmentation_equivariance(segm, model, test, transforms_from(tcfg), default_threads());
    Csv ecsv({"transform", "miou", "delta", "skipped"});
    Json eq = Json::array();
    for (const auto& r : rows) {
      ecsv.row({r.transform, num(r.miou), num(r.delta), r.skipped ? "1" : "0"});
      eq.push_back({{"transform", r.transform}, {"miou", r.miou}, {"delta", r.delta}, {"skipped", r.skipped}});
    }
    ecsv.save(dir / "seg_equivariance.csv");
    out["equivariance"] = eq;
  }
  return out;
}

Json bench_config_defaults() { return {{"name", ""}, {"model", model_defaults("none")}}; }

Json cmd_bench_seg(const Json& cfg, const fs::path& dir, Log& log) {
  const uint64_t seed = cfg.at("seed").get<uint64_t>();
  size_t classes = 0, test_classes = 0;
  const auto train = load_labeled(cfg.at("train"), &classes);
  const auto test = load_labeled(cfg.at("test"), &test_classes);
  classes = std::max(classes, test_classes);
  std::vector<LoadedModel> models;
  std::vector<seg::BenchConfig> configs;
  for (const auto& c : cfg.at("configs")) models.push_back(load_model(c.at("model")));
  for (size_t i = 0; i < models.size(); ++i) {
    configs.push_back({cfg.at("configs")[i].at("name").get<std::string>(), models[i].model ? &*models[i].model : nullptr});
  }
  const auto params = gbt_params(cfg.at("gbt"), seed);
  const auto r = seg::scribble_rounds_bench(train, test, cfg.at("rounds").get<size_t>(), configs, params, seed,
                                            classes, default_threads());
  Csv csv({"round", "config", "miou"});
  Json curves = Json::object();
  for (size_t c = 0; c < r.configs.size(); ++c) {
    for (size_t k = 0; k < r.rounds; ++k) {
      csv.row({std::to_string(k + 1), r.configs[c], num(r.miou[c][k])});
      log.line("round " + std::to_string(k + 1) + " " + r.configs[c] + " mIoU " + num(r.miou[c][k]));
    }
    curves[r.configs[c]] = r.miou[c];
  }
  csv.save(dir / "curves.csv");
  return {{"classes", classes},
          {"train_images", train.size()},
          {"test_images", test.size()},
          {"rounds", r.rounds},
          {"miou", curves},
          {"scribbles_per_round", r.scribbles},
          {"labeled_pixels", r.labeled_pixels},
          {"gbt", cfg.at("gbt")}};
}

const std::map<std::string, Command>& registry() {
  static const std::map<std::string, Command> reg = [] {
    std::map<std::string, Command> m;
    auto feature_cmd = [](Json extra) {
      Json d = feature_source_defaults();
      for (auto& [k, v] : extra.items()) d[k] = v;
      return d;
    };
    m["export-alibi"] = {[] { return Json{{"rows", 2}, {"cols", 2}, {"wrap", true}}; }, cmd_export_alibi};
    m["probe"] = {[=] {
                    return feature_cmd({{"ramps", {"left_right", "up_down", "diagonal", "radial", "xy", "random"}},
                                        {"probe", probe_defaults()}});
                  },
                  cmd_probe};
    m["fingerprint"] = {[=] { return feature_cmd({{"ramps", {"left_right"}}, {"probe", probe_defaults()}}); },
                        cmd_fingerprint};
    m["teacher"] = {[] {
                      Json model = model_defaults("teacher", 1);
                      for (const char* k : {"source", "seed", "path", "convert_pe"}) model.erase(k);
                      return Json{{"seed", 1},
                                  {"model", model},
                                  {"held", images_defaults("homogeneous", 10, 128, 99)},
                                  {"blank_k", 4},
                                  {"probe", probe_defaults()},
                                  {"export", {{"sizes", Json::array()}, {"images", images_defaults("homogeneous", 10, 128, 77)}}}};
                    },
                    cmd_teacher};
    m["distill"] = {[] {
                      const distill::DistillConfig dc;
                      auto stage = [](const distill::DistillStage& s) {
                        return Json{{"image_size", s.image_size}, {"lr", s.lr}, {"batch", s.batch}, {"epochs", s.epochs}};
                      };
                      return Json{{"teacher", model_defaults("teacher", 1)},
                                  {"teacher_feat_dir", ""},
                                  {"student",
                                   {{"from_teacher", true},
                                    {"pe_kind", "alibi2d"},
                                    {"slopes_trainable", false},
                                    {"model", model_defaults("random", 0)}}},
                                  {"dataset", images_defaults("homogeneous", 200, 128, 77)},
                                  {"held", images_defaults("homogeneous", 10, 128, 99)},
                                  {"blank", {{"k", 4}, {"channels", nullptr}}},
                                  {"low", stage(dc.low)},
                                  {"high", stage(dc.high)},
                                  {"weight_decay", dc.weight_decay},
                                  {"probe", probe_defaults()},
                                  {"probe_seed", 0},
                                  {"fingerprint", {{"ramps", {"left_right"}}}}};
                    },
                    cmd_distill};
    m["pca"] = {[=] { return feature_cmd({{"components", 3}, {"standardize", true}, {"shared", true}}); }, cmd_pca};
    m["kmeans"] = {[=] {
                     return feature_cmd({{"k", 4}, {"n_init", 15}, {"max_iter", 300}, {"standardize", true}});
                   },
                   cmd_kmeans};
    m["similarity"] = {[=] { return feature_cmd({{"query", {0, 0}}}); }, cmd_similarity};
    m["diag-zero"] = {[] {
                        return Json{{"model", model_defaults("teacher", 1)},
                                    {"sigmas", {0.0, 0.05, 0.1}},
                                    {"seeds", {0, 1, 2}},
                                    {"size", 64}};
                      },
                      cmd_diag_zero};
    m["sweep"] = {[] {
                    return Json{{"model", model_defaults("teacher", 1)},
                                {"image", images_defaults("homogeneous", 1, 128, 99)},
                                {"sizes", {64, 96, 128, 192}}};
                  },
                  cmd_sweep};
    m["equivariance"] = {[] {
                           return Json{{"model", model_defaults("random", 0)},
                                       {"images", images_defaults("homogeneous", 4, 64, 99)},
                                       {"transforms", {"identity", "flip_ud", "roll", "rot90"}},
                                       {"roll", {16, 8}}};
                         },
                         cmd_equivariance};
    m["segment"] = {[] {
                      return Json{{"train", images_defaults("two_phase", 5, 128, 5)},
                                  {"test", images_defaults("two_phase", 17, 128, 6)},
                                  {"scribbles_dir", ""},
                                  {"rounds", 1},
                                  {"model", model_defaults("none")},
                                  {"gbt", gbt_defaults()},
                                  {"equivariance", false}};
                    },
                    cmd_segment};
    m["bench-seg"] = {[] {
                        Json classical = bench_config_defaults();
                        classical["name"] = "classical";
                        Json teacher = bench_config_defaults();
                        teacher["name"] = "classical+teacher";
                        teacher["model"] = model_defaults("teacher", 1);
                        return Json{{"train", images_defaults("two_phase", 5, 128, 5)},
                                    {"test", images_defaults("two_phase", 17, 128, 6)},
                                    {"rounds", 5},
                                    {"configs", {classical, teacher}},
                                    {"gbt", gbt_defaults()}};
                      },
                      cmd_bench_seg};
    for (auto& [name, c] : m) {
      auto inner = c.defaults;
      c.defaults = [inner] {
        Json d = {{"seed", 0}};
        const Json rest = inner();
        for (const auto& [k, v] : rest.items()) d[k] = v;
        return d;
      };
    }
    return m;
  }();
  return reg;
}

const Command& find_command(const std::string& name) {
  const auto it = registry().find(name);
  if (it == registry().end()) throw ValidationError("unknown command '" + name + "'");
  return it->second;
}

}  // namespace

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& [k, v] : registry()) n.push_back(k);
    return n;
  }();
  return names;
}

vit::ViTModel<float> make_model(const Json& spec) {
  Json full = model_defaults();
  if (!spec.is_null()) merge_into(full, spec, "");
  auto lm = load_model(full);
  if (!lm.model) throw ValidationError("model spec names no model");
  return std::move(*lm.model);
}

Json default_config(const std::string& command) { return find_command(command).defaults(); }

Json resolve_config(const std::string& command, const Json& user) {
  Json cfg = default_config(command);
  if (user.is_null()) return cfg;
  Json patch = user;
  // Array-of-object entries are merged element-wise onto their own defaults.
  Json configs;
  if (command == "bench-seg" && patch.is_object() && patch.contains("configs")) {
    configs = patch["configs"];
    patch.erase("configs");
  }
  merge_into(cfg, patch, "");
  if (!configs.is_null()) {
    if (!configs.is_array() || configs.empty()) throw ValidationError("configs must be a non-empty array");
    Json resolved = Json::array();
    for (size_t i = 0; i < configs.size(); ++i) {
      Json c = bench_config_defaults();
      merge_into(c, configs[i], "configs[" + std::to_string(i) + "]");
      if (c["name"].get<std::string>().empty()) throw ValidationError("configs[" + std::to_string(i) + "] needs a name");
      resolved.push_back(c);
    }
    cfg["configs"] = resolved;
  }
  return cfg;
}

std::string run_name(const std::string& command, const Json& snapshot) {
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(fnv1a64(snapshot.dump())));
  return command + "-" + hex;
}

RunOutput run_command(const std::string& command, const Json& user_config, const fs::path& out_root, int threads) {
  const Command& cmd = find_command(command);
  Json snapshot = resolve_config(command, user_config);
  snapshot["command"] = command;
  set_default_threads(resolve_threads(threads));

  fs::create_directories(out_root);
  const std::string base = run_name(command, snapshot);
  RunOutput out;
  for (size_t n = 0;; ++n) {
    const fs::path candidate = out_root / (n == 0 ? base : base + "." + std::to_string(n));
    if (fs::create_directory(candidate)) {
      out.dir = candidate;
      break;
    }
  }
  write_json(out.dir / "config.json", snapshot);
  Log log(out.dir / "log.txt");
  log.line("command " + command + ", " + std::to_string(default_threads()) + " thread(s)");
  try {
    out.summary = cmd.run(snapshot, out.dir, log);
  } catch (const std::exception& e) {
    log.line(std::string("error: ") + e.what());
    throw;
  }
  write_json(out.dir / "summary.json", out.summary);
  log.line("done");
  return out;
}

}  // namespace dinolens::harness
