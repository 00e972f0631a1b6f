// SPDX-License-Identifier: Apache-2.0
#include "dinolens/dinolens.h"

#include <cstring>
#include <new>
#include <string>

#include "common/error.hpp"
#include "harness/harness.hpp"
#include "io/feat1.hpp"
#include "posenc/pos_encoding.hpp"
#include "probe/probe.hpp"
#include "vit/vit.hpp"

struct dinolens_model {
  dinolens::vit::ViTModel<float> model;
};

struct dinolens_features {
  dinolens::vit::FeatureStack stack;
};

namespace {

using namespace dinolens;

thread_local std::string g_last_error;

dinolens_status status_of(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Dimension: return DINOLENS_ERR_DIMENSION;
    case ErrorKind::Format: return DINOLENS_ERR_FORMAT;
    case ErrorKind::Validation: return DINOLENS_ERR_VALIDATION;
    case ErrorKind::Numeric: return DINOLENS_ERR_NUMERIC;
    case ErrorKind::Contract: return DINOLENS_ERR_CONTRACT;
    case ErrorKind::Degenerate: return DINOLENS_ERR_DEGENERATE;
    case ErrorKind::Io: return DINOLENS_ERR_IO;
  }
  return DINOLENS_ERR_INTERNAL;
}

dinolens_status fail(dinolens_status s, const std::string& what) {
  g_last_error = what;
  return s;
}

// Runs `fn`, translating exceptions into status codes.
template <class F>
dinolens_status guarded(F&& fn) {
  try {
    g_last_error.clear();
    fn();
    return DINOLENS_OK;
  } catch (const Error& e) {
    return fail(status_of(e.kind()), e.what());
  } catch (const nlohmann::json::exception& e) {
    return fail(DINOLENS_ERR_VALIDATION, std::string("config: ") + e.what());
  } catch (const std::bad_alloc&) {
    return fail(DINOLENS_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(DINOLENS_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(DINOLENS_ERR_INTERNAL, "unknown error");
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

harness::Json parse(const char* text) {
  if (!text || !*text) return nullptr;
  return harness::Json::parse(text);
}

}  // namespace

extern "C" {

const char* dinolens_version(void) { return "0.1.0"; }

const char* dinolens_status_name(dinolens_status status) {
  switch (status) {
    case DINOLENS_OK: return "ok";
    case DINOLENS_ERR_DIMENSION: return "dimension error";
    case DINOLENS_ERR_FORMAT: return "format error";
    case DINOLENS_ERR_VALIDATION: return "validation error";
    case DINOLENS_ERR_NUMERIC: return "numeric error";
    case DINOLENS_ERR_CONTRACT: return "contract error";
    case DINOLENS_ERR_DEGENERATE: return "degenerate error";
    case DINOLENS_ERR_IO: return "io error";
    case DINOLENS_ERR_ARGUMENT: return "invalid argument";
    case DINOLENS_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

const char* dinolens_last_error(void) { return g_last_error.c_str(); }

void dinolens_string_free(char* text) { std::free(text); }

dinolens_status dinolens_model_create(const char* spec_json, dinolens_model** out) {
  if (!out) return fail(DINOLENS_ERR_ARGUMENT, "null output handle");
  *out = nullptr;
  return guarded([&] { *out = new dinolens_model{harness::make_model(parse(spec_json))}; });
}

dinolens_status dinolens_model_load(const char* path, dinolens_model** out) {
  if (!path || !out) return fail(DINOLENS_ERR_ARGUMENT, "null path or output handle");
  *out = nullptr;
  return guarded([&] { *out = new dinolens_model{vit::load_checkpoint(path)}; });
}

dinolens_status dinolens_model_save(const dinolens_model* model, const char* path) {
  if (!model || !path) return fail(DINOLENS_ERR_ARGUMENT, "null model or path");
  return guarded([&] { vit::save_checkpoint(model->model, path); });
}

dinolens_status dinolens_model_info(const dinolens_model* model, char** out_json) {
  if (!model || !out_json) return fail(DINOLENS_ERR_ARGUMENT, "null model or output");
  return guarded([&] {
    const auto& c = model->model.config();
    harness::Json j = {{"patch", c.patch},       {"dim", c.dim},
                       {"heads", c.heads},       {"layers", c.layers},
                       {"channels", c.channels}, {"registers", c.registers},
                       {"pe_kind", pe::to_string(c.pe_kind)}, {"alibi_wrap", c.alibi_wrap},
                       {"parameters", model->model.parameter_count()}};
    *out_json = dup_string(j.dump());
  });
}

void dinolens_model_free(dinolens_model* model) { delete model; }

dinolens_status dinolens_model_forward(const dinolens_model* model, const float* pixels, size_t channels,
                                       size_t height, size_t width, int all_layers, dinolens_features** out) {
  if (!model || !pixels || !out) return fail(DINOLENS_ERR_ARGUMENT, "null model, pixels or output handle");
  *out = nullptr;
  return guarded([&] {
    io::Image image(channels, height, width);
    std::memcpy(image.data.data(), pixels, image.data.size() * sizeof(float));
    vit::ForwardOptions fo;
    fo.all_layers = all_layers != 0;
    *out = new dinolens_features{vit::forward_features(model->model, image, fo)};
  });
}

dinolens_status dinolens_features_read(const char* path, dinolens_features** out) {
  if (!path || !out) return fail(DINOLENS_ERR_ARGUMENT, "null path or output handle");
  *out = nullptr;
  return guarded([&] { *out = new dinolens_features{io::feat1_read(path)}; });
}

dinolens_status dinolens_features_write(const dinolens_features* features, const char* path) {
  if (!features || !path) return fail(DINOLENS_ERR_ARGUMENT, "null features or path");
  return guarded([&] { io::feat1_write(features->stack, path); });
}

dinolens_status dinolens_features_shape(const dinolens_features* features, size_t* layers, size_t* rows,
                                        size_t* cols, size_t* channels) {
  if (!features) return fail(DINOLENS_ERR_ARGUMENT, "null features");
  if (layers) *layers = features->stack.layer_count();
  if (rows) *rows = features->stack.grid.rows;
  if (cols) *cols = features->stack.grid.cols;
  if (channels) *channels = features->stack.channels;
  g_last_error.clear();
  return DINOLENS_OK;
}

dinolens_status dinolens_features_layer(const dinolens_features* features, size_t layer, const float** data) {
  if (!features || !data) return fail(DINOLENS_ERR_ARGUMENT, "null features or output");
  if (layer >= features->stack.layer_count()) {
    return fail(DINOLENS_ERR_DIMENSION, "layer " + std::to_string(layer) + " out of range");
  }
  *data = features->stack.layers[layer].data();
  g_last_error.clear();
  return DINOLENS_OK;
}

void dinolens_features_free(dinolens_features* features) { delete features; }

dinolens_status dinolens_build_alibi(size_t rows, size_t cols, int wrap, double* out, size_t out_len) {
  if (!out) return fail(DINOLENS_ERR_ARGUMENT, "null output buffer");
  return guarded([&] {
    const auto d = pe::build_alibi(rows, cols, wrap != 0);
    if (out_len != d.size()) {
      throw DimensionError("output buffer holds " + std::to_string(out_len) + " values, need " +
                           std::to_string(d.size()));
    }
    std::memcpy(out, d.data(), d.size() * sizeof(double));
  });
}

dinolens_status dinolens_joint_xy_score(const dinolens_features* features, double sample_frac, size_t repeats,
                                        uint64_t seed, double* out) {
  if (!features || !out) return fail(DINOLENS_ERR_ARGUMENT, "null features or output");
  return guarded([&] {
    probe::ProbeConfig pc;
    pc.sample_frac = sample_frac;
    pc.repeats = repeats;
    pc.seed = seed;
    pc.validate();
    *out = probe::joint_xy_score(features->stack, pc);
  });
}

dinolens_status dinolens_run(const char* command, const char* config_json, const char* out_root, int threads,
                             char** run_dir, char** summary_json) {
  if (!command || !out_root) return fail(DINOLENS_ERR_ARGUMENT, "null command or output root");
  if (run_dir) *run_dir = nullptr;
  if (summary_json) *summary_json = nullptr;
  return guarded([&] {
    const auto r = harness::run_command(command, parse(config_json), out_root, threads);
    if (run_dir) *run_dir = dup_string(r.dir.string());
    if (summary_json) *summary_json = dup_string(r.summary.dump());
  });
}

dinolens_status dinolens_default_config(const char* command, char** out_json) {
  if (!command || !out_json) return fail(DINOLENS_ERR_ARGUMENT, "null command or output");
  *out_json = nullptr;
  return guarded([&] { *out_json = dup_string(harness::default_config(command).dump(2)); });
}

const char* dinolens_commands(void) {
  static const std::string names = [] {
    std::string s;
    for (const auto& n : harness::command_names()) s += n + "\n";
    return s;
  }();
  return names.c_str();
}

}  // extern "C"
