// SPDX-License-Identifier: Apache-2.0
// Command-line front end over the C API.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dinolens/dinolens.h"
#include "json.hpp"

using Json = nlohmann::ordered_json;

namespace {

struct Options {
  std::string config;
  long long seed = -1;
  std::string out = "runs";
  int threads = 0;
  std::vector<std::string> sets;
  std::string feat, model, images, train, test, teacher_feat;
  bool print_config = false;
};

// Owns a string returned by the library.
struct LibString {
  char* p = nullptr;
  ~LibString() { dinolens_string_free(p); }
};

int report(dinolens_status s) {
  std::cerr << "dinolens: " << dinolens_status_name(s) << ": " << dinolens_last_error() << "\n";
  return 10 + static_cast<int>(s);
}

Json read_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path);
  return Json::parse(in);
}

// --set a.b.c=value; the value is parsed as JSON and kept as a string when
// that fails.
void apply_set(Json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw std::runtime_error("--set expects key=value, got '" + assignment + "'");
  Json value;
  try {
    value = Json::parse(assignment.substr(eq + 1));
  } catch (const Json::parse_error&) {
    value = assignment.substr(eq + 1);
  }
  Json* node = &cfg;
  std::stringstream keys(assignment.substr(0, eq));
  std::string key;
  std::vector<std::string> parts;
  while (std::getline(keys, key, '.')) parts.push_back(key);
  for (size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i]) || !(*node)[parts[i]].is_object()) (*node)[parts[i]] = Json::object();
    node = &(*node)[parts[i]];
  }
  (*node)[parts.back()] = value;
}

int run(const std::string& command, const Options& o) {
  LibString defaults_text;
  if (auto s = dinolens_default_config(command.c_str(), &defaults_text.p)) return report(s);
  const Json defaults = Json::parse(defaults_text.p);
  if (o.print_config) {
    std::cout << defaults.dump(2) << "\n";
    return 0;
  }
  Json cfg = o.config.empty() ? Json::object() : read_config(o.config);
  if (o.seed >= 0) cfg["seed"] = o.seed;
  // Shortcuts for the common inputs of each command.
  auto need = [&](const std::string& key, const std::string& flag) {
    if (!defaults.contains(key)) throw std::runtime_error(flag + " does not apply to '" + command + "'");
  };
  if (!o.feat.empty()) {
    need("feat", "--feat");
    cfg["feat"] = o.feat;
  }
  if (!o.model.empty()) {
    const std::string key = defaults.contains("model") ? "model" : "teacher";
    need(key, "--model");
    cfg[key] = {{"source", "checkpoint"}, {"path", o.model}};
  }
  if (!o.images.empty()) {
    const std::string key = defaults.contains("images") ? "images" : defaults.contains("image") ? "image" : "dataset";
    need(key, "--images");
    cfg[key]["dir"] = o.images;
  }
  if (!o.train.empty()) {
    need("train", "--train");
    cfg["train"]["dir"] = o.train;
  }
  if (!o.test.empty()) {
    need("test", "--test");
    cfg["test"]["dir"] = o.test;
  }
  if (!o.teacher_feat.empty()) {
    need("teacher_feat_dir", "--teacher-feat");
    cfg["teacher_feat_dir"] = o.teacher_feat;
  }
  for (const auto& s : o.sets) apply_set(cfg, s);

  LibString dir, summary;
  const std::string text = cfg.dump();
  if (auto s = dinolens_run(command.c_str(), text.c_str(), o.out.c_str(), o.threads, &dir.p, &summary.p)) {
    return report(s);
  }
  std::cout << "run directory: " << dir.p << "\n" << Json::parse(summary.p).dump(2) << "\n";
  return 0;
}

const std::map<std::string, std::string> kDescriptions = {
    {"export-alibi", "write the normalized ALiBi distance matrix of a token grid"},
    {"probe", "positional linear probe of a FEAT1 file or model features"},
    {"fingerprint", "layer x channel R^2 fingerprint"},
    {"teacher", "build the synthetic positionally biased teacher"},
    {"distill", "distill a teacher into an ALiBi or NoPE student"},
    {"pca", "PCA colour maps of patch features"},
    {"kmeans", "k-means decomposition of patch features"},
    {"similarity", "cosine similarity map to a query token"},
    {"diag-zero", "positional structure left on zero and jittered inputs"},
    {"sweep", "features across input resolutions with a shared PCA"},
    {"equivariance", "feature discrepancy under flips, rolls and rotations"},
    {"segment", "trainable segmentation from scribbles"},
    {"bench-seg", "scribble-round mIoU curves per feature configuration"},
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Positional-bias analysis and removal for vision transformers"};
  app.require_subcommand(1);
  Options o;

  std::vector<std::string> commands;
  std::stringstream names(dinolens_commands());
  for (std::string line; std::getline(names, line);) {
    if (!line.empty()) commands.push_back(line);
  }
  std::map<std::string, CLI::App*> subs;
  for (const auto& name : commands) {
    const auto d = kDescriptions.find(name);
    auto* sub = app.add_subcommand(name, d == kDescriptions.end() ? "" : d->second);
    sub->add_option("--config", o.config, "JSON config merged onto the command defaults")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "master seed");
    sub->add_option("--out", o.out, "root directory for run directories")->capture_default_str();
    sub->add_option("--threads", o.threads, "worker threads (default: DINOLENS_THREADS, else 1)");
    sub->add_option("--set", o.sets, "override a config key, e.g. --set low.epochs=3");
    sub->add_flag("--print-config", o.print_config, "print the default config and exit");
    sub->add_option("--feat", o.feat, "FEAT1 file or directory of .feat files");
    sub->add_option("--model", o.model, "VITW1 checkpoint");
    sub->add_option("--images", o.images, "image directory");
    sub->add_option("--train", o.train, "labeled training directory (images/, masks/)");
    sub->add_option("--test", o.test, "labeled test directory (images/, masks/)");
    sub->add_option("--teacher-feat", o.teacher_feat, "directory of teacher FEAT1 files");
    subs[name] = sub;
  }
  CLI11_PARSE(app, argc, argv);
  try {
    for (const auto& [name, sub] : subs) {
      if (sub->parsed()) return run(name, o);
    }
  } catch (const std::exception& e) {
    std::cerr << "dinolens: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
