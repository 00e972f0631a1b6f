// SPDX-License-Identifier: Apache-2.0
#pragma once

// Experiment commands. Each command takes a JSON config that is merged onto
// its defaults, writes the resolved snapshot and its artifacts into a run
// directory named after the snapshot hash, and returns a summary.

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "vit/vit.hpp"

namespace dinolens::harness {

using Json = nlohmann::ordered_json;

const std::vector<std::string>& command_names();

/// Defaults of a command; every accepted key appears here.
Json default_config(const std::string& command);

/// Defaults merged with `user`. Unknown keys are a ValidationError naming the
/// dotted key path.
Json resolve_config(const std::string& command, const Json& user);

/// "<command>-<16 hex digits of fnv1a64(snapshot)>".
std::string run_name(const std::string& command, const Json& snapshot);

/// Builds a model from a spec (source random, teacher or checkpoint, plus
/// architecture keys) merged onto the model defaults.
vit::ViTModel<float> make_model(const Json& spec);

struct RunOutput {
  std::filesystem::path dir;
  Json summary;
};

/// Resolves the config, creates the run directory exclusively (a numbered
/// suffix is appended when the name is taken) and runs the command. `threads`
/// is not part of the snapshot since results do not depend on it.
RunOutput run_command(const std::string& command, const Json& user_config, const std::filesystem::path& out_root,
                      int threads = 0);

}  // namespace dinolens::harness
