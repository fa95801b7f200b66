#pragma once

// key=value run configuration. Blank lines and '#' comments are ignored.

#include <map>
#include <string>
#include <vector>

#include "fullglow/model.hpp"
#include "fullglow/training.hpp"

namespace fullglow {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

/// Every recognised key, in canonical order.
const std::vector<std::string>& run_config_keys();

/// Parses "key = value" lines. Unknown keys and unparsable values are
/// collected and reported together in one ConfigError.
std::map<std::string, std::string> parse_key_values(const std::string& text);

/// Applies `values` on top of `base`, then validates the result.
RunConfig apply_run_config(const RunConfig& base, const std::map<std::string, std::string>& values);
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

/// Canonical text for the model part (used inside checkpoints). Round-trips exactly.
std::string model_config_text(const ModelConfig& config);
ModelConfig parse_model_config(const std::string& text);

}  // namespace fullglow
