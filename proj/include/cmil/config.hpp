#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmil/training.hpp"

namespace cmil::config {

/// Everything a run needs: the training setup plus file locations and
/// evaluation options. Parsed from one flat JSON object with dotted keys
/// for nesting; unknown keys are rejected before any work starts.
struct RunConfig {
  training::TrainConfig train;
  std::string train_manifest;
  std::string val_manifest;
  std::optional<std::string> test_manifest;
  std::string out_dir = ".";
  bool eval_camera_filter = false;
  std::uint64_t eval_seed = 7;
};

/// Applies one config key to a TrainConfig. Shared by the config file
/// parser and the hyperparameter search (search-space keys are config
/// keys). Throws ConfigError on unknown keys or bad values.
void apply_train_key(training::TrainConfig& cfg, const std::string& key,
                     const nlohmann::json& value);

/// True if `key` names a TrainConfig field.
bool is_train_key(const std::string& key);

RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

/// Canonical flat-JSON form of a TrainConfig (the inverse of repeated
/// apply_train_key calls plus defaults).
nlohmann::ordered_json train_config_to_json(const training::TrainConfig& cfg);

}  // namespace cmil::config
