#include "cmil/config.hpp"

#include <fstream>
#include <set>

#include "cmil/error.hpp"

namespace cmil::config {

namespace {

const std::set<std::string>& train_keys() {
  static const std::set<std::string> keys = {
      "seed",
      "epochs",
      "fixbase",
      "patience",
      "lr",
      "bag_size",
      "batch_size",
      "distance",
      "margin",
      "align_margin",
      "alpha",
      "beta",
      "gamma",
      "feature_norm",
      "extractor.kind",
      "extractor.input_shape",
      "extractor.embed_dim",
      "extractor.hidden_sizes",
      "accumulator.kind",
      "accumulator.st_layers",
      "accumulator.st_heads",
      "accumulator.st_hidden",
      "accumulator.seed",
  };
  return keys;
}

const std::set<std::string>& run_only_keys() {
  static const std::set<std::string> keys = {
      "train_manifest", "val_manifest", "test_manifest",
      "out_dir",        "eval.camera_filter", "eval.seed",
  };
  return keys;
}

template <typename T>
T expect(const nlohmann::json& value, const std::string& key) {
  try {
    return value.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type");
  }
}

}  // namespace

bool is_train_key(const std::string& key) {
  return train_keys().count(key) > 0;
}

void apply_train_key(training::TrainConfig& cfg, const std::string& key,
                     const nlohmann::json& value) {
  if (key == "seed") {
    cfg.seed = expect<std::uint64_t>(value, key);
  } else if (key == "epochs") {
    cfg.epochs = expect<int>(value, key);
  } else if (key == "fixbase") {
    cfg.fixbase_epochs = expect<int>(value, key);
  } else if (key == "patience") {
    cfg.early_stop_patience = expect<int>(value, key);
  } else if (key == "lr") {
    cfg.learning_rate = expect<double>(value, key);
  } else if (key == "bag_size") {
    cfg.sampler.subbag_size = expect<std::size_t>(value, key);
  } else if (key == "batch_size") {
    cfg.sampler.batch_size = expect<std::size_t>(value, key);
  } else if (key == "distance") {
    cfg.losses.distance =
        distance_from_string(expect<std::string>(value, key));
  } else if (key == "margin") {
    cfg.losses.m_triplet = expect<double>(value, key);
    // One margin in the sweep table; align shares it unless overridden.
    cfg.losses.m_align = cfg.losses.m_triplet;
  } else if (key == "align_margin") {
    cfg.losses.m_align = expect<double>(value, key);
  } else if (key == "alpha") {
    cfg.losses.alpha = expect<double>(value, key);
  } else if (key == "beta") {
    cfg.losses.beta = expect<double>(value, key);
  } else if (key == "gamma") {
    cfg.losses.gamma = expect<double>(value, key);
  } else if (key == "feature_norm") {
    cfg.extractor.feature_norm = expect<bool>(value, key);
  } else if (key == "extractor.kind") {
    cfg.extractor.kind =
        models::extractor_kind_from_string(expect<std::string>(value, key));
  } else if (key == "extractor.input_shape") {
    cfg.extractor.input_shape =
        expect<std::vector<std::size_t>>(value, key);
  } else if (key == "extractor.embed_dim") {
    cfg.extractor.embed_dim = expect<std::size_t>(value, key);
  } else if (key == "extractor.hidden_sizes") {
    cfg.extractor.hidden_sizes =
        expect<std::vector<std::size_t>>(value, key);
  } else if (key == "accumulator.kind") {
    cfg.accumulator.kind =
        models::accumulator_kind_from_string(expect<std::string>(value, key));
  } else if (key == "accumulator.st_layers") {
    cfg.accumulator.st_layers = expect<std::size_t>(value, key);
  } else if (key == "accumulator.st_heads") {
    cfg.accumulator.st_heads = expect<std::size_t>(value, key);
  } else if (key == "accumulator.st_hidden") {
    cfg.accumulator.st_hidden = expect<std::size_t>(value, key);
  } else if (key == "accumulator.seed") {
    cfg.accumulator.seed = expect<std::uint64_t>(value, key);
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig run;
  // Reject unknown keys before applying anything.
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (!is_train_key(key) && !run_only_keys().count(key))
      throw ConfigError("unknown config key '" + key + "'");
  }
  for (const auto& [key, value] : j.items()) {
    if (is_train_key(key)) {
      apply_train_key(run.train, key, value);
    } else if (key == "train_manifest") {
      run.train_manifest = expect<std::string>(value, key);
    } else if (key == "val_manifest") {
      run.val_manifest = expect<std::string>(value, key);
    } else if (key == "test_manifest") {
      run.test_manifest = expect<std::string>(value, key);
    } else if (key == "out_dir") {
      run.out_dir = expect<std::string>(value, key);
    } else if (key == "eval.camera_filter") {
      run.eval_camera_filter = expect<bool>(value, key);
    } else if (key == "eval.seed") {
      run.eval_seed = expect<std::uint64_t>(value, key);
    }
  }
  return run;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("config parse error: ") + e.what());
  }
  return run_config_from_json(j);
}

nlohmann::ordered_json train_config_to_json(
    const training::TrainConfig& cfg) {
  nlohmann::ordered_json j;
  j["seed"] = cfg.seed;
  j["epochs"] = cfg.epochs;
  j["fixbase"] = cfg.fixbase_epochs;
  j["patience"] = cfg.early_stop_patience;
  j["lr"] = cfg.learning_rate;
  j["bag_size"] = cfg.sampler.subbag_size;
  j["batch_size"] = cfg.sampler.batch_size;
  j["distance"] = to_string(cfg.losses.distance);
  j["margin"] = cfg.losses.m_triplet;
  j["align_margin"] = cfg.losses.m_align;
  j["alpha"] = cfg.losses.alpha;
  j["beta"] = cfg.losses.beta;
  j["gamma"] = cfg.losses.gamma;
  j["feature_norm"] = cfg.extractor.feature_norm;
  j["extractor.kind"] = models::to_string(cfg.extractor.kind);
  j["extractor.input_shape"] = cfg.extractor.input_shape;
  j["extractor.embed_dim"] = cfg.extractor.embed_dim;
  j["extractor.hidden_sizes"] = cfg.extractor.hidden_sizes;
  j["accumulator.kind"] = models::to_string(cfg.accumulator.kind);
  j["accumulator.st_layers"] = cfg.accumulator.st_layers;
  j["accumulator.st_heads"] = cfg.accumulator.st_heads;
  j["accumulator.st_hidden"] = cfg.accumulator.st_hidden;
  j["accumulator.seed"] = cfg.accumulator.seed;
  return j;
}

}  // namespace cmil::config
