#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmil/evaluation.hpp"
#include "cmil/losses.hpp"
#include "cmil/manifest.hpp"
#include "cmil/models.hpp"
#include "cmil/sampler.hpp"

namespace cmil::training {

struct TrainConfig {
  double learning_rate = 0.1;
  int epochs = 50;
  int fixbase_epochs = 0;  // extractor frozen for the first N epochs
  int early_stop_patience = 5;
  std::uint64_t seed = 0;
  sampling::SamplerConfig sampler;
  losses::LossConfig losses;
  models::ExtractorConfig extractor;
  models::AccumulatorConfig accumulator;

  void validate() const;
};

struct TrainLogRow {
  int epoch = 0;
  int step = 0;
  double total = 0.0;
  double triplet = 0.0;
  double ce = 0.0;
  double align = 0.0;  // present on every row, gamma or not
  std::optional<double> val_rank1;
  double wall_time = 0.0;  // seconds since training start
};

struct TrainResult {
  models::ModelBundle best;         // best validation rank-1 snapshot
  models::ModelBundle final_model;  // parameters after the last step
  std::vector<TrainLogRow> log;
  double best_val_rank1 = 0.0;
  int best_epoch = -1;
  int epochs_run = 0;
};

/// One batch laid out for the model: all sub-bag crops stacked, with
/// row ranges per sub-bag and one class index per sub-bag.
struct BatchData {
  Matrix inputs;                     // total_crops x input_size
  std::vector<std::size_t> offsets;  // size B+1
  std::vector<int> labels;           // size B
};

BatchData assemble_batch(const sampling::BatchPlan& plan,
                         const data::FeatureTable& table,
                         const std::map<std::string, int>& class_of_label);

/// Full forward pass (and backward when grads != nullptr) of the combined
/// objective on one batch. Gradients are accumulated into grads, which
/// must be sized like params.
losses::BatchLossReport batch_loss(const BatchData& batch,
                                   const models::Extractor& extractor,
                                   const models::Accumulator& accumulator,
                                   const models::ClassifierHead& head,
                                   const models::ModelParameters& params,
                                   const losses::LossConfig& loss_cfg,
                                   models::ModelParameters* grads);

/// Batch-mean alignment loss under the training metric, independent of
/// gamma; what the log's align column carries.
double log_alignment(const BatchData& batch,
                     const models::Extractor& extractor,
                     const models::Accumulator& accumulator,
                     const models::ModelParameters& params,
                     const losses::LossConfig& loss_cfg);

/// Called once per epoch with a parameter snapshot; returns val rank-1.
using Validator =
    std::function<double(const models::ModelBundle& bundle, int epoch)>;

TrainResult train(const data::DatasetManifest& manifest,
                  const evaluation::EvalSplit& val_split,
                  const TrainConfig& cfg);

/// Same loop with an injected validator (tests drive early stopping with
/// scripted scores).
TrainResult train_with_validator(const data::DatasetManifest& manifest,
                                 const TrainConfig& cfg,
                                 const Validator& validator);

/// Per-crop cross-entropy baseline: every crop takes its bag's label and a
/// plain classifier is fit on shuffled crop minibatches. No bags, no
/// contrastive terms; the comparison point for noisy-label robustness.
struct BaselineConfig {
  double learning_rate = 0.1;
  int epochs = 20;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  models::ExtractorConfig extractor;
  DistanceKind distance = DistanceKind::kCosine;
};

models::ModelBundle train_crop_baseline(const data::DatasetManifest& manifest,
                                        const BaselineConfig& cfg);

// ---------------------------------------------------------------------------
// Hyperparameter search: random sampling raced with successive halving.

struct ParamDistribution {
  enum class Kind { kIntUniform, kLogUniform, kUniform, kCategorical };
  Kind kind = Kind::kUniform;
  double lo = 0.0;
  double hi = 0.0;
  std::vector<nlohmann::json> choices;

  nlohmann::json sample(Rng& rng) const;
};

struct SearchSpace {
  std::map<std::string, ParamDistribution> parameters;
  int budget = 1;
  double halving_eta = 2.0;
  int min_iterations = 3;
};

SearchSpace load_search_space(const std::string& path);
SearchSpace search_space_from_json(const nlohmann::json& j);

struct TrialRow {
  int trial_id = 0;
  int rung = 0;
  int epochs = 0;
  double objective = 0.0;
  std::string config_json;  // the sampled assignment
};

/// Maps a search-space key and sampled value onto a TrainConfig field.
using ConfigApplier = std::function<void(
    TrainConfig&, const std::string& key, const nlohmann::json& value)>;

struct SearchResult {
  TrainConfig best;
  nlohmann::json best_assignment;
  double best_objective = 0.0;
  std::vector<TrialRow> table;
};

SearchResult search_hyperparameters(const data::DatasetManifest& manifest,
                                    const evaluation::EvalSplit& val_split,
                                    const TrainConfig& base,
                                    const SearchSpace& space,
                                    const ConfigApplier& apply);

}  // namespace cmil::training
