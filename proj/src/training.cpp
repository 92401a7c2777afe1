#include "cmil/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "cmil/error.hpp"
#include "cmil/log.hpp"

namespace cmil::training {

void TrainConfig::validate() const {
  if (learning_rate <= 0.0) throw ConfigError("learning_rate must be > 0");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (fixbase_epochs < 0 || fixbase_epochs > epochs)
    throw ConfigError("need 0 <= fixbase_epochs <= epochs");
  if (early_stop_patience < 1)
    throw ConfigError("early_stop_patience must be >= 1");
  losses.validate();
}

BatchData assemble_batch(const sampling::BatchPlan& plan,
                         const data::FeatureTable& table,
                         const std::map<std::string, int>& class_of_label) {
  BatchData batch;
  std::size_t total = 0;
  for (const auto& sb : plan.subbags) total += sb.crop_ids.size();
  batch.inputs = Matrix(total, table.features.cols());
  batch.offsets.push_back(0);
  std::size_t row = 0;
  for (const auto& sb : plan.subbags) {
    for (const auto& crop_id : sb.crop_ids)
      batch.inputs.set_row(row++, table.row_for(crop_id));
    batch.offsets.push_back(row);
    auto it = class_of_label.find(sb.label);
    if (it == class_of_label.end())
      throw ValidationError("sub-bag label '" + sb.label +
                            "' missing from the class table");
    batch.labels.push_back(it->second);
  }
  return batch;
}

namespace {

Matrix slice_rows(const Matrix& m, std::size_t begin, std::size_t end) {
  Matrix out(end - begin, m.cols());
  for (std::size_t i = begin; i < end; ++i) out.set_row(i - begin, m.row(i));
  return out;
}

}  // namespace

losses::BatchLossReport batch_loss(const BatchData& batch,
                                   const models::Extractor& extractor,
                                   const models::Accumulator& accumulator,
                                   const models::ClassifierHead& head,
                                   const models::ModelParameters& params,
                                   const losses::LossConfig& loss_cfg,
                                   models::ModelParameters* grads) {
  const std::size_t num_subbags = batch.labels.size();
  const std::size_t dim = accumulator.embed_dim();

  models::Extractor::Cache ext_cache;
  const Matrix z = extractor.forward(batch.inputs, params.theta,
                                     grads ? &ext_cache : nullptr);

  std::vector<Matrix> crop_embs(num_subbags);
  std::vector<models::Accumulator::Cache> acc_caches(num_subbags);
  Matrix reps(num_subbags, dim);
  for (std::size_t i = 0; i < num_subbags; ++i) {
    crop_embs[i] = slice_rows(z, batch.offsets[i], batch.offsets[i + 1]);
    const Vec r = accumulator.forward(crop_embs[i], params.phi,
                                      grads ? &acc_caches[i] : nullptr);
    reps.set_row(i, r);
  }

  Matrix probs = head.probabilities(reps, params.psi);
  const auto report =
      losses::total_loss(reps, crop_embs, probs, batch.labels, loss_cfg);
  if (!std::isfinite(report.total))
    throw NumericError("non-finite batch loss (diverged); total=" +
                       std::to_string(report.total));
  if (!grads) return report;

  const double batch_norm = 1.0 / static_cast<double>(num_subbags);
  Matrix d_reps(num_subbags, dim, 0.0);
  Matrix d_z(z.rows(), dim, 0.0);

  // Cross-entropy head: dlogits = beta * (P - Y) / B.
  if (loss_cfg.beta != 0.0) {
    Matrix d_logits = probs;
    for (std::size_t i = 0; i < num_subbags; ++i) {
      d_logits(i, static_cast<std::size_t>(batch.labels[i])) -= 1.0;
      for (std::size_t c = 0; c < d_logits.cols(); ++c)
        d_logits(i, c) *= loss_cfg.beta * batch_norm;
    }
    head.backward(reps, d_logits, params.psi, grads->psi, d_reps);
  }

  if (loss_cfg.alpha != 0.0)
    losses::triplet_loss_backward(reps, batch.labels, loss_cfg,
                                  loss_cfg.alpha, d_reps);

  if (loss_cfg.gamma != 0.0) {
    for (std::size_t i = 0; i < num_subbags; ++i) {
      Matrix d_crops(crop_embs[i].rows(), dim, 0.0);
      losses::alignment_loss_backward(reps.row(i), crop_embs[i], loss_cfg,
                                      loss_cfg.gamma * batch_norm,
                                      d_reps.row(i), d_crops);
      for (std::size_t r = 0; r < d_crops.rows(); ++r)
        for (std::size_t c = 0; c < dim; ++c)
          d_z(batch.offsets[i] + r, c) += d_crops(r, c);
    }
  }

  for (std::size_t i = 0; i < num_subbags; ++i) {
    Matrix d_crops(crop_embs[i].rows(), dim, 0.0);
    accumulator.backward(crop_embs[i], acc_caches[i], d_reps.row(i),
                         params.phi, grads->phi, d_crops);
    for (std::size_t r = 0; r < d_crops.rows(); ++r)
      for (std::size_t c = 0; c < dim; ++c)
        d_z(batch.offsets[i] + r, c) += d_crops(r, c);
  }

  extractor.backward(batch.inputs, ext_cache, d_z, params.theta,
                     grads->theta);
  return report;
}

double log_alignment(const BatchData& batch,
                     const models::Extractor& extractor,
                     const models::Accumulator& accumulator,
                     const models::ModelParameters& params,
                     const losses::LossConfig& loss_cfg) {
  const Matrix z = extractor.forward(batch.inputs, params.theta);
  double align = 0.0;
  const std::size_t num_subbags = batch.labels.size();
  for (std::size_t i = 0; i < num_subbags; ++i) {
    const Matrix sub = slice_rows(z, batch.offsets[i], batch.offsets[i + 1]);
    const Vec r = accumulator.forward(sub, params.phi);
    align += losses::alignment_loss(r, sub, loss_cfg);
  }
  return align / static_cast<double>(num_subbags);
}

namespace {

std::map<std::string, int> build_class_table(
    const std::vector<std::string>& labels) {
  std::map<std::string, int> out;
  for (const auto& label : labels) out.emplace(label, 0);
  int index = 0;
  for (auto& [label, cls] : out) cls = index++;
  return out;
}

void sgd_step(Vec& params, const Vec& grads, double lr) {
  for (std::size_t i = 0; i < params.size(); ++i)
    params[i] -= lr * grads[i];
}

}  // namespace

TrainResult train_with_validator(const data::DatasetManifest& manifest,
                                 const TrainConfig& cfg,
                                 const Validator& validator) {
  cfg.validate();
  const auto violations = data::validate_manifest(manifest);
  if (!violations.empty())
    throw ValidationError("manifest failed validation: " +
                          violations.front().message);

  const data::FeatureTable table = data::build_feature_table(manifest);
  std::vector<std::string> labels = manifest.labels();
  std::sort(labels.begin(), labels.end());
  const auto class_of_label = build_class_table(labels);

  models::ModelBundle bundle = models::make_initialized_bundle(
      cfg.extractor, cfg.accumulator, cfg.losses.distance, labels, cfg.seed);
  models::Extractor extractor(bundle.extractor);
  models::Accumulator accumulator(bundle.accumulator,
                                  bundle.extractor.embed_dim);
  models::ClassifierHead head(bundle.extractor.embed_dim, labels.size());

  TrainResult result;
  result.best = bundle;
  result.final_model = bundle;
  if (cfg.epochs == 0) return result;

  sampling::SamplerConfig sampler_cfg = cfg.sampler;
  sampler_cfg.seed = Rng(cfg.seed).fork(17).next_u64();
  sampling::BatchPlanner planner(manifest, sampler_cfg);

  models::ModelParameters grads;
  grads.theta.resize(bundle.params.theta.size());
  grads.phi.resize(bundle.params.phi.size());
  grads.psi.resize(bundle.params.psi.size());

  const auto t0 = std::chrono::steady_clock::now();
  const auto elapsed = [&t0]() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                         t0)
        .count();
  };

  int step = 0;
  int stale_validations = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const bool theta_frozen = epoch < cfg.fixbase_epochs;
    const auto epoch_batches = planner.next_epoch();
    for (std::size_t b = 0; b < epoch_batches.size(); ++b) {
      const BatchData batch =
          assemble_batch(epoch_batches[b], table, class_of_label);
      std::fill(grads.theta.begin(), grads.theta.end(), 0.0);
      std::fill(grads.phi.begin(), grads.phi.end(), 0.0);
      std::fill(grads.psi.begin(), grads.psi.end(), 0.0);
      const auto report = batch_loss(batch, extractor, accumulator, head,
                                     bundle.params, cfg.losses, &grads);
      if (!theta_frozen)
        sgd_step(bundle.params.theta, grads.theta, cfg.learning_rate);
      sgd_step(bundle.params.phi, grads.phi, cfg.learning_rate);
      sgd_step(bundle.params.psi, grads.psi, cfg.learning_rate);

      TrainLogRow row;
      row.epoch = epoch;
      row.step = step++;
      row.total = report.total;
      row.triplet = report.triplet;
      row.ce = report.ce;
      row.align = report.align;
      row.wall_time = elapsed();
      result.log.push_back(row);
    }

    result.epochs_run = epoch + 1;
    const double val = validator(bundle, epoch);
    if (!result.log.empty()) result.log.back().val_rank1 = val;
    if (result.best_epoch < 0 || val > result.best_val_rank1) {
      result.best_val_rank1 = val;
      result.best_epoch = epoch;
      result.best = bundle;
      stale_validations = 0;
    } else {
      ++stale_validations;
    }
    if (stale_validations >= cfg.early_stop_patience) {
      log_info("early stop at epoch " + std::to_string(epoch) +
               " (no improvement for " + std::to_string(stale_validations) +
               " validations)");
      break;
    }
  }
  result.final_model = bundle;
  return result;
}

TrainResult train(const data::DatasetManifest& manifest,
                  const evaluation::EvalSplit& val_split,
                  const TrainConfig& cfg) {
  return train_with_validator(
      manifest, cfg,
      [&val_split](const models::ModelBundle& bundle, int) {
        return evaluation::evaluate(val_split, bundle).rank1;
      });
}

models::ModelBundle train_crop_baseline(const data::DatasetManifest& manifest,
                                        const BaselineConfig& cfg) {
  const data::FeatureTable table = data::build_feature_table(manifest);
  std::vector<std::string> labels = manifest.labels();
  std::sort(labels.begin(), labels.end());
  const auto class_of_label = build_class_table(labels);

  // Class index per crop: the label of the bag the crop sits in.
  std::vector<int> crop_class(manifest.crops.size());
  for (std::size_t i = 0; i < manifest.crops.size(); ++i) {
    const auto* bag = manifest.find_bag(manifest.crops[i].bag_id);
    crop_class[i] = class_of_label.at(bag->label);
  }

  models::ModelBundle bundle = models::make_initialized_bundle(
      cfg.extractor, models::AccumulatorConfig{models::AccumulatorKind::kMean},
      cfg.distance, labels, cfg.seed);
  models::Extractor extractor(bundle.extractor);
  models::ClassifierHead head(bundle.extractor.embed_dim, labels.size());

  Vec grad_theta(bundle.params.theta.size());
  Vec grad_psi(bundle.params.psi.size());
  Rng shuffle_rng = Rng(cfg.seed).fork(29);

  std::vector<std::size_t> order(manifest.crops.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    for (std::size_t begin = 0; begin < order.size();
         begin += cfg.batch_size) {
      const std::size_t end =
          std::min(begin + cfg.batch_size, order.size());
      Matrix inputs(end - begin, table.features.cols());
      std::vector<int> batch_labels(end - begin);
      for (std::size_t i = begin; i < end; ++i) {
        inputs.set_row(i - begin, table.features.row(order[i]));
        batch_labels[i - begin] = crop_class[order[i]];
      }
      models::Extractor::Cache cache;
      const Matrix z =
          extractor.forward(inputs, bundle.params.theta, &cache);
      Matrix probs = head.probabilities(z, bundle.params.psi);
      const double inv = 1.0 / static_cast<double>(z.rows());
      Matrix d_logits = probs;
      for (std::size_t i = 0; i < z.rows(); ++i) {
        d_logits(i, static_cast<std::size_t>(batch_labels[i])) -= 1.0;
        for (std::size_t c = 0; c < d_logits.cols(); ++c)
          d_logits(i, c) *= inv;
      }
      std::fill(grad_theta.begin(), grad_theta.end(), 0.0);
      std::fill(grad_psi.begin(), grad_psi.end(), 0.0);
      Matrix d_z(z.rows(), z.cols(), 0.0);
      head.backward(z, d_logits, bundle.params.psi, grad_psi, d_z);
      extractor.backward(inputs, cache, d_z, bundle.params.theta,
                         grad_theta);
      sgd_step(bundle.params.theta, grad_theta, cfg.learning_rate);
      sgd_step(bundle.params.psi, grad_psi, cfg.learning_rate);
    }
  }
  return bundle;
}

// ---------------------------------------------------------------------------
// Hyperparameter search

nlohmann::json ParamDistribution::sample(Rng& rng) const {
  switch (kind) {
    case Kind::kIntUniform:
      return rng.uniform_int(static_cast<std::int64_t>(lo),
                             static_cast<std::int64_t>(hi));
    case Kind::kLogUniform:
      return rng.log_uniform(lo, hi);
    case Kind::kUniform:
      return rng.uniform(lo, hi);
    case Kind::kCategorical:
      return choices[rng.bounded(choices.size())];
  }
  throw ConfigError("bad distribution kind");
}

SearchSpace search_space_from_json(const nlohmann::json& j) {
  SearchSpace space;
  if (j.contains("budget")) space.budget = j["budget"].get<int>();
  if (j.contains("halving_eta"))
    space.halving_eta = j["halving_eta"].get<double>();
  if (j.contains("min_iterations"))
    space.min_iterations = j["min_iterations"].get<int>();
  if (space.budget < 1) throw ConfigError("search budget must be >= 1");
  if (space.halving_eta <= 1.0) throw ConfigError("halving_eta must be > 1");
  if (space.min_iterations < 1)
    throw ConfigError("min_iterations must be >= 1");
  if (!j.contains("parameters") || !j["parameters"].is_object())
    throw ConfigError("search space needs a 'parameters' object");
  for (const auto& [key, spec] : j["parameters"].items()) {
    ParamDistribution dist;
    if (spec.contains("int_uniform")) {
      dist.kind = ParamDistribution::Kind::kIntUniform;
      dist.lo = spec["int_uniform"][0].get<double>();
      dist.hi = spec["int_uniform"][1].get<double>();
    } else if (spec.contains("log_uniform")) {
      dist.kind = ParamDistribution::Kind::kLogUniform;
      dist.lo = spec["log_uniform"][0].get<double>();
      dist.hi = spec["log_uniform"][1].get<double>();
    } else if (spec.contains("uniform")) {
      dist.kind = ParamDistribution::Kind::kUniform;
      dist.lo = spec["uniform"][0].get<double>();
      dist.hi = spec["uniform"][1].get<double>();
    } else if (spec.contains("categorical")) {
      dist.kind = ParamDistribution::Kind::kCategorical;
      for (const auto& c : spec["categorical"]) dist.choices.push_back(c);
      if (dist.choices.empty())
        throw ConfigError("categorical '" + key + "' has no choices");
    } else {
      throw ConfigError("parameter '" + key +
                        "' needs one of int_uniform, log_uniform, uniform, "
                        "categorical");
    }
    space.parameters.emplace(key, std::move(dist));
  }
  return space;
}

SearchSpace load_search_space(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open search space '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("search space parse error: ") + e.what());
  }
  return search_space_from_json(j);
}

SearchResult search_hyperparameters(const data::DatasetManifest& manifest,
                                    const evaluation::EvalSplit& val_split,
                                    const TrainConfig& base,
                                    const SearchSpace& space,
                                    const ConfigApplier& apply) {
  if (space.budget < 1) throw ConfigError("search budget must be >= 1");

  struct Trial {
    int id;
    nlohmann::json assignment;
    TrainConfig cfg;
    double objective = 0.0;
  };

  Rng rng(base.seed);
  std::vector<Trial> trials;
  for (int t = 0; t < space.budget; ++t) {
    Trial trial;
    trial.id = t;
    trial.cfg = base;
    trial.cfg.seed = Rng(base.seed).fork(100 + t).next_u64();
    nlohmann::json assignment = nlohmann::json::object();
    for (const auto& [key, dist] : space.parameters) {
      const nlohmann::json value = dist.sample(rng);
      assignment[key] = value;
      apply(trial.cfg, key, value);
    }
    trial.assignment = std::move(assignment);
    trials.push_back(std::move(trial));
  }

  SearchResult result;
  std::size_t failures = 0;
  int rung = 0;
  int rung_epochs = space.min_iterations;
  std::vector<std::size_t> active(trials.size());
  std::iota(active.begin(), active.end(), 0);

  while (true) {
    log_info("search rung " + std::to_string(rung) + ": " +
             std::to_string(active.size()) + " trial(s) at " +
             std::to_string(rung_epochs) + " epoch(s)");
    for (std::size_t idx : active) {
      Trial& trial = trials[idx];
      TrainConfig cfg = trial.cfg;
      cfg.epochs = rung_epochs;
      cfg.fixbase_epochs = std::min(cfg.fixbase_epochs, cfg.epochs);
      TrialRow row;
      row.trial_id = trial.id;
      row.rung = rung;
      row.epochs = rung_epochs;
      row.config_json = trial.assignment.dump();
      try {
        const TrainResult tr = train(manifest, val_split, cfg);
        trial.objective = tr.best_val_rank1;
        row.objective = trial.objective;
      } catch (const Error& e) {
        log_warn("trial " + std::to_string(trial.id) + " failed: " +
                 e.what());
        trial.objective = -1.0;
        row.objective = -1.0;
        ++failures;
      }
      result.table.push_back(std::move(row));
    }
    if (active.size() < 2) break;
    // Keep the top ceil(n / eta) by objective.
    std::stable_sort(active.begin(), active.end(),
                     [&](std::size_t a, std::size_t b) {
                       return trials[a].objective > trials[b].objective;
                     });
    const std::size_t keep = static_cast<std::size_t>(std::ceil(
        static_cast<double>(active.size()) / space.halving_eta));
    active.resize(keep);
    if (active.size() < 2) break;
    ++rung;
    rung_epochs = static_cast<int>(
        std::lround(rung_epochs * space.halving_eta));
  }

  if (failures == result.table.size())
    throw Error("all search trials failed; see warnings for diagnostics");

  const Trial* best = nullptr;
  for (const Trial& t : trials)
    if (t.objective >= 0.0 && (!best || t.objective > best->objective))
      best = &t;
  result.best = best->cfg;
  result.best_assignment = best->assignment;
  result.best_objective = best->objective;
  return result;
}

}  // namespace cmil::training
