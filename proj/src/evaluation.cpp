#include "cmil/evaluation.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cmil/error.hpp"
#include "cmil/kernels.hpp"
#include "cmil/rng.hpp"

namespace cmil::evaluation {

void EvalSplit::validate() const {
  std::set<std::string> gallery_ids;
  for (const auto& item : gallery) gallery_ids.insert(item.identity);
  for (const auto& q : queries) {
    if (!gallery_ids.count(q.identity))
      throw ValidationError("query identity '" + q.identity +
                            "' never appears in the gallery");
  }
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["rank1"] = rank1;
  j["rank5"] = rank5;
  j["rank10"] = rank10;
  j["map"] = map;
  j["num_queries"] = num_queries;
  return j.dump(2) + "\n";
}

std::vector<RankedQuery> rank_queries(const EvalSplit& split,
                                      const models::ModelBundle& bundle,
                                      DistanceKind distance,
                                      bool camera_filter) {
  if (split.gallery.empty()) throw ValidationError("gallery is empty");
  split.validate();

  models::Extractor extractor(bundle.extractor);
  const std::size_t in = extractor.config().input_size();
  const std::size_t num_candidates =
      split.gallery.size() + split.distractors.size();

  Matrix query_inputs(split.queries.size(), in);
  for (std::size_t i = 0; i < split.queries.size(); ++i) {
    if (split.queries[i].features.size() != in)
      throw ValidationError("query crop width does not match the model");
    query_inputs.set_row(i, split.queries[i].features);
  }
  Matrix candidate_inputs(num_candidates, in);
  for (std::size_t i = 0; i < split.gallery.size(); ++i) {
    if (split.gallery[i].features.size() != in)
      throw ValidationError("gallery crop width does not match the model");
    candidate_inputs.set_row(i, split.gallery[i].features);
  }
  for (std::size_t i = 0; i < split.distractors.size(); ++i) {
    if (split.distractors[i].size() != in)
      throw ValidationError("distractor crop width does not match the model");
    candidate_inputs.set_row(split.gallery.size() + i, split.distractors[i]);
  }

  const Matrix query_emb =
      extractor.forward(query_inputs, bundle.params.theta);
  const Matrix cand_emb =
      extractor.forward(candidate_inputs, bundle.params.theta);
  const Matrix dist = distance == DistanceKind::kEuclidean
                          ? kernels::pairwise_euclidean(query_emb, cand_emb)
                          : kernels::pairwise_cosine(query_emb, cand_emb);

  std::vector<RankedQuery> out(split.queries.size());
  const std::int64_t nq = static_cast<std::int64_t>(split.queries.size());
#pragma omp parallel for schedule(static)
  for (std::int64_t qi = 0; qi < nq; ++qi) {
    const auto& q = split.queries[static_cast<std::size_t>(qi)];
    std::vector<std::size_t> candidates;
    candidates.reserve(num_candidates);
    for (std::size_t c = 0; c < num_candidates; ++c) {
      if (camera_filter && c < split.gallery.size()) {
        const auto& g = split.gallery[c];
        if (g.identity == q.identity && g.camera_id && q.camera_id &&
            *g.camera_id == *q.camera_id)
          continue;  // same identity seen by the same camera: excluded
      }
      candidates.push_back(c);
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [&](std::size_t a, std::size_t b) {
                       return dist(static_cast<std::size_t>(qi), a) <
                              dist(static_cast<std::size_t>(qi), b);
                     });
    RankedQuery rq;
    rq.order = std::move(candidates);
    rq.relevant.reserve(rq.order.size());
    for (std::size_t c : rq.order) {
      const bool rel =
          c < split.gallery.size() && split.gallery[c].identity == q.identity;
      rq.relevant.push_back(rel ? 1 : 0);
      rq.num_relevant += rel ? 1 : 0;
    }
    out[static_cast<std::size_t>(qi)] = std::move(rq);
  }

  for (const auto& rq : out) {
    if (rq.num_relevant == 0)
      throw ValidationError(
          "a query has zero relevant gallery items after filtering");
  }
  return out;
}

double rank_k_accuracy(const std::vector<RankedQuery>& ranked,
                       std::size_t k) {
  if (k < 1) throw ValidationError("k must be >= 1");
  if (ranked.empty()) throw ValidationError("no queries");
  std::size_t hits = 0;
  for (const auto& rq : ranked) {
    const std::size_t top = std::min(k, rq.relevant.size());
    for (std::size_t i = 0; i < top; ++i) {
      if (rq.relevant[i]) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(ranked.size());
}

double mean_average_precision(const std::vector<RankedQuery>& ranked) {
  if (ranked.empty()) throw ValidationError("no queries");
  double sum_ap = 0.0;
  for (const auto& rq : ranked) {
    if (rq.num_relevant == 0)
      throw ValidationError("query with zero relevant items");
    std::size_t hits = 0;
    double ap = 0.0;
    for (std::size_t i = 0; i < rq.relevant.size(); ++i) {
      if (rq.relevant[i]) {
        ++hits;
        ap += static_cast<double>(hits) / static_cast<double>(i + 1);
      }
    }
    sum_ap += ap / static_cast<double>(rq.num_relevant);
  }
  return sum_ap / static_cast<double>(ranked.size());
}

EvalReport evaluate(const EvalSplit& split, const models::ModelBundle& bundle,
                    bool camera_filter) {
  const auto ranked =
      rank_queries(split, bundle, bundle.distance, camera_filter);
  EvalReport report;
  report.rank1 = rank_k_accuracy(ranked, 1);
  report.rank5 = rank_k_accuracy(ranked, 5);
  report.rank10 = rank_k_accuracy(ranked, 10);
  report.map = mean_average_precision(ranked);
  report.num_queries = ranked.size();
  return report;
}

EvalSplit eval_split_from_manifest(const data::DatasetManifest& manifest,
                                   std::uint64_t seed) {
  const data::FeatureTable table = data::build_feature_table(manifest);

  std::map<std::string, std::vector<std::size_t>> by_identity;
  std::vector<std::size_t> unlabeled;
  for (std::size_t i = 0; i < manifest.crops.size(); ++i) {
    const auto& crop = manifest.crops[i];
    if (crop.true_identity) {
      by_identity[*crop.true_identity].push_back(i);
    } else {
      unlabeled.push_back(i);
    }
  }

  Rng rng(seed);
  EvalSplit split;
  for (auto& [identity, rows] : by_identity) {
    std::size_t query_row = rows.size();
    if (rows.size() >= 2) query_row = rows[rng.bounded(rows.size())];
    for (std::size_t row : rows) {
      const auto& crop = manifest.crops[row];
      EvalItem item;
      const auto feats = table.features.row(row);
      item.features.assign(feats.begin(), feats.end());
      item.identity = identity;
      item.camera_id = crop.camera_id;
      if (row == query_row) {
        split.queries.push_back(std::move(item));
      } else {
        split.gallery.push_back(std::move(item));
      }
    }
  }
  for (std::size_t row : unlabeled) {
    const auto feats = table.features.row(row);
    split.distractors.emplace_back(feats.begin(), feats.end());
  }
  split.validate();
  return split;
}

}  // namespace cmil::evaluation
