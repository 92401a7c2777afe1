#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cmil/manifest.hpp"
#include "cmil/matrix.hpp"
#include "cmil/models.hpp"

namespace cmil::evaluation {

struct EvalItem {
  Vec features;  // raw crop input, embedded by the model at eval time
  std::string identity;
  std::optional<std::string> camera_id;
};

struct EvalSplit {
  std::vector<EvalItem> queries;
  std::vector<EvalItem> gallery;
  std::vector<Vec> distractors;  // never relevant

  /// Every query identity must appear in the gallery.
  void validate() const;
};

struct EvalReport {
  double rank1 = 0.0;
  double rank5 = 0.0;
  double rank10 = 0.0;
  double map = 0.0;
  std::size_t num_queries = 0;

  std::string to_json() const;
};

/// One query's ranking over gallery + distractor candidates, ascending by
/// distance with ties broken by original candidate index.
struct RankedQuery {
  std::vector<std::size_t> order;  // candidate indices in rank order
  std::vector<char> relevant;      // parallel to order
  std::size_t num_relevant = 0;
};

/// Embeds all crops with the bundle's extractor and ranks candidates per
/// query under the given metric. Crop-level embeddings only; bags play no
/// role at inference. camera_filter drops gallery items sharing both
/// identity and camera with the query.
std::vector<RankedQuery> rank_queries(const EvalSplit& split,
                                      const models::ModelBundle& bundle,
                                      DistanceKind distance,
                                      bool camera_filter = false);

/// Fraction of queries with a relevant item in the top k.
double rank_k_accuracy(const std::vector<RankedQuery>& ranked, std::size_t k);

/// Mean over queries of (mean over relevant items of precision at the
/// item's rank).
double mean_average_precision(const std::vector<RankedQuery>& ranked);

EvalReport evaluate(const EvalSplit& split, const models::ModelBundle& bundle,
                    bool camera_filter = false);

/// Builds a query/gallery split from a manifest with true identities: one
/// query per identity with >= 2 crops (chosen by seed), the rest gallery;
/// identity-less crops become distractors.
EvalSplit eval_split_from_manifest(const data::DatasetManifest& manifest,
                                   std::uint64_t seed);

}  // namespace cmil::evaluation
