#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cmil/manifest.hpp"
#include "cmil/rng.hpp"

namespace cmil::sampling {

struct SamplerConfig {
  std::size_t subbag_size = 6;  // crops per sub-bag
  std::size_t batch_size = 10;  // sub-bags per batch
  std::uint64_t seed = 0;
};

/// Fixed-size sample from one bag. Training touches only the bag label;
/// true identities never reach this type.
struct SubBag {
  std::string source_bag_id;
  std::string label;
  std::vector<std::string> crop_ids;  // length == subbag_size
};

struct BatchPlan {
  std::vector<SubBag> subbags;

  std::string to_json() const;
};

/// Without replacement when the bag is large enough; balanced
/// oversampling otherwise (counts differ by at most one).
SubBag sample_subbag(const data::BagRecord& bag, const SamplerConfig& cfg,
                     Rng& rng);

/// Deterministic batch stream satisfying the two batch conditions: every
/// label present gets >= 2 sub-bags, and each batch covers floor(b/2)
/// labels (an odd slot goes to one of the chosen labels as a third
/// sub-bag). Epochs are built so every bag serves as a sub-bag source at
/// least once per epoch.
class BatchPlanner {
 public:
  BatchPlanner(const data::DatasetManifest& manifest,
               const SamplerConfig& cfg);

  /// Plans one full epoch of batches.
  std::vector<BatchPlan> next_epoch();

  /// Next `n` batches, spanning epochs as needed.
  std::vector<BatchPlan> next_batches(std::size_t n);

 private:
  struct LabelGroup {
    std::string label;
    std::vector<std::size_t> bag_indices;
  };

  BatchPlan build_batch(std::vector<char>& covered, std::size_t& remaining);

  const data::DatasetManifest& manifest_;
  SamplerConfig cfg_;
  Rng rng_;
  std::vector<LabelGroup> groups_;
  std::vector<std::size_t> group_of_bag_;
  std::vector<BatchPlan> pending_;  // tail of the current epoch
};

}  // namespace cmil::sampling
