#include "cmil/sampler.hpp"

#include <algorithm>
#include <numeric>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "cmil/error.hpp"

namespace cmil::sampling {

std::string BatchPlan::to_json() const {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& sb : subbags) {
    nlohmann::ordered_json js;
    js["source_bag_id"] = sb.source_bag_id;
    js["label"] = sb.label;
    js["crop_ids"] = sb.crop_ids;
    j.push_back(std::move(js));
  }
  return j.dump();
}

SubBag sample_subbag(const data::BagRecord& bag, const SamplerConfig& cfg,
                     Rng& rng) {
  if (bag.crop_ids.empty())
    throw SamplerError("bag '" + bag.bag_id + "' is empty");
  const std::size_t n = bag.crop_ids.size();
  const std::size_t s = cfg.subbag_size;

  SubBag out;
  out.source_bag_id = bag.bag_id;
  out.label = bag.label;
  out.crop_ids.reserve(s);

  if (n >= s) {
    // Uniform sample without replacement: partial Fisher-Yates.
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < s; ++i) {
      const std::size_t j = i + rng.bounded(n - i);
      std::swap(idx[i], idx[j]);
      out.crop_ids.push_back(bag.crop_ids[idx[i]]);
    }
  } else {
    // Balanced oversample: every crop appears floor(s/n) times, and the
    // s mod n leftover slots go to distinct uniformly chosen crops.
    const std::size_t base = s / n;
    const std::size_t rem = s % n;
    std::vector<std::size_t> counts(n, base);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < rem; ++i) {
      const std::size_t j = i + rng.bounded(n - i);
      std::swap(idx[i], idx[j]);
      counts[idx[i]] += 1;
    }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < counts[i]; ++c)
        out.crop_ids.push_back(bag.crop_ids[i]);
    rng.shuffle(out.crop_ids);
  }
  return out;
}

BatchPlanner::BatchPlanner(const data::DatasetManifest& manifest,
                           const SamplerConfig& cfg)
    : manifest_(manifest), cfg_(cfg), rng_(cfg.seed) {
  if (cfg_.batch_size < 2)
    throw ConfigError("batch_size must be >= 2 (no positive pair below 2)");
  if (cfg_.subbag_size < 1) throw ConfigError("subbag_size must be >= 1");

  std::unordered_map<std::string, std::size_t> group_of_label;
  group_of_bag_.resize(manifest_.bags.size());
  for (std::size_t b = 0; b < manifest_.bags.size(); ++b) {
    const auto& bag = manifest_.bags[b];
    auto [it, inserted] =
        group_of_label.emplace(bag.label, groups_.size());
    if (inserted) groups_.push_back({bag.label, {}});
    groups_[it->second].bag_indices.push_back(b);
    group_of_bag_[b] = it->second;
  }
  if (groups_.size() < 2)
    throw SamplerError(
        "cannot satisfy batch conditions: dataset has fewer than 2 distinct "
        "labels");
}

BatchPlan BatchPlanner::build_batch(std::vector<char>& covered,
                                    std::size_t& remaining) {
  const std::size_t label_slots = cfg_.batch_size / 2;
  const bool odd = (cfg_.batch_size % 2) == 1;

  // Labels that still own uncovered bags come first, in shuffled order.
  std::vector<std::size_t> needy;
  for (std::size_t g = 0; g < groups_.size(); ++g) {
    for (std::size_t b : groups_[g].bag_indices) {
      if (!covered[b]) {
        needy.push_back(g);
        break;
      }
    }
  }
  rng_.shuffle(needy);

  std::vector<std::size_t> chosen;
  for (std::size_t g : needy) {
    if (chosen.size() == label_slots) break;
    chosen.push_back(g);
  }
  // Fill remaining slots with other labels, distinct while possible.
  if (chosen.size() < label_slots) {
    std::vector<std::size_t> rest;
    for (std::size_t g = 0; g < groups_.size(); ++g)
      if (std::find(chosen.begin(), chosen.end(), g) == chosen.end())
        rest.push_back(g);
    rng_.shuffle(rest);
    for (std::size_t g : rest) {
      if (chosen.size() == label_slots) break;
      chosen.push_back(g);
    }
    while (chosen.size() < label_slots)
      chosen.push_back(chosen[rng_.bounded(chosen.size())]);
  }

  const auto take_bag = [&](std::size_t g,
                            std::size_t avoid_or_npos) -> std::size_t {
    const auto& bags = groups_[g].bag_indices;
    std::vector<std::size_t> uncovered;
    for (std::size_t b : bags)
      if (!covered[b] && b != avoid_or_npos) uncovered.push_back(b);
    if (!uncovered.empty()) return uncovered[rng_.bounded(uncovered.size())];
    if (bags.size() > 1 && avoid_or_npos != SIZE_MAX) {
      std::size_t pick = bags[rng_.bounded(bags.size())];
      while (pick == avoid_or_npos) pick = bags[rng_.bounded(bags.size())];
      return pick;
    }
    return bags[rng_.bounded(bags.size())];
  };

  BatchPlan plan;
  std::vector<std::size_t> used_bags;
  for (std::size_t g : chosen) {
    const std::size_t first = take_bag(g, SIZE_MAX);
    covered[first] = 1;
    const std::size_t second = take_bag(g, first);
    covered[second] = 1;
    used_bags.push_back(first);
    used_bags.push_back(second);
    plan.subbags.push_back(
        sample_subbag(manifest_.bags[first], cfg_, rng_));
    plan.subbags.push_back(
        sample_subbag(manifest_.bags[second], cfg_, rng_));
  }
  if (odd) {
    const std::size_t g = chosen[rng_.bounded(chosen.size())];
    const std::size_t extra = take_bag(g, SIZE_MAX);
    covered[extra] = 1;
    used_bags.push_back(extra);
    plan.subbags.push_back(sample_subbag(manifest_.bags[extra], cfg_, rng_));
  }

  std::size_t counted = 0;
  for (std::size_t b = 0; b < covered.size(); ++b) counted += covered[b];
  remaining = covered.size() - counted;
  (void)used_bags;
  return plan;
}

std::vector<BatchPlan> BatchPlanner::next_epoch() {
  std::vector<char> covered(manifest_.bags.size(), 0);
  std::size_t remaining = manifest_.bags.size();
  std::vector<BatchPlan> epoch;
  while (remaining > 0) epoch.push_back(build_batch(covered, remaining));
  return epoch;
}

std::vector<BatchPlan> BatchPlanner::next_batches(std::size_t n) {
  std::vector<BatchPlan> out;
  while (out.size() < n) {
    if (pending_.empty()) pending_ = next_epoch();
    std::size_t take = std::min(n - out.size(), pending_.size());
    out.insert(out.end(), pending_.begin(), pending_.begin() + take);
    pending_.erase(pending_.begin(), pending_.begin() + take);
  }
  return out;
}

}  // namespace cmil::sampling
